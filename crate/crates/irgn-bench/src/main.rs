use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use irgn_bench::config::ExperimentConfig;
use irgn_bench::experiment::{run_oracle_check, run_rate_experiment, run_rule_comparison};
use irgn_bench::report::emit_report;
use irgn_bench::selfcheck::run_selfcheck;

#[derive(Parser)]
#[command(
    name = "irgn-bench",
    about = "Benchmark harness for the iteratively regularized Gauss-Newton solver",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Noise sweep with a convergence-rate fit against the theoretical exponent
    Rates(CommonArgs),
    /// Oracle-inequality check against the noise-free reference sequence
    Oracle(CommonArgs),
    /// Compare posterior, discrepancy and a priori stopping rules on identical data
    Rules(CommonArgs),
    /// Operator-calculus probes and library invariants
    Selfcheck(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory for reports and traces
    #[arg(long)]
    out: PathBuf,
    /// Offset added to every noise seed
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

fn verdict_line(name: &str, pass: bool, detail: &str) -> bool {
    println!("VERDICT {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    pass
}

fn replay_posterior_traces(output: &irgn_bench::ExperimentOutput) -> (usize, usize) {
    let mut checked = 0;
    let mut ok = 0;
    for cell in &output.cells {
        if cell.outcome.rule == "posterior" {
            if let Some(trace) = &cell.trace {
                checked += 1;
                if trace.verify_posterior_rule().is_ok() {
                    ok += 1;
                }
            }
        }
    }
    (ok, checked)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn cmd_rates(args: &CommonArgs) -> Result<bool> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let output = run_rate_experiment(&cfg, args.seed_offset)?;
    emit_report(&output, &args.out)?;
    let s = &output.summary;
    println!(
        "rates: problem={} nu={} rule={} cells={} (failed {})",
        s.problem, s.nu, s.rule, s.cells_total, s.cells_failed
    );
    println!(
        "  slope = {} +/- {} (theory {:.4})",
        fmt_opt(s.slope),
        fmt_opt(s.slope_stderr),
        s.theory_exponent
    );
    println!(
        "  L*||v|| = {:.3e}, rho = {:.3e}, monotone stop-index fraction = {}",
        s.lipschitz_times_source_norm,
        s.rho,
        fmt_opt(s.stop_index_monotone_fraction)
    );
    println!("  runtime {:.3?}", output.runtime);
    let (replay_ok, replay_total) = replay_posterior_traces(&output);

    let mut pass = true;
    pass &= verdict_line(
        "cells",
        output.hard_verdicts_pass(),
        &format!("{}/{} failed", s.cells_failed, s.cells_total),
    );
    pass &= verdict_line("noise propagation bound", s.lemma35_pass, "<= 2 delta/sqrt(alpha_k)");
    pass &= verdict_line(
        "damped residual bounds",
        s.lemma47_pass,
        "q(k_delta) <= 5 delta, q(k<k_delta) >= delta/5",
    );
    pass &= verdict_line(
        "posterior replay",
        replay_ok == replay_total,
        &format!("{replay_ok}/{replay_total} traces"),
    );
    Ok(pass)
}

fn cmd_oracle(args: &CommonArgs) -> Result<bool> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let output = run_oracle_check(&cfg, args.seed_offset)?;
    emit_report(&output, &args.out)?;
    let s = &output.summary;
    println!(
        "oracle: problem={} nu={} cells={} (failed {})",
        s.problem, s.nu, s.cells_total, s.cells_failed
    );
    println!(
        "  max ratio = {}, spread of per-delta medians = {}",
        fmt_opt(s.max_oracle_ratio),
        fmt_opt(s.oracle_ratio_spread)
    );
    let mut pass = true;
    pass &= verdict_line(
        "cells",
        output.hard_verdicts_pass(),
        &format!("{}/{} failed", s.cells_failed, s.cells_total),
    );
    pass &= verdict_line(
        "oracle ratio",
        s.max_oracle_ratio.is_some_and(|r| r <= 10.0),
        &format!("max {} <= 10", fmt_opt(s.max_oracle_ratio)),
    );
    pass &= verdict_line(
        "oracle spread",
        s.oracle_ratio_spread.is_some_and(|r| r <= 10.0),
        &format!("spread {} <= 10", fmt_opt(s.oracle_ratio_spread)),
    );
    Ok(pass)
}

fn cmd_rules(args: &CommonArgs) -> Result<bool> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let output = run_rule_comparison(&cfg, args.seed_offset)?;
    emit_report(&output, &args.out)?;
    let s = &output.summary;
    println!(
        "rules: problem={} nu={} cells={} (failed {})",
        s.problem, s.nu, s.cells_total, s.cells_failed
    );
    println!("  slope posterior   = {}", fmt_opt(s.slope));
    println!("  slope discrepancy = {}", fmt_opt(s.slope_discrepancy));
    println!("  slope apriori     = {}", fmt_opt(s.slope_apriori));
    if s.nu > 1.0 {
        println!(
            "  (smooth source: the discrepancy principle saturates near 1/2 while the posterior rule tracks {:.4})",
            s.theory_exponent
        );
    }
    let (replay_ok, replay_total) = replay_posterior_traces(&output);
    let mut pass = true;
    pass &= verdict_line(
        "cells",
        output.hard_verdicts_pass(),
        &format!("{}/{} failed", s.cells_failed, s.cells_total),
    );
    pass &= verdict_line(
        "posterior replay",
        replay_ok == replay_total,
        &format!("{replay_ok}/{replay_total} traces"),
    );
    Ok(pass)
}

fn cmd_selfcheck(args: &CommonArgs) -> Result<bool> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let checks = run_selfcheck(&cfg)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut json = serde_json::to_string_pretty(&checks)?;
    json.push('\n');
    std::fs::write(args.out.join("selfcheck.json"), json)?;
    let mut pass = true;
    for c in &checks {
        println!(
            "selfcheck {}: {} ({})",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.detail
        );
        pass &= c.passed;
    }
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Rates(args) => cmd_rates(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Rules(args) => cmd_rules(args),
        Command::Selfcheck(args) => cmd_selfcheck(args),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
