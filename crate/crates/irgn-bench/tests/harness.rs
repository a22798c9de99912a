//! Harness-level tests: report emission, serialization round trips, and
//! aggregation invariances.

use irgn_bench::config::ExperimentConfig;
use irgn_bench::experiment::{run_rate_experiment, run_rule_comparison, ExperimentOutput};
use irgn_bench::report::{emit_report, Summary, CSV_HEADER};

fn small_config(extra: &str) -> ExperimentConfig {
    let text = format!(
        "problem = \"diagonal\"\nn = 12\nnu = 1.0\ndeltas = [1e-2, 1e-3, 1e-4]\nseeds = [1, 2, 3]\n{extra}"
    );
    let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn small_output() -> ExperimentOutput {
    run_rate_experiment(&small_config(""), 0).unwrap()
}

#[test]
fn emit_writes_all_artifacts() {
    let out = small_output();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&out, dir.path()).unwrap();

    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER);
    assert_eq!(lines.count(), 9); // 3 deltas x 3 seeds

    let summary: Summary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary.problem, "diagonal");
    assert_eq!(summary.cells_total, 9);

    let plot = std::fs::read_to_string(dir.path().join("plot.dat")).unwrap();
    assert_eq!(plot.lines().count(), 3);

    assert!(dir.path().join("traces/clean.json").exists());
    let traces = std::fs::read_dir(dir.path().join("traces")).unwrap().count();
    assert_eq!(traces, 10); // clean + 9 cells
}

#[test]
fn emit_empty_report_is_header_only() {
    let mut out = small_output();
    out.cells.clear();
    out.fit_points.clear();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&out, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv, format!("{CSV_HEADER}\n"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert!(summary.is_object());
    assert_eq!(std::fs::read_to_string(dir.path().join("plot.dat")).unwrap(), "");
}

#[test]
fn emit_single_cell_report_has_one_row() {
    let mut out = small_output();
    out.cells.truncate(1);
    let dir = tempfile::tempdir().unwrap();
    emit_report(&out, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    // Every column populated.
    assert_eq!(rows[1].split(',').count(), 9);
    assert!(!rows[1].split(',').any(|f| f.is_empty()));
}

#[test]
fn summary_round_trips_through_json() {
    let out = small_output();
    let text = serde_json::to_string_pretty(&out.summary).unwrap();
    let back: Summary = serde_json::from_str(&text).unwrap();
    let again = serde_json::to_string_pretty(&back).unwrap();
    assert_eq!(text, again);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let cfg = small_config("");
    let a = run_rate_experiment(&cfg, 0).unwrap();
    let b = run_rate_experiment(&cfg, 0).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_report(&a, da.path()).unwrap();
    emit_report(&b, db.path()).unwrap();
    for name in ["report.csv", "summary.json", "plot.dat"] {
        let x = std::fs::read(da.path().join(name)).unwrap();
        let y = std::fs::read(db.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical runs");
    }
}

#[test]
fn seed_permutation_leaves_aggregates_unchanged() {
    let a = run_rate_experiment(&small_config(""), 0).unwrap();
    let permuted = small_config("").clone();
    let mut permuted = permuted;
    permuted.seeds = vec![3, 1, 2];
    let b = run_rate_experiment(&permuted, 0).unwrap();

    let ja = serde_json::to_string(&a.summary).unwrap();
    let jb = serde_json::to_string(&b.summary).unwrap();
    assert_eq!(ja, jb, "summary depends on seed order");

    // The cell *set* is identical up to ordering.
    let key = |c: &irgn_bench::Cell| {
        (
            c.outcome.delta_rel.to_bits(),
            c.outcome.seed,
            c.outcome.k_stop,
            c.outcome.error.map(f64::to_bits),
        )
    };
    let mut ka: Vec<_> = a.cells.iter().map(key).collect();
    let mut kb: Vec<_> = b.cells.iter().map(key).collect();
    ka.sort();
    kb.sort();
    assert_eq!(ka, kb);
}

#[test]
fn seed_offset_shifts_every_cell_seed() {
    let cfg = small_config("");
    let out = run_rate_experiment(&cfg, 100).unwrap();
    for cell in &out.cells {
        assert!(cell.outcome.seed >= 101);
    }
}

#[test]
fn rule_comparison_runs_three_rules_per_cell() {
    let out = run_rule_comparison(&small_config(""), 0).unwrap();
    assert_eq!(out.cells.len(), 27); // 3 deltas x 3 seeds x 3 rules
    for rule in ["posterior", "discrepancy", "apriori"] {
        assert_eq!(out.cells.iter().filter(|c| c.outcome.rule == rule).count(), 9);
    }
    assert!(out.summary.slope_discrepancy.is_some());
    assert!(out.summary.slope_apriori.is_some());

    // Zero-noise-limit sanity: medians of every rule shrink monotonically
    // with delta.
    for rule in ["posterior", "discrepancy", "apriori"] {
        let mut meds = Vec::new();
        for d in &out.config.deltas {
            let errs: Vec<f64> = out
                .cells
                .iter()
                .filter(|c| c.outcome.rule == rule && c.outcome.delta_rel == *d)
                .filter_map(|c| c.outcome.error)
                .collect();
            meds.push(irgn_bench::median(&errs).unwrap());
        }
        for pair in meds.windows(2) {
            assert!(pair[1] <= pair[0] * 1.05, "{rule}: medians not shrinking: {meds:?}");
        }
    }

    // A priori and posterior land within a factor of 10 of each other.
    for d in &out.config.deltas {
        let med = |rule: &str| {
            let errs: Vec<f64> = out
                .cells
                .iter()
                .filter(|c| c.outcome.rule == rule && c.outcome.delta_rel == *d)
                .filter_map(|c| c.outcome.error)
                .collect();
            irgn_bench::median(&errs).unwrap()
        };
        let (p, a) = (med("posterior"), med("apriori"));
        let ratio = if p > a { p / a } else { a / p };
        assert!(ratio <= 10.0, "delta {d}: posterior {p:.3e} vs apriori {a:.3e}");
    }
}

#[test]
fn failed_fraction_gates_hard_verdict() {
    let out = small_output();
    assert!(out.hard_verdicts_pass());
}

#[test]
fn elliptic_selectors_and_overrides_apply() {
    let text = "problem = \"elliptic\"\nn = 31\nnu = 1.0\n\
                elliptic_f = \"sine\"\nelliptic_c = \"constant\"\nelliptic_c_value = 2.0\n\
                rho = 0.05\nsource_norm = 0.004\n\
                deltas = [1e-3, 1e-4]\nseeds = [1]\n";
    let cfg: ExperimentConfig = toml::from_str(text).unwrap();
    cfg.validate().unwrap();
    let setup = irgn_bench::build_setup(&cfg).unwrap();
    assert_eq!(setup.rho, 0.05);
    // Power form: ||omega|| is prescribed, the initial error follows.
    assert!((setup.source.omega_norm.unwrap() - 0.004).abs() <= 1e-15);
    assert!(setup.source.initial_error > 0.0);
    let out = run_rate_experiment(&cfg, 0).unwrap();
    assert_eq!(out.summary.cells_failed, 0);
}

#[test]
fn rho_above_spd_cap_is_rejected_for_elliptic() {
    let text = "problem = \"elliptic\"\nn = 31\nrho = 10.0\ndeltas = [1e-2, 1e-3]\nseeds = [1]\n";
    let cfg: ExperimentConfig = toml::from_str(text).unwrap();
    cfg.validate().unwrap();
    assert!(irgn_bench::build_setup(&cfg).is_err());
}

#[test]
fn cli_subcommands_run_and_exit_clean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg_path,
        "problem = \"diagonal\"\nn = 12\nnu = 1.0\ndeltas = [1e-2, 1e-3]\nseeds = [1, 2]\n",
    )
    .unwrap();
    for sub in ["rates", "oracle", "rules", "selfcheck"] {
        let out_dir = dir.path().join(sub);
        let output = std::process::Command::new(env!("CARGO_BIN_EXE_irgn-bench"))
            .args([sub, "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .expect("spawning irgn-bench");
        assert!(
            output.status.success(),
            "{sub} exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stdout)
        );
        let expected = if sub == "selfcheck" { "selfcheck.json" } else { "summary.json" };
        assert!(out_dir.join(expected).exists(), "{sub} did not write {expected}");
    }
}

#[test]
fn cli_rejects_broken_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    std::fs::write(&cfg_path, "problem = \"diagonal\"\nn = 12\ndeltas = [1e-3, 1e-2]\nseeds = [1]\n")
        .unwrap();
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_irgn-bench"))
        .args(["rates", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
