//! Acceptance suite: one test per shipped guarantee, each printing a
//! pass/fail line. The noise sweeps are shared across tests through a
//! process-wide fixture so the whole suite runs each experiment once.

use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use irgn::gauss_newton::{run, AlphaSchedule, StopRule, StopRuleConfig};
use irgn::hilbert::CgSettings;
use irgn::operator::{adjoint_check, random_ball_point, taylor_remainder_check, ForwardOperator};
use irgn::problems::{
    add_noise, diagonal_forward, elliptic_forward, make_source_with_initial_error,
    DiagonalProblem, EllipticProblem, NoiseSpec, SourceForm,
};
use irgn_bench::config::ExperimentConfig;
use irgn_bench::experiment::{run_rate_experiment, ExperimentOutput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DELTAS: &str = "[1e-2, 1e-3, 1e-4, 1e-5]";
const SEEDS: &str = "[1, 2, 3, 4, 5]";

fn config(problem: &str, n: usize, nu: f64, form: &str) -> ExperimentConfig {
    let text = format!(
        "problem = \"{problem}\"\nn = {n}\nnu = {nu}\nsource_form = \"{form}\"\n\
         deltas = {DELTAS}\nseeds = {SEEDS}\n"
    );
    let cfg: ExperimentConfig = toml::from_str(&text).expect("acceptance config parses");
    cfg.validate().expect("acceptance config valid");
    cfg
}

struct Sweep {
    output: ExperimentOutput,
    runtime: Duration,
}

fn sweep(problem: &str, n: usize, nu: f64, form: &str) -> Sweep {
    let cfg = config(problem, n, nu, form);
    let start = Instant::now();
    let output = run_rate_experiment(&cfg, 0).expect("experiment runs");
    Sweep { output, runtime: start.elapsed() }
}

struct Fixtures {
    diag_nu1: Sweep,
    ell_nu1: Sweep,
    diag_nu2: Sweep,
    ell_nu2: Sweep,
    diag_v: Sweep,
    ell_v: Sweep,
}

fn fixtures() -> &'static Fixtures {
    static F: OnceLock<Fixtures> = OnceLock::new();
    F.get_or_init(|| Fixtures {
        diag_nu1: sweep("diagonal", 64, 1.0, "power"),
        ell_nu1: sweep("elliptic", 201, 1.0, "power"),
        diag_nu2: sweep("diagonal", 64, 2.0, "power"),
        ell_nu2: sweep("elliptic", 201, 2.0, "power"),
        diag_v: sweep("diagonal", 64, 1.0, "range"),
        ell_v: sweep("elliptic", 201, 1.0, "range"),
    })
}

fn assert_slope_band(label: &str, sweep: &Sweep, lo: f64, hi: f64) {
    let slope = sweep
        .output
        .summary
        .slope
        .unwrap_or_else(|| panic!("{label}: no slope could be fitted"));
    assert!(
        (lo..=hi).contains(&slope),
        "{label}: fitted slope {slope:.4} outside [{lo}, {hi}] \
         (per-delta stop indices: {:?}; at the largest noise levels the rule can stop at k = 0 \
         when the noise exceeds the data-space signal of the initial error, freezing the error \
         at ||x0 - x_true||)",
        sweep
            .output
            .cells
            .iter()
            .map(|c| c.outcome.k_stop)
            .collect::<Vec<_>>()
    );
    println!("{label}: slope {slope:.4} in [{lo}, {hi}]");
}

#[test]
fn criterion_01_rate_exponent_nu1() {
    let f = fixtures();
    assert!(
        f.diag_nu1.runtime <= Duration::from_secs(60),
        "diagonal sweep took {:?}",
        f.diag_nu1.runtime
    );
    assert!(
        f.ell_nu1.runtime <= Duration::from_secs(60),
        "elliptic sweep took {:?}",
        f.ell_nu1.runtime
    );
    assert_slope_band("criterion 01 (nu=1, diagonal)", &f.diag_nu1, 0.40, 0.60);
    assert_slope_band("criterion 01 (nu=1, elliptic)", &f.ell_nu1, 0.40, 0.60);
    println!(
        "criterion 01: PASS (runtimes {:?} / {:?})",
        f.diag_nu1.runtime, f.ell_nu1.runtime
    );
}

#[test]
fn criterion_02_rate_exponent_nu2() {
    let f = fixtures();
    assert_slope_band("criterion 02 (nu=2, diagonal)", &f.diag_nu2, 0.55, 0.78);
    assert_slope_band("criterion 02 (nu=2, elliptic)", &f.ell_nu2, 0.55, 0.78);
    println!("criterion 02: PASS");
}

#[test]
fn criterion_03_rate_vform_sources() {
    let f = fixtures();
    assert_slope_band("criterion 03 (range form, diagonal)", &f.diag_v, 0.40, 0.60);
    assert_slope_band("criterion 03 (range form, elliptic)", &f.ell_v, 0.40, 0.60);
    println!("criterion 03: PASS");
}

#[test]
fn criterion_04_oracle_inequality() {
    let f = fixtures();
    for (label, sweep) in [("diagonal", &f.diag_nu1), ("elliptic", &f.ell_nu1)] {
        let s = &sweep.output.summary;
        let max = s.max_oracle_ratio.expect("oracle ratios computed");
        assert!(max <= 10.0, "criterion 04 ({label}): max oracle ratio {max:.3} > 10");
        let spread = s.oracle_ratio_spread.expect("oracle spread computed");
        assert!(
            spread <= 10.0,
            "criterion 04 ({label}): oracle-ratio spread {spread:.3} > 10 over the delta range"
        );
        println!("criterion 04 ({label}): max ratio {max:.3}, spread {spread:.3}");
    }
    println!("criterion 04: PASS");
}

#[test]
fn criterion_05_noise_propagation_bound() {
    let f = fixtures();
    for (label, sweep) in [
        ("diagonal nu=1", &f.diag_nu1),
        ("elliptic nu=1", &f.ell_nu1),
        ("diagonal nu=2", &f.diag_nu2),
        ("elliptic nu=2", &f.ell_nu2),
    ] {
        assert!(
            sweep.output.summary.lemma35_pass,
            "criterion 05 ({label}): ||x_k^d - x_k|| exceeded 2 delta/sqrt(alpha_k) in a cell"
        );
        assert_eq!(sweep.output.summary.cells_failed, 0, "criterion 05 ({label}): failed cells");
    }
    println!("criterion 05: PASS (all nu=1/nu=2 runs bounded by 2 delta/sqrt(alpha_k))");
}

#[test]
fn criterion_06_damped_residual_bounds() {
    let f = fixtures();
    for (label, sweep) in [
        ("diagonal nu=1", &f.diag_nu1),
        ("elliptic nu=1", &f.ell_nu1),
        ("diagonal nu=2", &f.diag_nu2),
        ("elliptic nu=2", &f.ell_nu2),
    ] {
        assert!(
            sweep.output.summary.lemma47_pass,
            "criterion 06 ({label}): damped residual bounds violated \
             (q(k_delta) <= 5 delta and q(k) >= delta/5 before it)"
        );
    }
    println!("criterion 06: PASS");
}

#[test]
fn criterion_07_stopping_rule_replay() {
    let f = fixtures();
    let mut replayed = 0usize;
    for sweep in [&f.diag_nu1, &f.ell_nu1, &f.diag_nu2, &f.ell_nu2, &f.diag_v, &f.ell_v] {
        for cell in &sweep.output.cells {
            if cell.outcome.rule == "posterior" {
                if let Some(trace) = &cell.trace {
                    trace
                        .verify_posterior_rule()
                        .unwrap_or_else(|e| panic!("criterion 07: replay failed: {e}"));
                    replayed += 1;
                }
            }
        }
    }
    assert!(replayed >= 100, "expected at least 100 posterior traces, saw {replayed}");
    println!("criterion 07: PASS ({replayed} traces replayed exactly)");
}

/// Independent componentwise replica of the solver on the diagonal problem
/// (its own arithmetic, no shared linear algebra with the library).
mod componentwise {
    pub struct Oracle {
        pub sigma: Vec<f64>,
        pub gamma: f64,
        pub x0: Vec<f64>,
        pub y_data: Vec<f64>,
        pub alpha0: f64,
        pub ratio: f64,
        pub tau: f64,
        pub k_max: usize,
    }

    impl Oracle {
        fn f(&self, x: &[f64]) -> Vec<f64> {
            self.sigma
                .iter()
                .zip(x)
                .map(|(s, xi)| s * (xi + 0.5 * self.gamma * xi * xi))
                .collect()
        }

        pub fn run(&self, delta: f64) -> (Vec<Vec<f64>>, usize) {
            let bound = self.tau * self.tau * delta * delta;
            let mut iterates = Vec::new();
            let mut x = self.x0.clone();
            let mut alpha = self.alpha0;
            for k in 0..=self.k_max {
                iterates.push(x.clone());
                let fx = self.f(&x);
                let a: Vec<f64> =
                    self.sigma.iter().zip(&x).map(|(s, xi)| s * (1.0 + self.gamma * xi)).collect();
                let functional: f64 = fx
                    .iter()
                    .zip(&self.y_data)
                    .zip(&a)
                    .map(|((fi, yi), ai)| {
                        let r = fi - yi;
                        alpha * r * r / (alpha + ai * ai)
                    })
                    .sum();
                if functional <= bound || k == self.k_max {
                    return (iterates, k);
                }
                x = x
                    .iter()
                    .enumerate()
                    .map(|(i, xi)| {
                        let r = fx[i] - self.y_data[i];
                        xi - (a[i] * r + alpha * (xi - self.x0[i])) / (alpha + a[i] * a[i])
                    })
                    .collect();
                alpha /= self.ratio;
            }
            unreachable!()
        }
    }
}

#[test]
fn criterion_08_oracle_equivalence() {
    let op = diagonal_forward(DiagonalProblem::standard(64).unwrap());
    let cg = CgSettings::for_dim(64);
    let x_dagger = op.domain_center().clone();
    let y = op.eval(&x_dagger).unwrap();
    let source = make_source_with_initial_error(
        &op,
        &x_dagger,
        SourceForm::Power { nu: 1.0 },
        7,
        op.domain_radius() / 8.0,
    )
    .unwrap();
    let schedule = AlphaSchedule::halving(op.scale_alpha0()).unwrap();
    let stop = StopRuleConfig::with_defaults(StopRule::Posterior);

    for (delta_rel, seed) in [(1e-2, 1u64), (1e-3, 2), (1e-4, 3)] {
        let delta = delta_rel * y.norm();
        let y_noisy = add_noise(&y, &NoiseSpec { delta, seed }).unwrap();
        let trace = run(&op, &source.x0, &y_noisy, delta, &schedule, &stop, &cg).unwrap();

        let oracle = componentwise::Oracle {
            sigma: op.problem().sigma().to_vec(),
            gamma: op.problem().gamma(),
            x0: source.x0.values().to_vec(),
            y_data: y_noisy.values().to_vec(),
            alpha0: schedule.alpha0(),
            ratio: schedule.ratio(),
            tau: stop.tau,
            k_max: stop.k_max,
        };
        let (expected, k_stop) = oracle.run(delta);

        assert_eq!(trace.stop_index, k_stop, "criterion 08: stop index (delta={delta_rel})");
        assert_eq!(trace.records.len(), expected.len());
        for (record, exp) in trace.records.iter().zip(&expected) {
            let num: f64 = record
                .iterate
                .values()
                .iter()
                .zip(exp)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den = exp.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
            assert!(
                num / den <= 1e-8,
                "criterion 08: iterate {} deviates by {:.3e} (delta={delta_rel})",
                record.k,
                num / den
            );
        }
    }
    println!("criterion 08: PASS (3 cells matched the componentwise solver to 1e-8)");
}

#[test]
fn criterion_09_operator_calculus() {
    let diag = diagonal_forward(DiagonalProblem::standard(64).unwrap());
    let ell = elliptic_forward(EllipticProblem::new(201).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce5);

    // Adjoint identity at 20 sampled points per problem.
    for (label, op) in [("diagonal", &diag as &dyn ForwardOperator), ("elliptic", &ell)] {
        let center = op.domain_center().clone();
        for i in 0..20 {
            let x = random_ball_point(&mut rng, &center, op.domain_radius()).unwrap();
            let worst = adjoint_check(op, &x, 5, 3000 + i).unwrap();
            assert!(worst <= 1e-10, "criterion 09 ({label}): adjoint defect {worst:.3e}");
        }
    }

    // Taylor remainder at 20 sampled (x, h) per problem.
    for (label, op) in [("diagonal", &diag as &dyn ForwardOperator), ("elliptic", &ell)] {
        let center = op.domain_center().clone();
        for i in 0..20 {
            let x = random_ball_point(&mut rng, &center, 0.5 * op.domain_radius()).unwrap();
            let dir = random_ball_point(&mut rng, &op.zero_x(), 1.0).unwrap();
            let dn = dir.norm();
            if dn == 0.0 {
                continue;
            }
            let scale = op.domain_radius() * 0.25 * [1.0, 0.1, 0.01][i % 3];
            let h = dir.scale(scale / dn);
            let out = taylor_remainder_check(op, &x, &h).unwrap();
            assert!(
                out.remainder <= 1.5 * out.bound + 1e-15,
                "criterion 09 ({label}): remainder {:.3e} vs 1.5 * bound {:.3e}",
                out.remainder,
                1.5 * out.bound
            );
        }
    }

    // Elliptic state solve: analytic solution at c = 0 with O(h^2) decay.
    let pi = std::f64::consts::PI;
    let err_for = |n: usize| {
        let p = EllipticProblem::with_functions(n, |t| pi * pi * (pi * t).sin(), |_| 0.0).unwrap();
        let u = p.solve_state(p.c_dagger()).unwrap();
        let h = p.mesh();
        u.values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - (pi * ((i as f64 + 1.0) * h)).sin()).abs())
            .fold(0.0f64, f64::max)
    };
    let (e_coarse, e_fine) = (err_for(99), err_for(199));
    assert!(e_fine <= 1e-3, "criterion 09: analytic error {e_fine:.3e}");
    let ratio = e_coarse / e_fine;
    assert!(
        (3.2..=4.8).contains(&ratio),
        "criterion 09: mesh-doubling error ratio {ratio:.2} not within 4 +/- 20%"
    );
    println!("criterion 09: PASS (adjoints <= 1e-10, taylor within 1.5x, mesh ratio {ratio:.2})");
}

#[test]
fn criterion_10_cli_determinism() {
    let dir = std::env::temp_dir().join(format!("irgn_accept_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("cfg.toml");
    std::fs::write(
        &cfg_path,
        "problem = \"diagonal\"\nn = 16\nnu = 1.0\ndeltas = [1e-2, 1e-3]\nseeds = [1, 2]\n",
    )
    .unwrap();

    let run_once = |out: &str| {
        let out_dir = dir.join(out);
        let status = Command::new(env!("CARGO_BIN_EXE_irgn-bench"))
            .args(["rates", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out_dir)
            .status()
            .expect("spawning irgn-bench");
        assert!(status.success(), "irgn-bench rates exited with {status}");
        let csv = std::fs::read(out_dir.join("report.csv")).unwrap();
        let json = std::fs::read(out_dir.join("summary.json")).unwrap();
        (csv, json)
    };

    let (csv_a, json_a) = run_once("a");
    let (csv_b, json_b) = run_once("b");
    assert_eq!(csv_a, csv_b, "criterion 10: report.csv differs between identical runs");
    assert_eq!(json_a, json_b, "criterion 10: summary.json differs between identical runs");
    std::fs::remove_dir_all(&dir).ok();
    println!("criterion 10: PASS (byte-identical CSV and JSON)");
}
