//! Oracle tests: the full solver path on the diagonal benchmark must agree
//! with an independent componentwise implementation that never touches the
//! library's linear algebra.

use irgn::gauss_newton::{
    beta_k, irgn_step, run, stopping_functional, AlphaSchedule, StopRule, StopRuleConfig,
};
use irgn::hilbert::{CgSettings, GridFunction};
use irgn::operator::ForwardOperator;
use irgn::problems::{
    add_noise, diagonal_forward, make_source_with_initial_error, DiagonalProblem, NoiseSpec,
    SourceForm,
};

/// Componentwise replica of the iteration on `F(x)_i = s_i (x_i + g/2 x_i^2)`.
/// Direct scalar arithmetic: no CG, no GridFunction.
struct ComponentwiseOracle {
    sigma: Vec<f64>,
    gamma: f64,
    x0: Vec<f64>,
    y_data: Vec<f64>,
    alpha0: f64,
    ratio: f64,
    tau: f64,
    k_max: usize,
}

impl ComponentwiseOracle {
    fn f(&self, x: &[f64]) -> Vec<f64> {
        self.sigma
            .iter()
            .zip(x)
            .map(|(s, xi)| s * (xi + 0.5 * self.gamma * xi * xi))
            .collect()
    }

    fn derivative_diag(&self, x: &[f64]) -> Vec<f64> {
        self.sigma.iter().zip(x).map(|(s, xi)| s * (1.0 + self.gamma * xi)).collect()
    }

    fn functional(&self, x: &[f64], alpha: f64) -> f64 {
        let fx = self.f(x);
        let a = self.derivative_diag(x);
        fx.iter()
            .zip(&self.y_data)
            .zip(&a)
            .map(|((fi, yi), ai)| {
                let r = fi - yi;
                alpha * r * r / (alpha + ai * ai)
            })
            .sum()
    }

    fn step(&self, x: &[f64], alpha: f64) -> Vec<f64> {
        let fx = self.f(x);
        let a = self.derivative_diag(x);
        x.iter()
            .enumerate()
            .map(|(i, xi)| {
                let r = fx[i] - self.y_data[i];
                xi - (a[i] * r + alpha * (xi - self.x0[i])) / (alpha + a[i] * a[i])
            })
            .collect()
    }

    /// Runs the posterior rule; returns all iterates and the stop index.
    fn run(&self, delta: f64) -> (Vec<Vec<f64>>, usize) {
        let bound = self.tau * self.tau * delta * delta;
        let mut iterates = Vec::new();
        let mut x = self.x0.clone();
        let mut alpha = self.alpha0;
        for k in 0..=self.k_max {
            iterates.push(x.clone());
            if self.functional(&x, alpha) <= bound || k == self.k_max {
                return (iterates, k);
            }
            x = self.step(&x, alpha);
            alpha /= self.ratio;
        }
        unreachable!("loop returns at k_max");
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_distance(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    d / norm(b).max(1e-30)
}

#[test]
fn irgn_step_matches_componentwise_formula() {
    let op = diagonal_forward(DiagonalProblem::standard(16).unwrap());
    let cg = CgSettings::for_dim(16);
    let x_dagger = op.domain_center().clone();
    let y = op.eval(&x_dagger).unwrap();

    let mut x0 = x_dagger.clone();
    x0.axpy(-0.1, &GridFunction::constant(16, 0.25, 1.0).unwrap()).unwrap();
    let mut x_k = x_dagger.clone();
    x_k.axpy(0.08, &GridFunction::basis(16, 2, 1.0).unwrap()).unwrap();

    let alpha = 0.37;
    let next = irgn_step(&op, &x_k, &x0, &y, alpha, &cg).unwrap();

    let oracle = ComponentwiseOracle {
        sigma: op.problem().sigma().to_vec(),
        gamma: op.problem().gamma(),
        x0: x0.values().to_vec(),
        y_data: y.values().to_vec(),
        alpha0: alpha,
        ratio: 2.0,
        tau: 2.5,
        k_max: 1,
    };
    let expected = oracle.step(x_k.values(), alpha);
    assert!(
        rel_distance(next.values(), &expected) <= 1e-8,
        "step deviates: {}",
        rel_distance(next.values(), &expected)
    );
}

#[test]
fn stopping_functional_matches_componentwise_formula() {
    let op = diagonal_forward(DiagonalProblem::standard(16).unwrap());
    let cg = CgSettings::for_dim(16);
    let x_dagger = op.domain_center().clone();
    let y = op.eval(&x_dagger).unwrap();
    let y_noisy = add_noise(&y, &NoiseSpec { delta: 0.01, seed: 3 }).unwrap();

    let mut x = x_dagger.clone();
    x.axpy(0.05, &GridFunction::basis(16, 0, 1.0).unwrap()).unwrap();

    let alpha = 0.2;
    let got = stopping_functional(&op, &x, &y_noisy, alpha, &cg).unwrap();

    let oracle = ComponentwiseOracle {
        sigma: op.problem().sigma().to_vec(),
        gamma: op.problem().gamma(),
        x0: vec![0.0; 16],
        y_data: y_noisy.values().to_vec(),
        alpha0: alpha,
        ratio: 2.0,
        tau: 2.5,
        k_max: 1,
    };
    let expected = oracle.functional(x.values(), alpha);
    assert!(
        (got - expected).abs() <= 1e-8 * expected.max(1e-30),
        "functional {got} vs oracle {expected}"
    );
}

#[test]
fn beta_matches_componentwise_formula() {
    let op = diagonal_forward(DiagonalProblem::standard(12).unwrap());
    let cg = CgSettings::for_dim(12);
    let x_dagger = op.domain_center().clone();
    let mut x0 = x_dagger.clone();
    x0.axpy(0.07, &GridFunction::constant(12, 1.0, 1.0).unwrap()).unwrap();

    let alpha = 0.11;
    let got = beta_k(&op, &x_dagger, &x0, alpha, &cg).unwrap();

    // beta = || alpha/(alpha + s_i^2) * e0 ||  with s_i the derivative
    // entries at the exact solution.
    let g = op.problem().gamma();
    let expected = op
        .problem()
        .sigma()
        .iter()
        .zip(x_dagger.values())
        .zip(x0.values())
        .map(|((s, xd), x0i)| {
            let si = s * (1.0 + g * xd);
            let e0 = x0i - xd;
            let v = alpha / (alpha + si * si) * e0;
            v * v
        })
        .sum::<f64>()
        .sqrt();
    assert!((got - expected).abs() <= 1e-10 * expected.max(1e-30));
}

/// Full trace equivalence on n = 16 with a noisy posterior-rule run.
#[test]
fn full_trace_matches_componentwise_oracle() {
    let op = diagonal_forward(DiagonalProblem::standard(16).unwrap());
    let cg = CgSettings::for_dim(16);
    let x_dagger = op.domain_center().clone();
    let y = op.eval(&x_dagger).unwrap();

    let source = make_source_with_initial_error(
        &op,
        &x_dagger,
        SourceForm::Power { nu: 1.0 },
        21,
        op.domain_radius() / 8.0,
    )
    .unwrap();

    for (delta_rel, seed) in [(1e-2, 5u64), (1e-3, 6), (1e-4, 7)] {
        let delta = delta_rel * y.norm();
        let y_noisy = add_noise(&y, &NoiseSpec { delta, seed }).unwrap();
        let schedule = AlphaSchedule::halving(op.scale_alpha0()).unwrap();
        let stop = StopRuleConfig::with_defaults(StopRule::Posterior);
        let trace = run(&op, &source.x0, &y_noisy, delta, &schedule, &stop, &cg).unwrap();

        let oracle = ComponentwiseOracle {
            sigma: op.problem().sigma().to_vec(),
            gamma: op.problem().gamma(),
            x0: source.x0.values().to_vec(),
            y_data: y_noisy.values().to_vec(),
            alpha0: schedule.alpha0(),
            ratio: schedule.ratio(),
            tau: stop.tau,
            k_max: stop.k_max,
        };
        let (iterates, k_stop) = oracle.run(delta);

        assert_eq!(trace.stop_index, k_stop, "stop index (delta={delta_rel})");
        assert_eq!(trace.records.len(), iterates.len());
        for (record, expected) in trace.records.iter().zip(&iterates) {
            let dev = rel_distance(record.iterate.values(), expected);
            assert!(dev <= 1e-8, "iterate {} deviates by {dev} (delta={delta_rel})", record.k);
        }
        trace.verify_posterior_rule().unwrap();
    }
}

/// The noisy run deviates from the noise-free sequence by at most
/// 2 delta / sqrt(alpha_k) up to the comparison index.
#[test]
fn noise_propagation_bound_on_diagonal() {
    let op = diagonal_forward(DiagonalProblem::standard(32).unwrap());
    let cg = CgSettings::for_dim(32);
    let x_dagger = op.domain_center().clone();
    let y = op.eval(&x_dagger).unwrap();
    let source = make_source_with_initial_error(
        &op,
        &x_dagger,
        SourceForm::Power { nu: 1.0 },
        4,
        op.domain_radius() / 8.0,
    )
    .unwrap();
    assert!(op.lipschitz_estimate() * source.v_norm <= 0.1, "test problem must be tame");

    let schedule = AlphaSchedule::halving(op.scale_alpha0()).unwrap();
    let clean_stop = StopRuleConfig { rule: StopRule::KMaxOnly, tau: 2.5, c0: 0.25, k_max: 40 };
    let clean = run(&op, &source.x0, &y, 0.0, &schedule, &clean_stop, &cg).unwrap();

    let delta = 1e-3 * y.norm();
    let y_noisy = add_noise(&y, &NoiseSpec { delta, seed: 13 }).unwrap();
    let stop = StopRuleConfig::with_defaults(StopRule::Posterior);
    let noisy = run(&op, &source.x0, &y_noisy, delta, &schedule, &stop, &cg).unwrap();

    let ktilde =
        irgn::gauss_newton::ktilde_index(&schedule, delta, source.v_norm, stop.c0).unwrap();
    assert!(noisy.stop_index <= ktilde, "k_delta {} > k_tilde {ktilde}", noisy.stop_index);
    for record in &noisy.records {
        if record.k > ktilde {
            break;
        }
        let bound = 2.0 * delta / record.alpha.sqrt();
        let dev = record.iterate.distance(&clean.records[record.k].iterate).unwrap();
        assert!(dev <= bound, "k={}: |x^d - x| = {dev} > {bound}", record.k);
    }
}
