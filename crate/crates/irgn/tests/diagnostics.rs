//! Diagnostics against closed-form and dense spectral computations.

use irgn::gauss_newton::{
    run, stopping_functional, theory_diagnostics, AlphaSchedule, StopRule, StopRuleConfig,
};
use irgn::hilbert::{dense_jacobian, CgSettings, GridFunction};
use irgn::operator::{random_ball_point, ForwardOperator};
use irgn::problems::{
    add_noise, diagonal_forward, make_source_with_initial_error, DiagonalProblem, NoiseSpec,
    SourceForm,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The quadratic-form functional agrees with the dense SVD spectral sum.
#[test]
fn stopping_functional_matches_dense_spectrum() {
    let op = diagonal_forward(DiagonalProblem::standard(24).unwrap());
    let cg = CgSettings::for_dim(24);
    let x_dagger = op.domain_center().clone();
    let y = op.eval(&x_dagger).unwrap();
    let y_noisy = add_noise(&y, &NoiseSpec { delta: 0.05, seed: 2 }).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_ball_point(&mut rng, &x_dagger, 0.3).unwrap();

    for alpha in [1.0, 0.1, 1e-3] {
        let got = stopping_functional(&op, &x, &y_noisy, alpha, &cg).unwrap();

        // Dense route: residual expanded in the left singular basis of the
        // Jacobian at x; (alpha I + B)^{-1} acts as 1/(alpha + sigma^2).
        let jac = dense_jacobian(&op, &x).unwrap();
        let svd = jac.svd(true, true);
        let u = svd.u.as_ref().unwrap();
        let mut res = op.eval(&x).unwrap();
        res.axpy(-1.0, &y_noisy).unwrap();
        let res_v = nalgebra::DVector::from_column_slice(res.values());
        let coef = u.transpose() * &res_v;
        let mut dense = 0.0;
        let mut captured = 0.0;
        for i in 0..coef.len() {
            let s = svd.singular_values[i];
            dense += alpha * coef[i] * coef[i] / (alpha + s * s);
            captured += coef[i] * coef[i];
        }
        // Residual mass outside the column span sees (alpha I)^{-1}.
        dense += res_v.norm_squared() - captured;
        let rel = (got - dense).abs() / dense.max(1e-30);
        assert!(rel <= 1e-8, "alpha={alpha}: cg {got} vs dense {dense} (rel {rel})");
    }
}

/// Same spectral equivalence on the weighted (L2) elliptic problem, which
/// exercises the isometry between weighted and Euclidean coordinates.
#[test]
fn stopping_functional_matches_dense_spectrum_weighted() {
    use irgn::problems::{elliptic_forward, EllipticProblem};

    let op = elliptic_forward(EllipticProblem::new(48).unwrap()).unwrap();
    let cg = CgSettings::for_dim(48);
    let x_dagger = op.domain_center().clone();
    let y = op.eval(&x_dagger).unwrap();
    let y_noisy = add_noise(&y, &NoiseSpec { delta: 0.02 * y.norm(), seed: 12 }).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_ball_point(&mut rng, &x_dagger, 0.5 * op.domain_radius()).unwrap();

    let wy = op.y_weight();
    for alpha in [1.0, 1e-2, 1e-5] {
        let got = stopping_functional(&op, &x, &y_noisy, alpha, &cg).unwrap();

        // Euclidean coordinates: res_iso = sqrt(wy) * res, J_iso = J (equal
        // weights on both sides), and (alpha I + B)^{-1} acts spectrally.
        let jac = dense_jacobian(&op, &x).unwrap();
        let svd = jac.svd(true, true);
        let u = svd.u.as_ref().unwrap();
        let mut res = op.eval(&x).unwrap();
        res.axpy(-1.0, &y_noisy).unwrap();
        let res_iso = nalgebra::DVector::from_column_slice(res.values()) * wy.sqrt();
        let coef = u.transpose() * &res_iso;
        let mut dense = 0.0;
        let mut captured = 0.0;
        for i in 0..coef.len() {
            let s = svd.singular_values[i];
            dense += alpha * coef[i] * coef[i] / (alpha + s * s);
            captured += coef[i] * coef[i];
        }
        dense += res_iso.norm_squared() - captured;
        let rel = (got - dense).abs() / dense.max(1e-30);
        assert!(rel <= 1e-8, "alpha={alpha}: cg {got} vs dense {dense} (rel {rel})");
    }
}

/// Diagnostics on a nu = 1 diagonal run: bounds hold with modest slack and
/// every reported ratio is finite.
#[test]
fn diagnostics_on_noisy_diagonal_run() {
    let op = diagonal_forward(DiagonalProblem::standard(32).unwrap());
    let cg = CgSettings::for_dim(32);
    let x_dagger = op.domain_center().clone();
    let y = op.eval(&x_dagger).unwrap();
    let source = make_source_with_initial_error(
        &op,
        &x_dagger,
        SourceForm::Power { nu: 1.0 },
        8,
        op.domain_radius() / 8.0,
    )
    .unwrap();

    let schedule = AlphaSchedule::halving(op.scale_alpha0()).unwrap();
    let clean_stop = StopRuleConfig { rule: StopRule::KMaxOnly, tau: 2.5, c0: 0.25, k_max: 40 };
    let clean = run(&op, &source.x0, &y, 0.0, &schedule, &clean_stop, &cg).unwrap();

    let delta = 1e-3 * y.norm();
    let y_noisy = add_noise(&y, &NoiseSpec { delta, seed: 30 }).unwrap();
    let stop = StopRuleConfig::with_defaults(StopRule::Posterior);
    let noisy = run(&op, &source.x0, &y_noisy, delta, &schedule, &stop, &cg).unwrap();

    let diag =
        theory_diagnostics(&noisy, &clean, &op, &x_dagger, source.v_norm, stop.c0, &cg).unwrap();
    assert!(!diag.degenerate);
    assert!(diag.k_delta <= diag.ktilde);
    assert!(diag.oracle_ratio.is_finite() && diag.oracle_ratio > 0.0);

    for row in &diag.rows {
        if let Some(dev) = row.noise_propagation {
            if row.within_ktilde {
                assert!(
                    dev <= 2.0 * row.noise_bound,
                    "k={}: propagation {dev} > 2 * {}",
                    row.k,
                    row.noise_bound
                );
            }
        }
        if let Some(q) = row.clean_residual_functional {
            assert!(q.is_finite());
        }
        if let Some(ratio) = row.error_to_beta {
            assert!(ratio.is_finite() && ratio > 0.0);
        }
    }

    // The clean damped residual is of order delta at the stopping index and
    // no smaller than a fraction of delta before it.
    let q_stop = diag.rows[diag.k_delta].clean_residual_functional.unwrap();
    assert!(q_stop <= 5.0 * delta, "q at stop {q_stop} vs delta {delta}");
    for row in &diag.rows[..diag.k_delta] {
        let q = row.clean_residual_functional.unwrap();
        assert!(q >= delta / 5.0, "k={}: q {q} below delta/5", row.k);
    }
}

/// The error-to-beta ratios of the noise-free sequence stay bounded and of
/// order one: the deterministic error tracks beta_k.
#[test]
fn clean_error_tracks_beta() {
    let op = diagonal_forward(DiagonalProblem::standard(24).unwrap());
    let cg = CgSettings::for_dim(24);
    let x_dagger = op.domain_center().clone();
    let y = op.eval(&x_dagger).unwrap();
    let source = make_source_with_initial_error(
        &op,
        &x_dagger,
        SourceForm::Range,
        15,
        op.domain_radius() / 8.0,
    )
    .unwrap();

    let schedule = AlphaSchedule::halving(op.scale_alpha0()).unwrap();
    let stop = StopRuleConfig { rule: StopRule::KMaxOnly, tau: 2.5, c0: 0.25, k_max: 30 };
    let clean = run(&op, &source.x0, &y, 0.0, &schedule, &stop, &cg).unwrap();
    // Reuse the trace on both slots: propagation rows are zero, and the
    // beta ratios are what this test is about.
    let diag =
        theory_diagnostics(&clean, &clean, &op, &x_dagger, source.v_norm, 0.25, &cg).unwrap();

    for row in &diag.rows {
        let ratio = row.error_to_beta.expect("beta positive for nonzero e0");
        assert!(
            (0.2..=5.0).contains(&ratio),
            "k={}: error/beta = {ratio} out of range",
            row.k
        );
    }
}

/// Identical data in both traces: zero propagation everywhere.
#[test]
fn diagnostics_with_delta_zero_twin() {
    let op = diagonal_forward(DiagonalProblem::standard(8).unwrap());
    let cg = CgSettings::for_dim(8);
    let x_dagger = op.domain_center().clone();
    let y = op.eval(&x_dagger).unwrap();
    let mut x0 = x_dagger.clone();
    x0.axpy(0.06, &GridFunction::basis(8, 1, 1.0).unwrap()).unwrap();

    let schedule = AlphaSchedule::halving(op.scale_alpha0()).unwrap();
    let stop = StopRuleConfig { rule: StopRule::KMaxOnly, tau: 2.5, c0: 0.25, k_max: 10 };
    let clean = run(&op, &x0, &y, 0.0, &schedule, &stop, &cg).unwrap();
    let diag = theory_diagnostics(&clean, &clean, &op, &x_dagger, 0.06, 0.25, &cg).unwrap();
    for row in &diag.rows {
        assert_eq!(row.noise_propagation.unwrap(), 0.0);
        assert_eq!(row.noise_bound, 0.0);
    }
}
