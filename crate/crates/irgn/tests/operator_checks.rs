//! Calculus verification across the shipped problems: adjoint identity,
//! derivative linearity and finite-difference consistency, Taylor remainder
//! scaling, Lipschitz probes, and the rescaling post-condition.

use irgn::hilbert::{dense_jacobian, power_iteration_norm, GridFunction};
use irgn::operator::{
    adjoint_check, lipschitz_probe, random_ball_point, rescale, taylor_remainder_check,
    ForwardOperator,
};
use irgn::problems::{
    diagonal_forward, elliptic_forward, DiagonalProblem, EllipticOperator, EllipticProblem,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn elliptic_adjoint_identity_at_sampled_points() {
    let op = elliptic_forward(EllipticProblem::new(101).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let center = op.domain_center().clone();
    for i in 0..20 {
        let c = random_ball_point(&mut rng, &center, op.domain_radius()).unwrap();
        let disc = adjoint_check(&op, &c, 5, 100 + i).unwrap();
        assert!(disc <= 1e-10, "point {i}: adjoint defect {disc}");
    }
}

#[test]
fn elliptic_derivative_is_linear() {
    let op = elliptic_forward(EllipticProblem::new(63).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let center = op.domain_center().clone();
    let x = random_ball_point(&mut rng, &center, 0.5 * op.domain_radius()).unwrap();
    for trial in 0..5 {
        let h1 = random_ball_point(&mut rng, &op.zero_x(), 1.0).unwrap();
        let h2 = random_ball_point(&mut rng, &op.zero_x(), 1.0).unwrap();
        let (a, b) = (1.7 + trial as f64, -0.3 * trial as f64 - 0.1);
        let mut combo = h1.scale(a);
        combo.axpy(b, &h2).unwrap();
        let lhs = op.derivative_apply(&x, &combo).unwrap();
        let mut rhs = op.derivative_apply(&x, &h1).unwrap().scale(a);
        rhs.axpy(b, &op.derivative_apply(&x, &h2).unwrap()).unwrap();
        let scale = a.abs() * h1.norm() + b.abs() * h2.norm();
        assert!(lhs.distance(&rhs).unwrap() <= 1e-12 * scale);
    }
}

#[test]
fn elliptic_derivative_matches_finite_differences() {
    let op = elliptic_forward(EllipticProblem::new(81).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let center = op.domain_center().clone();
    let c = random_ball_point(&mut rng, &center, 0.25 * op.domain_radius()).unwrap();
    let h = random_ball_point(&mut rng, &op.zero_x(), 1.0).unwrap();
    let exact = op.derivative_apply(&c, &h).unwrap();

    let fd_error = |t: f64| {
        let mut shifted = c.clone();
        shifted.axpy(t, &h).unwrap();
        let mut diff = op.eval(&shifted).unwrap();
        diff.axpy(-1.0, &op.eval(&c).unwrap()).unwrap();
        diff.scale(1.0 / t).distance(&exact).unwrap()
    };
    let e1 = fd_error(1e-3);
    let e2 = fd_error(5e-4);
    // One-sided differences converge linearly in t.
    let ratio = e1 / e2;
    assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}, errors {e1} {e2}");

    // Zero direction maps to zero.
    let zero = op.derivative_apply(&c, &op.zero_x()).unwrap();
    assert_eq!(zero.norm(), 0.0);
}

#[test]
fn elliptic_taylor_remainder_is_quadratic() {
    let op = elliptic_forward(EllipticProblem::new(101).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let center = op.domain_center().clone();
    let x = random_ball_point(&mut rng, &center, 0.25 * op.domain_radius()).unwrap();
    let dir = random_ball_point(&mut rng, &op.zero_x(), 1.0).unwrap();
    let dir = dir.scale(1.0 / dir.norm());

    let remainder_at = |scale: f64| {
        let h = dir.scale(scale);
        taylor_remainder_check(&op, &x, &h).unwrap().remainder
    };
    let s0 = 0.25 * op.domain_radius();
    let r: Vec<f64> = [s0, 0.5 * s0, 0.25 * s0].iter().map(|s| remainder_at(*s)).collect();

    // Successive halvings of ||h|| shrink the remainder by about 4.
    for w in r.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.2..=4.8).contains(&ratio), "ratio {ratio}");
    }
    // Fitted exponent across the three scales.
    let exponent = (r[0] / r[2]).log2() / 2.0;
    assert!((1.8..=2.2).contains(&exponent), "exponent {exponent}");
}

#[test]
fn diagonal_lipschitz_probe_brackets_exact_constant() {
    let problem = DiagonalProblem::standard(64).unwrap();
    let exact = problem.exact_lipschitz();
    let op = diagonal_forward(problem);
    // Fresh cell so the probe result is visible.
    let probed = lipschitz_probe(&op, 100, 9, 50).unwrap();
    assert!(probed <= exact * (1.0 + 1e-9), "probe {probed} above exact {exact}");
    assert!(probed >= 0.5 * exact, "probe {probed} below half of exact {exact}");
    // The probe never lowers a stored estimate.
    assert!(op.lipschitz_estimate() >= exact * (1.0 - 1e-12));
}

#[test]
fn elliptic_lipschitz_probe_is_seed_stable() {
    let op = elliptic_forward(EllipticProblem::new(101).unwrap()).unwrap();
    let a = lipschitz_probe(&op, 40, 1, 50).unwrap();
    let b = lipschitz_probe(&op, 40, 2, 50).unwrap();
    assert!(a > 0.0 && b > 0.0);
    let spread = (a - b).abs() / a.max(b);
    assert!(spread <= 0.2, "probe spread {spread} ({a} vs {b})");
}

#[test]
fn lipschitz_probe_scales_with_rescale_factor() {
    let raw = EllipticOperator::new(EllipticProblem::new(61).unwrap()).unwrap();
    let probe_raw = lipschitz_probe(&raw, 20, 11, 40).unwrap();
    let scaled = rescale(raw, 1.0).unwrap();
    let factor = scaled.factor();
    let probe_scaled = lipschitz_probe(&scaled, 20, 11, 40).unwrap();
    // Same seeds, linear scaling: the two probes differ exactly by the factor.
    let rel = (probe_scaled - factor * probe_raw).abs() / (factor * probe_raw);
    assert!(rel <= 1e-9, "scaled {probe_scaled} vs s*raw {}", factor * probe_raw);
}

#[test]
fn rescaled_elliptic_satisfies_scaling_condition() {
    let op = elliptic_forward(EllipticProblem::new(101).unwrap()).unwrap();
    let bound = op.scale_alpha0().sqrt() * (1.0 + 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let center = op.domain_center().clone();
    for i in 0..20 {
        let c = random_ball_point(&mut rng, &center, op.domain_radius()).unwrap();
        let norm = power_iteration_norm(
            |h| op.derivative_apply(&c, h),
            |w| op.adjoint_apply(&c, w),
            op.x_dim(),
            op.x_weight(),
            60,
            500 + i,
        )
        .unwrap();
        assert!(norm <= bound, "point {i}: ||F'|| = {norm} > {bound}");
    }
}

#[test]
fn dense_jacobian_consistent_with_derivative_action() {
    let op = diagonal_forward(DiagonalProblem::standard(12).unwrap());
    let x = op.domain_center().clone();
    let jac = dense_jacobian(&op, &x).unwrap();

    // Diagonal problem: J = diag(sigma_i (1 + gamma x_i)).
    for i in 0..12 {
        for j in 0..12 {
            let expected = if i == j {
                op.problem().sigma()[i] * (1.0 + op.problem().gamma() * x.values()[i])
            } else {
                0.0
            };
            assert!((jac[(i, j)] - expected).abs() <= 1e-14);
        }
    }

    // Any problem: dense column action equals derivative_apply to round-off.
    let ell = elliptic_forward(EllipticProblem::new(31).unwrap()).unwrap();
    let c = ell.domain_center().clone();
    let jac = dense_jacobian(&ell, &c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let h = random_ball_point(&mut rng, &ell.zero_x(), 1.0).unwrap();
    let jh = {
        let hv = nalgebra::DVector::from_column_slice(h.values());
        let prod = &jac * hv;
        GridFunction::new(prod.iter().cloned().collect(), ell.y_weight()).unwrap()
    };
    let direct = ell.derivative_apply(&c, &h).unwrap();
    assert!(jh.distance(&direct).unwrap() <= 1e-12 * direct.norm().max(1e-30));
}

#[test]
fn dense_jacobian_of_linear_problem_is_the_matrix() {
    let op = diagonal_forward(DiagonalProblem::new(6, 1.0, 0.0).unwrap());
    let x = GridFunction::zeros(6, 1.0).unwrap();
    let jac = dense_jacobian(&op, &x).unwrap();
    for i in 0..6 {
        assert!((jac[(i, i)] - op.problem().sigma()[i]).abs() <= 1e-15);
    }
}
