//! The forward-operator contract and its calculus checks.
//!
//! A [`ForwardOperator`] bundles the nonlinear map `F`, its derivative action
//! `h -> F'(x) h`, the adjoint action `w -> F'(x)* w`, and the constants the
//! regularization theory runs on: the admissible ball radius `rho` around the
//! known center, a Lipschitz constant estimate `L` for `x -> F'(x)`, and the
//! scaling level `alpha0` with `||F'(x)|| <= sqrt(alpha0)` on the ball.
//!
//! Everything is matrix-free: the solver only ever multiplies by `F'` and
//! `F'*`. The probes in this module ([`adjoint_check`],
//! [`taylor_remainder_check`], [`lipschitz_probe`], [`rescale`]) verify on a
//! concrete problem that those pieces fit together before any inversion is
//! attempted.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hilbert::{krylov_top_singular, random_direction, GridFunction, EPS_GUARD};

/// Max-updating, thread-safe holder for the Lipschitz constant estimate.
///
/// Probes may sharpen the estimate after construction while the operator
/// itself stays shareable across threads.
#[derive(Debug)]
pub struct LipschitzCell(AtomicU64);

impl LipschitzCell {
    pub fn new(value: f64) -> Self {
        Self(AtomicU64::new(value.max(0.0).to_bits()))
    }

    pub fn get(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::Relaxed))
    }

    /// Stores `value` only if it exceeds the current estimate.
    pub fn record_max(&self, value: f64) {
        if !value.is_finite() {
            return;
        }
        let mut current = self.0.load(Ordering::Relaxed);
        while value > f64::from_bits(current) {
            match self.0.compare_exchange_weak(
                current,
                value.to_bits(),
                Ordering::Relaxed,
                Ordering::Relaxed,
            ) {
                Ok(_) => break,
                Err(seen) => current = seen,
            }
        }
    }
}

/// Contract for a (possibly nonlinear) forward map between two weighted grids.
///
/// Implementations must be immutable after construction and callable from
/// multiple threads. The derivative and adjoint are actions, never matrices.
pub trait ForwardOperator: Sync + Send {
    fn x_dim(&self) -> usize;
    fn y_dim(&self) -> usize;
    fn x_weight(&self) -> f64;
    fn y_weight(&self) -> f64;

    /// Evaluates `F(x)`.
    fn eval(&self, x: &GridFunction) -> Result<GridFunction>;
    /// Applies the derivative: `F'(x) h`.
    fn derivative_apply(&self, x: &GridFunction, h: &GridFunction) -> Result<GridFunction>;
    /// Applies the adjoint of the derivative: `F'(x)* w`.
    fn adjoint_apply(&self, x: &GridFunction, w: &GridFunction) -> Result<GridFunction>;

    /// Center of the admissible ball; for shipped test problems this is the
    /// known exact solution.
    fn domain_center(&self) -> &GridFunction;
    /// Radius `rho` of the admissible ball.
    fn domain_radius(&self) -> f64;

    /// Current Lipschitz constant estimate for `x -> F'(x)`.
    fn lipschitz_estimate(&self) -> f64;
    /// Raises the stored Lipschitz estimate (never lowers it).
    fn record_lipschitz_estimate(&self, estimate: f64);

    /// Scaling level: `||F'(x)|| <= sqrt(scale_alpha0)` on the ball.
    fn scale_alpha0(&self) -> f64;

    /// Stable identifier used to tag traces and reports.
    fn problem_id(&self) -> String;

    /// Zero vector in the input space.
    fn zero_x(&self) -> GridFunction {
        GridFunction::zeros(self.x_dim(), self.x_weight()).expect("valid x grid")
    }

    /// Zero vector in the data space.
    fn zero_y(&self) -> GridFunction {
        GridFunction::zeros(self.y_dim(), self.y_weight()).expect("valid y grid")
    }

    /// Errors unless `x` lies in the closed admissible ball.
    fn check_in_domain(&self, x: &GridFunction) -> Result<()> {
        let distance = x.distance(self.domain_center())?;
        let radius = self.domain_radius();
        if distance > radius {
            return Err(Error::DomainViolation { distance, radius });
        }
        Ok(())
    }

    /// `F'(x)* F'(x) h`, the input-space normal operator.
    fn normal_x_apply(&self, x: &GridFunction, h: &GridFunction) -> Result<GridFunction> {
        self.adjoint_apply(x, &self.derivative_apply(x, h)?)
    }

    /// `F'(x) F'(x)* w`, the data-space normal operator.
    fn normal_y_apply(&self, x: &GridFunction, w: &GridFunction) -> Result<GridFunction> {
        self.derivative_apply(x, &self.adjoint_apply(x, w)?)
    }
}

/// Seeded point uniform-in-radius inside the ball of the given center.
pub fn random_ball_point<R: Rng>(
    rng: &mut R,
    center: &GridFunction,
    radius: f64,
) -> Result<GridFunction> {
    let dir = random_direction(rng, center.len(), center.weight())?;
    let r: f64 = rng.gen::<f64>() * radius;
    let mut point = center.clone();
    point.axpy(r, &dir)?;
    Ok(point)
}

/// Largest relative adjoint discrepancy over `trials` random pairs:
/// `|<F'(x)h, w> - <h, F'(x)*w>| / (||F'(x)h|| ||w|| + eps)`.
pub fn adjoint_check(
    problem: &dyn ForwardOperator,
    x: &GridFunction,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let h = random_direction(&mut rng, problem.x_dim(), problem.x_weight())?;
        let w = random_direction(&mut rng, problem.y_dim(), problem.y_weight())?;
        let fh = problem.derivative_apply(x, &h)?;
        let fw = problem.adjoint_apply(x, &w)?;
        let lhs = fh.inner(&w)?;
        let rhs = h.inner(&fw)?;
        let disc = (lhs - rhs).abs() / (fh.norm() * w.norm() + EPS_GUARD);
        worst = worst.max(disc);
    }
    Ok(worst)
}

/// Outcome of [`taylor_remainder_check`].
#[derive(Debug, Clone, Copy)]
pub struct TaylorRemainder {
    /// `||F(x+h) - F(x) - F'(x) h||`.
    pub remainder: f64,
    /// `(L/2) ||h||^2` with the operator's current Lipschitz estimate.
    pub bound: f64,
}

/// Measures the linearization remainder at `(x, h)` against the quadratic
/// bound `(L/2)||h||^2`. Both `x` and `x + h` must lie in the ball.
pub fn taylor_remainder_check(
    problem: &dyn ForwardOperator,
    x: &GridFunction,
    h: &GridFunction,
) -> Result<TaylorRemainder> {
    problem.check_in_domain(x)?;
    let xh = x.add(h)?;
    problem.check_in_domain(&xh)?;
    let mut rem = problem.eval(&xh)?;
    rem.axpy(-1.0, &problem.eval(x)?)?;
    rem.axpy(-1.0, &problem.derivative_apply(x, h)?)?;
    let hn = h.norm();
    Ok(TaylorRemainder {
        remainder: rem.norm(),
        bound: 0.5 * problem.lipschitz_estimate() * hn * hn,
    })
}

/// Probes the Lipschitz constant of `x -> F'(x)` from below.
///
/// For each sample a base point and a pair direction are drawn, the operator
/// norm of `F'(x) - F'(z)` is estimated by the Krylov power iteration, and
/// the pair direction is re-aligned twice with the returned top singular
/// vector so the probe climbs toward the worst direction. Pair distances
/// sweep three geometric scales. The maximum ratio is recorded into the
/// operator's Lipschitz estimate and returned; it is a lower bound of the
/// true constant.
pub fn lipschitz_probe(
    problem: &dyn ForwardOperator,
    samples: usize,
    seed: u64,
    power_iters: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = problem.domain_center().clone();
    let radius = problem.domain_radius();
    let scales = [0.5, 0.05, 0.005];
    let mut best = 0.0f64;

    for s in 0..samples {
        let x = random_ball_point(&mut rng, &center, 0.5 * radius)?;
        let t = radius * scales[s % scales.len()];
        let mut dir = random_direction(&mut rng, problem.x_dim(), problem.x_weight())?;
        for refine in 0..3 {
            let mut z = x.clone();
            z.axpy(t, &dir)?;
            let fwd = |h: &GridFunction| -> Result<GridFunction> {
                let mut d = problem.derivative_apply(&x, h)?;
                d.axpy(-1.0, &problem.derivative_apply(&z, h)?)?;
                Ok(d)
            };
            let adj = |w: &GridFunction| -> Result<GridFunction> {
                let mut d = problem.adjoint_apply(&x, w)?;
                d.axpy(-1.0, &problem.adjoint_apply(&z, w)?)?;
                Ok(d)
            };
            let (sigma, top) = krylov_top_singular(
                fwd,
                adj,
                problem.x_dim(),
                problem.x_weight(),
                power_iters,
                seed.wrapping_add(1 + 7 * s as u64 + refine as u64),
            )?;
            best = best.max(sigma / t);
            if top.norm() == 0.0 {
                break;
            }
            dir = top;
        }
    }
    problem.record_lipschitz_estimate(best);
    Ok(best)
}

/// A forward operator multiplied by a constant factor so the scaling
/// condition `||F'(x)|| <= sqrt(alpha0)` holds on the ball. Data measured
/// for the original operator must be multiplied by [`Rescaled::factor`].
#[derive(Debug)]
pub struct Rescaled<P> {
    inner: P,
    factor: f64,
    alpha0: f64,
    lipschitz: LipschitzCell,
}

impl<P: ForwardOperator> Rescaled<P> {
    /// Multiplier applied to `F`, `F'` and `F'*` (and required for data).
    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

/// Wraps `problem` so that `||F'(x)|| <= sqrt(target_alpha0)` on the ball.
///
/// The supremum of `||F'(x)||` is estimated with the Krylov norm estimate at
/// the ball center, at extreme points along smooth bump directions, and at a
/// handful of random ball points. A numerically zero operator is refused.
pub fn rescale<P: ForwardOperator>(problem: P, target_alpha0: f64) -> Result<Rescaled<P>> {
    if !(target_alpha0 > 0.0) || !target_alpha0.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "target alpha0 must be positive and finite, got {target_alpha0}"
        )));
    }
    let center = problem.domain_center().clone();
    let radius = problem.domain_radius();
    let n = problem.x_dim();
    let weight = problem.x_weight();

    let mut probes: Vec<GridFunction> = vec![center.clone()];
    // Extreme directions: constant and half-sine bumps, both signs.
    let constant = GridFunction::constant(n, 1.0, weight)?;
    let bump = GridFunction::from_fn(n, weight, |i| {
        (std::f64::consts::PI * (i as f64 + 1.0) / (n as f64 + 1.0)).sin()
    })?;
    for dir in [&constant, &bump] {
        let dn = dir.norm();
        if dn > 0.0 {
            for sign in [1.0, -1.0] {
                let mut p = center.clone();
                p.axpy(sign * radius / dn, dir)?;
                probes.push(p);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1e);
    for _ in 0..12 {
        probes.push(random_ball_point(&mut rng, &center, radius)?);
    }

    let mut sup = 0.0f64;
    for (i, x) in probes.iter().enumerate() {
        let norm = crate::hilbert::power_iteration_norm(
            |h| problem.derivative_apply(x, h),
            |w| problem.adjoint_apply(x, w),
            n,
            weight,
            60,
            1000 + i as u64,
        )?;
        sup = sup.max(norm);
    }
    if sup <= 0.0 {
        return Err(Error::DegenerateOperator);
    }
    // Tiny shrink keeps the sampled post-condition comfortably inside its
    // 1e-6 tolerance.
    let factor = target_alpha0.sqrt() / sup * (1.0 - 1e-9);
    let lipschitz = LipschitzCell::new(factor * problem.lipschitz_estimate());
    Ok(Rescaled { inner: problem, factor, alpha0: target_alpha0, lipschitz })
}

impl<P: ForwardOperator> ForwardOperator for Rescaled<P> {
    fn x_dim(&self) -> usize {
        self.inner.x_dim()
    }
    fn y_dim(&self) -> usize {
        self.inner.y_dim()
    }
    fn x_weight(&self) -> f64 {
        self.inner.x_weight()
    }
    fn y_weight(&self) -> f64 {
        self.inner.y_weight()
    }

    fn eval(&self, x: &GridFunction) -> Result<GridFunction> {
        Ok(self.inner.eval(x)?.scale(self.factor))
    }

    fn derivative_apply(&self, x: &GridFunction, h: &GridFunction) -> Result<GridFunction> {
        Ok(self.inner.derivative_apply(x, h)?.scale(self.factor))
    }

    fn adjoint_apply(&self, x: &GridFunction, w: &GridFunction) -> Result<GridFunction> {
        Ok(self.inner.adjoint_apply(x, w)?.scale(self.factor))
    }

    fn domain_center(&self) -> &GridFunction {
        self.inner.domain_center()
    }
    fn domain_radius(&self) -> f64 {
        self.inner.domain_radius()
    }

    fn lipschitz_estimate(&self) -> f64 {
        self.lipschitz.get()
    }
    fn record_lipschitz_estimate(&self, estimate: f64) {
        self.lipschitz.record_max(estimate);
    }

    fn scale_alpha0(&self) -> f64 {
        self.alpha0
    }

    fn problem_id(&self) -> String {
        format!("{}*scaled", self.inner.problem_id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Linear map `y = M x` with `M = diag(d)`, fixed constants; enough to
    /// exercise the probes without the full problems module.
    struct DiagLinear {
        d: Vec<f64>,
        center: GridFunction,
        radius: f64,
        lipschitz: LipschitzCell,
    }

    impl DiagLinear {
        fn new(d: Vec<f64>) -> Self {
            let n = d.len();
            Self {
                d,
                center: GridFunction::zeros(n, 1.0).unwrap(),
                radius: 1.0,
                lipschitz: LipschitzCell::new(0.0),
            }
        }
        fn apply(&self, v: &GridFunction) -> GridFunction {
            let mut out = v.clone();
            for (o, di) in out.values_mut().iter_mut().zip(&self.d) {
                *o *= di;
            }
            out
        }
    }

    impl ForwardOperator for DiagLinear {
        fn x_dim(&self) -> usize {
            self.d.len()
        }
        fn y_dim(&self) -> usize {
            self.d.len()
        }
        fn x_weight(&self) -> f64 {
            1.0
        }
        fn y_weight(&self) -> f64 {
            1.0
        }
        fn eval(&self, x: &GridFunction) -> Result<GridFunction> {
            Ok(self.apply(x))
        }
        fn derivative_apply(&self, _x: &GridFunction, h: &GridFunction) -> Result<GridFunction> {
            Ok(self.apply(h))
        }
        fn adjoint_apply(&self, _x: &GridFunction, w: &GridFunction) -> Result<GridFunction> {
            Ok(self.apply(w))
        }
        fn domain_center(&self) -> &GridFunction {
            &self.center
        }
        fn domain_radius(&self) -> f64 {
            self.radius
        }
        fn lipschitz_estimate(&self) -> f64 {
            self.lipschitz.get()
        }
        fn record_lipschitz_estimate(&self, estimate: f64) {
            self.lipschitz.record_max(estimate);
        }
        fn scale_alpha0(&self) -> f64 {
            let m = self.d.iter().cloned().fold(0.0, f64::max);
            m * m
        }
        fn problem_id(&self) -> String {
            format!("diag-linear(n={})", self.d.len())
        }
    }

    #[test]
    fn adjoint_check_diagonal_is_exact() {
        let p = DiagLinear::new(vec![1.0, 2.0, 3.0]);
        let x = p.zero_x();
        let disc = adjoint_check(&p, &x, 10, 1).unwrap();
        assert!(disc <= 1e-14, "disc = {disc}");
    }

    #[test]
    fn adjoint_check_flags_broken_adjoint() {
        struct Broken(DiagLinear);
        impl ForwardOperator for Broken {
            fn x_dim(&self) -> usize {
                self.0.x_dim()
            }
            fn y_dim(&self) -> usize {
                self.0.y_dim()
            }
            fn x_weight(&self) -> f64 {
                1.0
            }
            fn y_weight(&self) -> f64 {
                1.0
            }
            fn eval(&self, x: &GridFunction) -> Result<GridFunction> {
                self.0.eval(x)
            }
            fn derivative_apply(&self, x: &GridFunction, h: &GridFunction) -> Result<GridFunction> {
                self.0.derivative_apply(x, h)
            }
            fn adjoint_apply(&self, x: &GridFunction, w: &GridFunction) -> Result<GridFunction> {
                // Sign flip: the classic copy-paste bug this probe exists for.
                Ok(self.0.adjoint_apply(x, w)?.scale(-1.0))
            }
            fn domain_center(&self) -> &GridFunction {
                self.0.domain_center()
            }
            fn domain_radius(&self) -> f64 {
                self.0.domain_radius()
            }
            fn lipschitz_estimate(&self) -> f64 {
                0.0
            }
            fn record_lipschitz_estimate(&self, _estimate: f64) {}
            fn scale_alpha0(&self) -> f64 {
                self.0.scale_alpha0()
            }
            fn problem_id(&self) -> String {
                "broken".into()
            }
        }
        let p = Broken(DiagLinear::new(vec![1.0, 2.0]));
        let x = p.zero_x();
        let disc = adjoint_check(&p, &x, 10, 2).unwrap();
        assert!(disc >= 0.1, "disc = {disc}");
    }

    #[test]
    fn taylor_remainder_zero_for_linear() {
        let p = DiagLinear::new(vec![2.0, 1.0]);
        p.record_lipschitz_estimate(0.0);
        let x = p.zero_x();
        let h = GridFunction::new(vec![0.1, -0.2], 1.0).unwrap();
        let out = taylor_remainder_check(&p, &x, &h).unwrap();
        assert!(out.remainder <= 1e-14);
        assert_eq!(out.bound, 0.0);
    }

    #[test]
    fn taylor_remainder_rejects_out_of_ball() {
        let p = DiagLinear::new(vec![1.0, 1.0]);
        let x = p.zero_x();
        let h = GridFunction::constant(2, 5.0, 1.0).unwrap();
        assert!(matches!(
            taylor_remainder_check(&p, &x, &h),
            Err(Error::DomainViolation { .. })
        ));
    }

    #[test]
    fn lipschitz_probe_zero_for_linear() {
        let p = DiagLinear::new(vec![1.0, 2.0, 3.0]);
        let l = lipschitz_probe(&p, 10, 3, 20).unwrap();
        assert!(l <= 1e-12, "l = {l}");
    }

    #[test]
    fn rescale_halves_a_norm_two_operator() {
        let p = DiagLinear::new(vec![2.0, 2.0, 2.0]);
        let scaled = rescale(p, 1.0).unwrap();
        assert_relative_eq!(scaled.factor(), 0.5, epsilon = 1e-6);
        assert_relative_eq!(scaled.scale_alpha0(), 1.0);
    }

    #[test]
    fn rescale_identity_when_already_scaled() {
        let p = DiagLinear::new(vec![1.0, 0.5]);
        let scaled = rescale(p, 1.0).unwrap();
        assert_relative_eq!(scaled.factor(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn rescale_refuses_zero_operator() {
        let p = DiagLinear::new(vec![0.0, 0.0]);
        assert!(matches!(rescale(p, 1.0), Err(Error::DegenerateOperator)));
    }

    #[test]
    fn lipschitz_cell_keeps_max() {
        let cell = LipschitzCell::new(1.0);
        cell.record_max(0.5);
        assert_eq!(cell.get(), 1.0);
        cell.record_max(2.5);
        assert_eq!(cell.get(), 2.5);
        cell.record_max(f64::NAN);
        assert_eq!(cell.get(), 2.5);
    }
}
