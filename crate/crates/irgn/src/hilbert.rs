//! Discretized Hilbert-space vectors and matrix-free linear algebra.
//!
//! A [`GridFunction`] is a plain value array together with one quadrature
//! weight, so that discretizations of L²(0,1) (weight = mesh size h) and
//! Euclidean model problems (weight = 1) share the same inner product:
//!
//! ```text
//! (u, v) = weight * Σ_i u_i v_i
//! ```
//!
//! On top of that the module provides the two matrix-free workhorses of the
//! regularized Gauss-Newton iteration: a conjugate gradient solver for
//! shifted positive semi-definite systems `(alpha I + A) z = rhs`, and a
//! seeded Krylov estimate of the largest singular value of an operator given
//! only through forward/adjoint actions.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::ForwardOperator;

/// Hard cap on dimensions for dense assembly (Jacobians, SVD fixtures).
pub const MAX_DENSE_DIM: usize = 2000;

/// Guard added to denominators of relative discrepancies.
pub(crate) const EPS_GUARD: f64 = 1e-300;

/// A vector of grid values with a quadrature-weighted inner product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    values: Vec<f64>,
    weight: f64,
}

impl GridFunction {
    /// Validating constructor: length >= 1, weight > 0, all values finite.
    pub fn new(values: Vec<f64>, weight: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("GridFunction needs length >= 1".into()));
        }
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "GridFunction weight must be positive and finite, got {weight}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GridFunction values"));
        }
        Ok(Self { values, weight })
    }

    /// Zero vector of length `n` with the given weight.
    pub fn zeros(n: usize, weight: f64) -> Result<Self> {
        Self::new(vec![0.0; n], weight)
    }

    /// Zero vector on the same grid as `self`.
    pub fn zeros_like(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], weight: self.weight }
    }

    /// Canonical basis vector e_j.
    pub fn basis(n: usize, j: usize, weight: f64) -> Result<Self> {
        if j >= n {
            return Err(Error::InvalidConfig(format!("basis index {j} out of range for n={n}")));
        }
        let mut values = vec![0.0; n];
        values[j] = 1.0;
        Self::new(values, weight)
    }

    /// Constant vector.
    pub fn constant(n: usize, value: f64, weight: f64) -> Result<Self> {
        Self::new(vec![value; n], weight)
    }

    /// Builds a grid function from a value-per-index closure.
    pub fn from_fn(n: usize, weight: f64, f: impl Fn(usize) -> f64) -> Result<Self> {
        Self::new((0..n).map(f).collect(), weight)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Mutable access for in-place construction; callers keep values finite.
    #[cfg(test)]
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub(crate) fn same_grid(&self, other: &Self) -> Result<()> {
        if self.values.len() != other.values.len() || self.weight != other.weight {
            return Err(Error::ShapeMismatch(format!(
                "(n={}, weight={}) vs (n={}, weight={})",
                self.values.len(),
                self.weight,
                other.values.len(),
                other.weight
            )));
        }
        Ok(())
    }

    /// Weighted inner product `weight * Σ u_i v_i`.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.same_grid(other)?;
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        Ok(self.weight * dot)
    }

    /// Norm induced by [`GridFunction::inner`].
    pub fn norm(&self) -> f64 {
        let dot: f64 = self.values.iter().map(|a| a * a).sum();
        (self.weight * dot).sqrt()
    }

    /// `||self - other||`.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        self.same_grid(other)?;
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok((self.weight * dot).sqrt())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_grid(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Self { values, weight: self.weight })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_grid(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Self { values, weight: self.weight })
    }

    pub fn scale(&self, a: f64) -> Self {
        Self { values: self.values.iter().map(|v| a * v).collect(), weight: self.weight }
    }

    /// In-place `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Self) -> Result<()> {
        self.same_grid(other)?;
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
        Ok(())
    }

    /// Componentwise product, used by the elliptic operator.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.same_grid(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect();
        Ok(Self { values, weight: self.weight })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Settings for the conjugate gradient solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgSettings {
    /// Relative residual target, in (0, 1). Default 1e-12.
    pub rel_tolerance: f64,
    /// Iteration cap. The conventional choice is 10·n.
    pub max_iterations: usize,
}

impl CgSettings {
    pub fn new(rel_tolerance: f64, max_iterations: usize) -> Result<Self> {
        if !(rel_tolerance > 0.0 && rel_tolerance < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "CG tolerance must lie in (0,1), got {rel_tolerance}"
            )));
        }
        if max_iterations == 0 {
            return Err(Error::InvalidConfig("CG needs max_iterations >= 1".into()));
        }
        Ok(Self { rel_tolerance, max_iterations })
    }

    /// Defaults for an `n`-dimensional problem: tolerance 1e-12, cap 10·n.
    pub fn for_dim(n: usize) -> Self {
        Self { rel_tolerance: 1e-12, max_iterations: 10 * n.max(1) }
    }
}

/// Result of a conjugate gradient solve.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub solution: GridFunction,
    pub iterations: usize,
    /// Explicitly recomputed relative residual at exit.
    pub relative_residual: f64,
}

/// Solves `(alpha I + op) z = rhs` by conjugate gradients, matrix-free.
///
/// `op` must be self-adjoint and positive semi-definite with respect to
/// [`GridFunction::inner`]; `alpha >= 0` and the shifted operator positive
/// definite. The shift is applied here so the same handle serves every
/// regularization parameter. Convergence is certified against the explicitly
/// recomputed residual, not just the CG recurrence.
pub fn cg_solve<F>(op: F, alpha: f64, rhs: &GridFunction, settings: &CgSettings) -> Result<CgSolution>
where
    F: Fn(&GridFunction) -> Result<GridFunction>,
{
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::InvalidConfig(format!("CG shift must be finite and >= 0, got {alpha}")));
    }
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return Ok(CgSolution { solution: rhs.zeros_like(), iterations: 0, relative_residual: 0.0 });
    }

    let apply = |v: &GridFunction| -> Result<GridFunction> {
        let mut av = op(v)?;
        if !av.is_finite() {
            return Err(Error::NonFinite("operator output inside CG"));
        }
        av.axpy(alpha, v)?;
        Ok(av)
    };

    let target = settings.rel_tolerance * rhs_norm;
    let mut x = rhs.zeros_like();
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.inner(&r)?;
    let mut iterations = 0usize;

    while iterations < settings.max_iterations {
        if rr.sqrt() <= target {
            // The recurrence can drift; certify with the true residual.
            let mut true_r = rhs.clone();
            true_r.axpy(-1.0, &apply(&x)?)?;
            let tn = true_r.norm();
            if tn <= target {
                return Ok(CgSolution {
                    solution: x,
                    iterations,
                    relative_residual: tn / rhs_norm,
                });
            }
            r = true_r;
            p = r.clone();
            rr = r.inner(&r)?;
        }
        let ap = apply(&p)?;
        let pap = p.inner(&ap)?;
        if pap <= 0.0 {
            return Err(Error::CgBreakdown { iterations });
        }
        let step = rr / pap;
        x.axpy(step, &p)?;
        r.axpy(-step, &ap)?;
        let rr_new = r.inner(&r)?;
        let beta = rr_new / rr;
        let mut p_new = r.clone();
        p_new.axpy(beta, &p)?;
        p = p_new;
        rr = rr_new;
        iterations += 1;
    }

    let mut true_r = rhs.clone();
    true_r.axpy(-1.0, &apply(&x)?)?;
    let tn = true_r.norm();
    if tn <= target {
        return Ok(CgSolution { solution: x, iterations, relative_residual: tn / rhs_norm });
    }
    Err(Error::CgDidNotConverge { iterations, residual: tn / rhs_norm })
}

/// Estimates the largest singular value of the operator described by the
/// forward/adjoint pair, starting from a seeded random unit vector.
///
/// The power iterates on `adjoint ∘ forward` are kept (re)orthogonalized and
/// the estimate is extracted from the Rayleigh-Ritz projection onto their
/// span, so the estimate is monotonically nondecreasing in `iterations` and
/// reaches the top singular value far faster than the raw power sequence.
/// A numerically zero operator yields 0.
pub fn power_iteration_norm<F, A>(
    forward: F,
    adjoint: A,
    dim_in: usize,
    x_weight: f64,
    iterations: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&GridFunction) -> Result<GridFunction>,
    A: Fn(&GridFunction) -> Result<GridFunction>,
{
    krylov_top_singular(forward, adjoint, dim_in, x_weight, iterations, seed).map(|(s, _)| s)
}

/// As [`power_iteration_norm`] but also returns the corresponding input-space
/// singular vector (unit norm). Used by the Lipschitz probe to re-align pair
/// directions.
pub(crate) fn krylov_top_singular<F, A>(
    forward: F,
    adjoint: A,
    dim_in: usize,
    x_weight: f64,
    iterations: usize,
    seed: u64,
) -> Result<(f64, GridFunction)>
where
    F: Fn(&GridFunction) -> Result<GridFunction>,
    A: Fn(&GridFunction) -> Result<GridFunction>,
{
    if iterations == 0 || dim_in == 0 {
        return Err(Error::InvalidConfig("power iteration needs iterations >= 1, dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = random_direction(&mut rng, dim_in, x_weight)?;

    let steps = iterations.min(dim_in);
    let mut basis: Vec<GridFunction> = vec![start];
    let mut diag: Vec<f64> = Vec::with_capacity(steps);
    let mut off: Vec<f64> = Vec::with_capacity(steps);
    let mut scale = 0.0f64;

    for j in 0..steps {
        let v = basis[j].clone();
        let mut w = adjoint(&forward(&v)?)?;
        if !w.is_finite() {
            return Err(Error::NonFinite("operator output inside power iteration"));
        }
        let a = w.inner(&v)?;
        diag.push(a);
        scale = scale.max(a.abs());
        if j + 1 >= steps {
            break;
        }
        // Full reorthogonalization, two passes, keeps Ritz values clean.
        for _ in 0..2 {
            for b in &basis {
                let c = w.inner(b)?;
                w.axpy(-c, b)?;
            }
        }
        let beta = w.norm();
        scale = scale.max(beta);
        if beta <= 1e-14 * scale {
            break; // invariant subspace found (e.g. zero operator)
        }
        off.push(beta);
        w = w.scale(1.0 / beta);
        basis.push(w);
    }

    let k = diag.len();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = diag[i];
        if i + 1 < k && i < off.len() {
            t[(i, i + 1)] = off[i];
            t[(i + 1, i)] = off[i];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(t);
    let mut best = 0usize;
    for i in 0..k {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let lambda = eig.eigenvalues[best].max(0.0);

    let mut top = basis[0].zeros_like();
    for (i, b) in basis.iter().enumerate().take(k) {
        top.axpy(eig.eigenvectors[(i, best)], b)?;
    }
    let tn = top.norm();
    if tn > 0.0 {
        top = top.scale(1.0 / tn);
    }
    Ok((lambda.sqrt(), top))
}

/// Assembles the Jacobian of `problem` at `x` column by column from the
/// derivative action. Intended for small fixture work (SVD-based source
/// construction); refuses dimensions above [`MAX_DENSE_DIM`].
pub fn dense_jacobian(problem: &dyn ForwardOperator, x: &GridFunction) -> Result<DMatrix<f64>> {
    let (xn, yn) = (problem.x_dim(), problem.y_dim());
    if xn > MAX_DENSE_DIM || yn > MAX_DENSE_DIM {
        return Err(Error::DenseDimension { dim: xn.max(yn), cap: MAX_DENSE_DIM });
    }
    let mut jac = DMatrix::<f64>::zeros(yn, xn);
    for j in 0..xn {
        let e = GridFunction::basis(xn, j, problem.x_weight())?;
        let col = problem.derivative_apply(x, &e)?;
        for (i, v) in col.values().iter().enumerate() {
            jac[(i, j)] = *v;
        }
    }
    Ok(jac)
}

/// One draw from the standard normal distribution (Box-Muller).
pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > 0.0 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Seeded Gaussian vector on the given grid.
pub(crate) fn gaussian_vector<R: Rng>(rng: &mut R, n: usize, weight: f64) -> Result<GridFunction> {
    GridFunction::new((0..n).map(|_| standard_normal(rng)).collect(), weight)
}

/// Seeded random unit vector (norm 1 in the weighted inner product).
pub(crate) fn random_direction<R: Rng>(rng: &mut R, n: usize, weight: f64) -> Result<GridFunction> {
    loop {
        let g = gaussian_vector(rng, n, weight)?;
        let norm = g.norm();
        if norm > 0.0 {
            return Ok(g.scale(1.0 / norm));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn gf(values: &[f64], weight: f64) -> GridFunction {
        GridFunction::new(values.to_vec(), weight).unwrap()
    }

    #[test]
    fn inner_orthogonal_pair_is_zero() {
        let u = gf(&[1.0, 0.0], 1.0);
        let v = gf(&[0.0, 1.0], 1.0);
        assert_eq!(u.inner(&v).unwrap(), 0.0);
    }

    #[test]
    fn inner_respects_weight() {
        let u = gf(&[1.0, 1.0], 0.5);
        assert_relative_eq!(u.inner(&u).unwrap(), 1.0);
    }

    #[test]
    fn inner_pythagorean() {
        let u = gf(&[3.0, 4.0], 1.0);
        assert_relative_eq!(u.inner(&u).unwrap(), 25.0);
        assert_relative_eq!(u.norm(), 5.0);
    }

    #[test]
    fn norm_zero_vector() {
        let u = gf(&[0.0, 0.0, 0.0], 0.3);
        assert_eq!(u.norm(), 0.0);
    }

    #[test]
    fn norm_weighted_unit() {
        let u = gf(&[1.0, 1.0, 1.0, 1.0], 0.25);
        assert_relative_eq!(u.norm(), 1.0);
    }

    #[test]
    fn norm_six_eight() {
        let u = gf(&[6.0, 8.0], 1.0);
        assert_relative_eq!(u.norm(), 10.0);
    }

    #[test]
    fn mismatched_grids_error() {
        let u = gf(&[1.0, 2.0], 1.0);
        let v = gf(&[1.0, 2.0], 0.5);
        assert!(matches!(u.inner(&v), Err(Error::ShapeMismatch(_))));
        let w = gf(&[1.0], 1.0);
        assert!(matches!(u.add(&w), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn rejects_non_finite_values() {
        assert!(matches!(
            GridFunction::new(vec![1.0, f64::NAN], 1.0),
            Err(Error::NonFinite(_))
        ));
        assert!(GridFunction::new(vec![1.0], -1.0).is_err());
        assert!(GridFunction::new(vec![], 1.0).is_err());
    }

    #[test]
    fn cg_identity_operator() {
        let rhs = gf(&[2.0, 2.0], 1.0);
        let sol = cg_solve(|v| Ok(v.clone()), 1.0, &rhs, &CgSettings::for_dim(2)).unwrap();
        assert_relative_eq!(sol.solution.values()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sol.solution.values()[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cg_zero_operator_pure_shift() {
        let rhs = gf(&[1.0, 3.0], 1.0);
        let sol = cg_solve(|v| Ok(v.zeros_like()), 0.5, &rhs, &CgSettings::for_dim(2)).unwrap();
        assert_relative_eq!(sol.solution.values()[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(sol.solution.values()[1], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn cg_diagonal_two_by_two() {
        // (I + diag(1,4)) z = (4,10)  =>  z = (2,2)
        let rhs = gf(&[4.0, 10.0], 1.0);
        let op = |v: &GridFunction| {
            let mut out = v.clone();
            out.values_mut()[1] *= 4.0;
            Ok(out)
        };
        let sol = cg_solve(op, 1.0, &rhs, &CgSettings::for_dim(2)).unwrap();
        assert_relative_eq!(sol.solution.values()[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(sol.solution.values()[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn cg_zero_rhs_returns_zero() {
        let rhs = gf(&[0.0, 0.0], 1.0);
        let sol = cg_solve(|v| Ok(v.clone()), 1.0, &rhs, &CgSettings::for_dim(2)).unwrap();
        assert_eq!(sol.solution.values(), &[0.0, 0.0]);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn cg_nan_from_operator_is_structural_error() {
        let rhs = gf(&[1.0, 1.0], 1.0);
        let op = |v: &GridFunction| {
            let mut out = v.clone();
            out.values_mut()[0] = f64::NAN;
            Ok(out)
        };
        // Bypass the constructor check by mutating inside the closure.
        let err = cg_solve(op, 1.0, &rhs, &CgSettings::for_dim(2)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn cg_nonconvergent_reports_residual() {
        // Indefinite trap: cap iterations so hard that CG cannot finish.
        let rhs = gf(&[1.0, 2.0, 3.0, 4.0], 1.0);
        let diag = [1.0, 17.0, 300.0, 4900.0];
        let op = move |v: &GridFunction| {
            let mut out = v.clone();
            for (o, d) in out.values_mut().iter_mut().zip(diag) {
                *o *= d;
            }
            Ok(out)
        };
        let settings = CgSettings::new(1e-14, 2).unwrap();
        match cg_solve(op, 1e-3, &rhs, &settings) {
            Err(Error::CgDidNotConverge { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    /// CG residual contract over 100 seeded SPD diagonal systems (n <= 64).
    #[test]
    fn cg_residual_contract_random_diagonal_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.gen_range(1..=64);
            let weight = if rng.gen::<bool>() { 1.0 } else { 1.0 / n as f64 };
            let diag: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.gen_range(-4.0..2.0))).collect();
            let rhs = gaussian_vector(&mut rng, n, weight).unwrap();
            let alpha = 10f64.powf(rng.gen_range(-6.0..1.0));
            let d = diag.clone();
            let op = move |v: &GridFunction| {
                let mut out = v.clone();
                for (o, di) in out.values_mut().iter_mut().zip(&d) {
                    *o *= di;
                }
                Ok(out)
            };
            let settings = CgSettings::for_dim(n);
            let sol = cg_solve(&op, alpha, &rhs, &settings).unwrap();
            // Re-check the contract independently.
            let mut res = rhs.clone();
            let mut az = op(&sol.solution).unwrap();
            az.axpy(alpha, &sol.solution).unwrap();
            res.axpy(-1.0, &az).unwrap();
            assert!(res.norm() <= settings.rel_tolerance * rhs.norm() * (1.0 + 1e-9));
        }
    }

    /// Shift passed to CG equals manual composition with the shifted operator.
    #[test]
    fn cg_shift_matches_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(2..=32);
            let diag: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
            let rhs = gaussian_vector(&mut rng, n, 1.0).unwrap();
            let alpha = rng.gen_range(0.01..2.0);
            let d1 = diag.clone();
            let base = move |v: &GridFunction| {
                let mut out = v.clone();
                for (o, di) in out.values_mut().iter_mut().zip(&d1) {
                    *o *= di;
                }
                Ok(out)
            };
            let d2 = diag.clone();
            let shifted = move |v: &GridFunction| {
                let mut out = v.clone();
                for (o, di) in out.values_mut().iter_mut().zip(&d2) {
                    *o *= di + alpha;
                }
                Ok(out)
            };
            let settings = CgSettings::for_dim(n);
            let a = cg_solve(&base, alpha, &rhs, &settings).unwrap().solution;
            let b = cg_solve(&shifted, 0.0, &rhs, &settings).unwrap().solution;
            let denom = a.norm().max(EPS_GUARD);
            assert!(a.distance(&b).unwrap() / denom <= 1e-10);
        }
    }

    fn diag_ops(diag: Vec<f64>) -> impl Fn(&GridFunction) -> Result<GridFunction> + Clone {
        move |v: &GridFunction| {
            let mut out = v.clone();
            for (o, d) in out.values_mut().iter_mut().zip(&diag) {
                *o *= d;
            }
            Ok(out)
        }
    }

    #[test]
    fn power_iteration_known_spectrum() {
        let op = diag_ops(vec![1.0, 2.0, 3.0]);
        let s = power_iteration_norm(op.clone(), op, 3, 1.0, 50, 1).unwrap();
        assert_relative_eq!(s, 3.0, epsilon = 1e-8);
    }

    #[test]
    fn power_iteration_zero_operator() {
        let zero = |v: &GridFunction| Ok(v.zeros_like());
        let s = power_iteration_norm(zero, zero, 5, 1.0, 30, 3).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn power_iteration_random_diagonal_matches_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 40;
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..5.0)).collect();
        let max = sigma.iter().cloned().fold(0.0, f64::max);
        let op = diag_ops(sigma);
        let s = power_iteration_norm(op.clone(), op, n, 1.0, 100, 5).unwrap();
        assert_relative_eq!(s, max, max_relative = 1e-9);
    }

    #[test]
    fn power_iteration_monotone_in_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 30;
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..3.0)).collect();
        let op = diag_ops(sigma);
        let mut last = 0.0f64;
        for iters in [1usize, 2, 4, 8, 16, 32] {
            let s = power_iteration_norm(op.clone(), op.clone(), n, 1.0, iters, 9).unwrap();
            assert!(s >= last - 1e-12 * last.max(1.0), "not monotone at {iters}");
            last = s;
        }
    }

    /// One-percent spectral separation reaches 1e-6 relative in 200 iterations.
    #[test]
    fn power_iteration_one_percent_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..20 {
            let n = 64;
            let mut sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            // Force the top value 1% above everything else; worst admissible gap.
            let max = sigma.iter().cloned().fold(0.0, f64::max);
            sigma[0] = max * 1.01;
            let top = sigma[0];
            let op = diag_ops(sigma);
            let s = power_iteration_norm(op.clone(), op, n, 1.0, 200, 100 + trial).unwrap();
            assert!(
                (s - top).abs() <= 1e-6 * top,
                "trial {trial}: got {s}, want {top}"
            );
        }
    }

    proptest! {
        #[test]
        fn cauchy_schwarz(
            vals_u in proptest::collection::vec(-1e3f64..1e3, 1..40),
            vals_v_seed in any::<u64>(),
            weight in 1e-3f64..1e3,
        ) {
            let n = vals_u.len();
            let mut rng = ChaCha8Rng::seed_from_u64(vals_v_seed);
            let u = GridFunction::new(vals_u, weight).unwrap();
            let v = gaussian_vector(&mut rng, n, weight).unwrap();
            let lhs = u.inner(&v).unwrap().abs();
            let rhs = u.norm() * v.norm();
            prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-300);
        }

        #[test]
        fn inner_is_symmetric(
            seed in any::<u64>(),
            n in 1usize..32,
            weight in 1e-3f64..1e2,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = gaussian_vector(&mut rng, n, weight).unwrap();
            let v = gaussian_vector(&mut rng, n, weight).unwrap();
            prop_assert_eq!(u.inner(&v).unwrap(), v.inner(&u).unwrap());
        }
    }
}
