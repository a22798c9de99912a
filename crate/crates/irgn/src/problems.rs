//! Concrete test problems, source-condition construction, and noise.
//!
//! Two problems ship with the crate:
//!
//! * [`EllipticProblem`] — identify the zeroth-order coefficient `c` in
//!   `-u'' + c u = f` on (0,1) with homogeneous Dirichlet data from the
//!   observed state: `F(c) = u(c)`. Discretized with central differences on
//!   `n` interior points (mesh `h = 1/(n+1)`), all solves are tridiagonal.
//!   Both spaces are discretized L²(0,1) with quadrature weight `h`.
//! * [`DiagonalProblem`] — a closed-form benchmark
//!   `F(x)_i = sigma_i (x_i + (gamma/2) x_i^2)` in Euclidean space whose
//!   derivative `diag(sigma_i (1 + gamma x_i))`, adjoint, Lipschitz constant
//!   `L = gamma * max sigma_i` and singular values are all known exactly.
//!   Every matrix-free code path can be checked against componentwise
//!   arithmetic on it.
//!
//! [`make_source_initial_guess`] builds initial guesses satisfying a source
//! condition — either the fractional-power form
//! `x0 - x_true = (F'(x_true)* F'(x_true))^{nu/2} omega` or the range form
//! `x0 - x_true = F'(x_true)* v` — via a dense SVD of the Jacobian at the
//! exact solution. [`add_noise`] perturbs clean data to an exactly known
//! noise level.

use std::f64::consts::PI;
use std::sync::Mutex;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hilbert::{dense_jacobian, gaussian_vector, GridFunction};
use crate::operator::{lipschitz_probe, rescale, ForwardOperator, LipschitzCell, Rescaled};

/// Solves the SPD tridiagonal system with diagonal `2/h^2 + c_i` and
/// constant off-diagonal `-1/h^2` (Thomas algorithm, no pivoting needed).
fn solve_shifted_laplacian(h: f64, c: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = c.len();
    debug_assert_eq!(rhs.len(), n);
    let off = -1.0 / (h * h);
    let base = 2.0 / (h * h);

    let mut pivot = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut prev_pivot = 0.0;
    for i in 0..n {
        let d = base + c[i];
        let p = if i == 0 { d } else { d - off * off / prev_pivot };
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::NotPositiveDefinite { row: i });
        }
        pivot[i] = p;
        y[i] = if i == 0 { rhs[i] } else { rhs[i] - off / prev_pivot * y[i - 1] };
        prev_pivot = p;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = y[n - 1] / pivot[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = (y[i] - off * x[i + 1]) / pivot[i];
    }
    Ok(x)
}

/// 1D elliptic coefficient-identification problem on (0,1).
#[derive(Debug, Clone)]
pub struct EllipticProblem {
    n: usize,
    h: f64,
    f: GridFunction,
    c_dagger: GridFunction,
    rho: f64,
}

impl EllipticProblem {
    /// Defaults: `f(t) = pi^2 sin(pi t) + 10` and `c(t) = 1 + t(1-t)`.
    pub fn new(n: usize) -> Result<Self> {
        Self::with_functions(n, |t| PI * PI * (PI * t).sin() + 10.0, |t| 1.0 + t * (1.0 - t))
    }

    /// Custom right-hand side and true coefficient (sampled at interior
    /// points). The coefficient must be pointwise nonnegative.
    pub fn with_functions(
        n: usize,
        f: impl Fn(f64) -> f64,
        c_dagger: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidConfig("elliptic grid needs n >= 2".into()));
        }
        let h = 1.0 / (n as f64 + 1.0);
        let t = |i: usize| (i as f64 + 1.0) * h;
        let f = GridFunction::from_fn(n, h, |i| f(t(i)))?;
        let c = GridFunction::from_fn(n, h, |i| c_dagger(t(i)))?;
        if c.values().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidConfig("true coefficient must be >= 0 pointwise".into()));
        }
        let rho = Self::spd_safe_radius(n, h, &c);
        Ok(Self { n, h, f, c_dagger: c, rho })
    }

    /// Largest ball radius we allow around `c_dagger`: every coefficient in
    /// the ball keeps the stiffness matrix positive definite, with a wide
    /// safety factor. An L2 ball of radius rho perturbs pointwise by at most
    /// rho / sqrt(h), which must stay below lambda_min(-Laplacian) + min c.
    /// The factor also keeps sources built at a fraction of rho small enough
    /// for the smallness products (Lipschitz constant times source norm) the
    /// convergence theory asks for.
    fn spd_safe_radius(n: usize, h: f64, c_dagger: &GridFunction) -> f64 {
        let lambda_min = 2.0 / (h * h) * (1.0 - (PI * h).cos());
        let c_min = c_dagger.values().iter().cloned().fold(f64::INFINITY, f64::min);
        let _ = n;
        (0.08 * (lambda_min + c_min) * h.sqrt()).min(0.5)
    }

    /// Shrinks the ball radius; growing it past the SPD-safe cap is refused.
    pub fn with_radius(mut self, rho: f64) -> Result<Self> {
        let cap = Self::spd_safe_radius(self.n, self.h, &self.c_dagger);
        if !(rho > 0.0) || rho > cap {
            return Err(Error::InvalidConfig(format!(
                "radius must lie in (0, {cap:.6}], got {rho}"
            )));
        }
        self.rho = rho;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mesh(&self) -> f64 {
        self.h
    }

    pub fn rhs(&self) -> &GridFunction {
        &self.f
    }

    pub fn c_dagger(&self) -> &GridFunction {
        &self.c_dagger
    }

    pub fn radius(&self) -> f64 {
        self.rho
    }

    /// Solves the state equation `A(c) u = f` by the Thomas algorithm.
    pub fn solve_state(&self, c: &GridFunction) -> Result<GridFunction> {
        self.f.same_grid(c)?;
        let u = solve_shifted_laplacian(self.h, c.values(), self.f.values())?;
        GridFunction::new(u, self.h)
    }

    /// Solves `A(c) x = rhs` for an arbitrary right-hand side.
    fn solve_with(&self, c: &GridFunction, rhs: &GridFunction) -> Result<GridFunction> {
        let x = solve_shifted_laplacian(self.h, c.values(), rhs.values())?;
        GridFunction::new(x, self.h)
    }
}

/// Matrix-free forward operator `c -> u(c)` for [`EllipticProblem`].
///
/// Derivative and adjoint each cost one tridiagonal solve:
/// `F'(c) h = -A(c)^{-1}(h . u(c))` and `F'(c)* w = -u(c) . A(c)^{-1} w`;
/// the state `u(c)` is memoized for the last few linearization points.
pub struct EllipticOperator {
    problem: EllipticProblem,
    state_cache: Mutex<Vec<(Vec<f64>, GridFunction)>>,
    lipschitz: LipschitzCell,
    alpha0: f64,
}

impl EllipticOperator {
    pub fn new(problem: EllipticProblem) -> Result<Self> {
        let mut op = Self {
            problem,
            state_cache: Mutex::new(Vec::new()),
            lipschitz: LipschitzCell::new(0.0),
            alpha0: 0.0,
        };
        // Conservative scaling level for the raw operator: measured norm at
        // the center with a factor-4 cushion for variation across the ball.
        let center = op.problem.c_dagger.clone();
        let norm = crate::hilbert::power_iteration_norm(
            |h| op.derivative_apply(&center, h),
            |w| op.adjoint_apply(&center, w),
            op.problem.n,
            op.problem.h,
            60,
            0xe11,
        )?;
        op.alpha0 = (4.0 * norm).powi(2).max(f64::MIN_POSITIVE);
        Ok(op)
    }

    pub fn problem(&self) -> &EllipticProblem {
        &self.problem
    }

    fn state_for(&self, c: &GridFunction) -> Result<GridFunction> {
        {
            let cache = self.state_cache.lock().expect("state cache");
            if let Some((_, u)) = cache.iter().find(|(cv, _)| cv.as_slice() == c.values()) {
                return Ok(u.clone());
            }
        }
        let u = self.problem.solve_state(c)?;
        let mut cache = self.state_cache.lock().expect("state cache");
        if cache.len() >= 4 {
            cache.remove(0);
        }
        cache.push((c.values().to_vec(), u.clone()));
        Ok(u)
    }
}

impl ForwardOperator for EllipticOperator {
    fn x_dim(&self) -> usize {
        self.problem.n
    }
    fn y_dim(&self) -> usize {
        self.problem.n
    }
    fn x_weight(&self) -> f64 {
        self.problem.h
    }
    fn y_weight(&self) -> f64 {
        self.problem.h
    }

    fn eval(&self, x: &GridFunction) -> Result<GridFunction> {
        self.state_for(x)
    }

    fn derivative_apply(&self, x: &GridFunction, h: &GridFunction) -> Result<GridFunction> {
        let u = self.state_for(x)?;
        let hu = h.hadamard(&u)?;
        Ok(self.problem.solve_with(x, &hu)?.scale(-1.0))
    }

    fn adjoint_apply(&self, x: &GridFunction, w: &GridFunction) -> Result<GridFunction> {
        let u = self.state_for(x)?;
        let z = self.problem.solve_with(x, w)?;
        Ok(u.hadamard(&z)?.scale(-1.0))
    }

    fn domain_center(&self) -> &GridFunction {
        &self.problem.c_dagger
    }
    fn domain_radius(&self) -> f64 {
        self.problem.rho
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
        format!("elliptic(n={},rho={:.6e})", self.problem.n, self.problem.rho)
    }
}

/// Builds the ready-to-iterate elliptic operator: wraps [`EllipticOperator`]
/// so `||F'|| <= 1` on the ball (scaling level 1) and fills the Lipschitz
/// estimate with a probe. Data must be produced through the returned
/// operator's `eval` (or scaled by its factor).
pub fn elliptic_forward(problem: EllipticProblem) -> Result<Rescaled<EllipticOperator>> {
    let scaled = rescale(EllipticOperator::new(problem)?, 1.0)?;
    lipschitz_probe(&scaled, 30, 0x11f5, 50)?;
    Ok(scaled)
}

/// Closed-form diagonal benchmark problem.
#[derive(Debug, Clone)]
pub struct DiagonalProblem {
    n: usize,
    sigma: Vec<f64>,
    decay_p: f64,
    gamma: f64,
    x_dagger: GridFunction,
    rho: f64,
}

impl DiagonalProblem {
    /// Singular-value profile `sigma_i = i^{-p}` (i = 1..n), curvature
    /// `gamma`, exact solution `sin(pi t_i)`, ball radius 1.
    pub fn new(n: usize, p: f64, gamma: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("diagonal problem needs n >= 1".into()));
        }
        if !(p > 0.0) || !(gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need decay p > 0 and curvature gamma >= 0, got p={p}, gamma={gamma}"
            )));
        }
        let sigma: Vec<f64> = (1..=n).map(|i| (i as f64).powf(-p)).collect();
        let x_dagger =
            GridFunction::from_fn(n, 1.0, |i| (PI * (i as f64 + 1.0) / (n as f64 + 1.0)).sin())?;
        Ok(Self { n, sigma, decay_p: p, gamma, x_dagger, rho: 1.0 })
    }

    /// Default profile used by the benchmarks: `p = 1.6`, `gamma = 0.05`.
    pub fn standard(n: usize) -> Result<Self> {
        Self::new(n, 1.6, 0.05)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn x_dagger(&self) -> &GridFunction {
        &self.x_dagger
    }

    pub fn radius(&self) -> f64 {
        self.rho
    }

    /// Overrides the ball radius (default 1).
    pub fn with_radius(mut self, rho: f64) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidConfig(format!("radius must be positive, got {rho}")));
        }
        self.rho = rho;
        Ok(self)
    }

    /// Exact Lipschitz constant of `x -> F'(x)`: `gamma * max_i sigma_i`.
    pub fn exact_lipschitz(&self) -> f64 {
        self.gamma * self.sigma.iter().cloned().fold(0.0, f64::max)
    }
}

/// Matrix-free (trivially so) operator for [`DiagonalProblem`].
pub struct DiagonalOperator {
    problem: DiagonalProblem,
    lipschitz: LipschitzCell,
    alpha0: f64,
}

impl DiagonalOperator {
    pub fn problem(&self) -> &DiagonalProblem {
        &self.problem
    }
}

/// Wraps a [`DiagonalProblem`] as a [`ForwardOperator`]; the Lipschitz
/// estimate is set to the exact constant and the scaling level to the exact
/// supremum of `||F'(x)||^2` over the ball.
pub fn diagonal_forward(problem: DiagonalProblem) -> DiagonalOperator {
    let lipschitz = LipschitzCell::new(problem.exact_lipschitz());
    let alpha0 = problem
        .sigma
        .iter()
        .zip(problem.x_dagger.values())
        .map(|(s, x)| {
            let lo = 1.0 + problem.gamma * (x - problem.rho);
            let hi = 1.0 + problem.gamma * (x + problem.rho);
            s * lo.abs().max(hi.abs())
        })
        .fold(0.0, f64::max)
        .powi(2);
    DiagonalOperator { problem, lipschitz, alpha0 }
}

impl ForwardOperator for DiagonalOperator {
    fn x_dim(&self) -> usize {
        self.problem.n
    }
    fn y_dim(&self) -> usize {
        self.problem.n
    }
    fn x_weight(&self) -> f64 {
        1.0
    }
    fn y_weight(&self) -> f64 {
        1.0
    }

    fn eval(&self, x: &GridFunction) -> Result<GridFunction> {
        let g = self.problem.gamma;
        GridFunction::new(
            self.problem
                .sigma
                .iter()
                .zip(x.values())
                .map(|(s, xi)| s * (xi + 0.5 * g * xi * xi))
                .collect(),
            1.0,
        )
    }

    fn derivative_apply(&self, x: &GridFunction, h: &GridFunction) -> Result<GridFunction> {
        let g = self.problem.gamma;
        x.same_grid(h)?;
        GridFunction::new(
            self.problem
                .sigma
                .iter()
                .zip(x.values())
                .zip(h.values())
                .map(|((s, xi), hi)| s * (1.0 + g * xi) * hi)
                .collect(),
            1.0,
        )
    }

    fn adjoint_apply(&self, x: &GridFunction, w: &GridFunction) -> Result<GridFunction> {
        // Real diagonal derivative: the adjoint action coincides.
        self.derivative_apply(x, w)
    }

    fn domain_center(&self) -> &GridFunction {
        &self.problem.x_dagger
    }
    fn domain_radius(&self) -> f64 {
        self.problem.rho
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
        format!(
            "diagonal(n={},p={},gamma={},rho={})",
            self.problem.n, self.problem.decay_p, self.problem.gamma, self.problem.rho
        )
    }
}

/// Smoothness specification for the initial guess.
#[derive(Debug, Clone)]
pub enum SourceSpec {
    /// `x0 - x_true = (F'(x_true)* F'(x_true))^{nu/2} omega`, `nu` in (0, 2].
    Power { nu: f64, omega: GridFunction },
    /// `x0 - x_true = F'(x_true)* v`; the component of `v` in the numerical
    /// null space of `F'(x_true)*` is projected away.
    Range { v: GridFunction },
}

/// What [`make_source_initial_guess`] produced.
#[derive(Debug, Clone)]
pub struct SourceOutcome {
    /// The constructed initial guess.
    pub x0: GridFunction,
    /// `||x0 - x_true||`, measured after construction.
    pub initial_error: f64,
    /// `||omega||` for power-form sources.
    pub omega_norm: Option<f64>,
    /// Norm of the range-form representer `v` (for power-form sources the
    /// induced `v` with `x0 - x_true = F'(x_true)* v`, cut at the numerical
    /// null space). Drives the comparison index `k_tilde`.
    pub v_norm: f64,
    /// Smoothness exponent: the requested `nu`, or 1 for range-form sources.
    pub nu: f64,
}

impl SourceOutcome {
    /// `(nu, norm)` pair the a priori stopping rule needs.
    pub fn apriori_pair(&self) -> (f64, f64) {
        (self.nu, self.omega_norm.unwrap_or(self.v_norm))
    }
}

/// Singular values below `max * 1e-10` count as numerical null space.
const SVD_CUT_REL: f64 = 1e-10;

fn source_from_svd(
    problem: &dyn ForwardOperator,
    x_dagger: &GridFunction,
    spec: &SourceSpec,
) -> Result<(GridFunction, Option<f64>, f64, f64)> {
    let wx = problem.x_weight();
    let wy = problem.y_weight();
    let jac = dense_jacobian(problem, x_dagger)?;
    // Isometry to Euclidean coordinates: singular values match the weighted
    // operator norms; the conjugation by sqrt(weight) cancels on X-to-X maps.
    let jac_iso = jac * (wy / wx).sqrt();
    let svd = jac_iso.svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let sigma = &svd.singular_values;
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let cut = sigma_max * SVD_CUT_REL;

    let (coef, nu, omega_norm): (DVector<f64>, f64, Option<f64>) = match spec {
        SourceSpec::Power { nu, omega } => {
            if !(*nu > 0.0 && *nu <= 2.0) {
                return Err(Error::InvalidConfig(format!("nu must lie in (0, 2], got {nu}")));
            }
            if omega.len() != problem.x_dim() || omega.weight() != wx {
                return Err(Error::ShapeMismatch("omega must live on the input grid".into()));
            }
            let omega_iso = DVector::from_column_slice(omega.values()) * wx.sqrt();
            (v_t * omega_iso, *nu, Some(omega.norm()))
        }
        SourceSpec::Range { v } => {
            if v.len() != problem.y_dim() || v.weight() != wy {
                return Err(Error::ShapeMismatch("v must live on the data grid".into()));
            }
            let v_iso = DVector::from_column_slice(v.values()) * wy.sqrt();
            (u.transpose() * v_iso, 1.0, None)
        }
    };

    // Spectral multipliers: sigma^nu toward the error, sigma^{nu-1} toward
    // the induced representer v.
    let k = coef.len();
    let mut err_coef = DVector::zeros(k);
    let mut v_coef = DVector::zeros(k);
    for i in 0..k {
        let s = sigma[i];
        if s > cut {
            err_coef[i] = s.powf(nu) * coef[i];
            v_coef[i] = s.powf(nu - 1.0) * coef[i];
        }
    }
    let e0_iso = v_t.transpose() * err_coef;
    let e0 = GridFunction::new((e0_iso / wx.sqrt()).iter().cloned().collect(), wx)?;
    let x0 = x_dagger.add(&e0)?;
    let v_norm = v_coef.norm();
    Ok((x0, omega_norm, v_norm, nu))
}

/// Constructs the initial guess from a source specification and verifies the
/// ball condition `||x0 - x_true|| <= rho/4`.
pub fn make_source_initial_guess(
    problem: &dyn ForwardOperator,
    x_dagger: &GridFunction,
    spec: &SourceSpec,
) -> Result<SourceOutcome> {
    let (x0, omega_norm, v_norm, nu) = source_from_svd(problem, x_dagger, spec)?;
    let initial_error = x0.distance(x_dagger)?;
    let limit = problem.domain_radius() / 4.0;
    if initial_error > limit {
        return Err(Error::SourceOutsideBall { achieved: initial_error, limit });
    }
    Ok(SourceOutcome { x0, initial_error, omega_norm, v_norm, nu })
}

/// Source form selector for [`make_source_with_initial_error`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceForm {
    Power { nu: f64 },
    Range,
}

/// Draws a seeded random source direction and scales it so that
/// `||x0 - x_true||` hits `target_error` exactly (the construction is linear
/// in the source element).
pub fn make_source_with_initial_error(
    problem: &dyn ForwardOperator,
    x_dagger: &GridFunction,
    form: SourceForm,
    seed: u64,
    target_error: f64,
) -> Result<SourceOutcome> {
    if !(target_error > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "target initial error must be positive, got {target_error}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit_spec = match form {
        SourceForm::Power { nu } => {
            let g = gaussian_vector(&mut rng, problem.x_dim(), problem.x_weight())?;
            let gn = g.norm();
            SourceSpec::Power { nu, omega: g.scale(1.0 / gn) }
        }
        SourceForm::Range => {
            let g = gaussian_vector(&mut rng, problem.y_dim(), problem.y_weight())?;
            let gn = g.norm();
            SourceSpec::Range { v: g.scale(1.0 / gn) }
        }
    };
    let (probe_x0, _, _, _) = source_from_svd(problem, x_dagger, &unit_spec)?;
    let probe_error = probe_x0.distance(x_dagger)?;
    if probe_error == 0.0 {
        return Err(Error::InvalidConfig(
            "source direction was annihilated by the operator; try another seed".into(),
        ));
    }
    let s = target_error / probe_error;
    let spec = match unit_spec {
        SourceSpec::Power { nu, omega } => SourceSpec::Power { nu, omega: omega.scale(s) },
        SourceSpec::Range { v } => SourceSpec::Range { v: v.scale(s) },
    };
    make_source_initial_guess(problem, x_dagger, &spec)
}

/// As [`make_source_with_initial_error`], but prescribing the norm of the
/// source element itself (`||omega||` for power form, `||v||` for range
/// form) instead of the resulting initial error.
pub fn make_source_with_norm(
    problem: &dyn ForwardOperator,
    x_dagger: &GridFunction,
    form: SourceForm,
    seed: u64,
    source_norm: f64,
) -> Result<SourceOutcome> {
    if !(source_norm > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "source norm must be positive, got {source_norm}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = match form {
        SourceForm::Power { nu } => {
            let g = gaussian_vector(&mut rng, problem.x_dim(), problem.x_weight())?;
            let gn = g.norm();
            SourceSpec::Power { nu, omega: g.scale(source_norm / gn) }
        }
        SourceForm::Range => {
            let g = gaussian_vector(&mut rng, problem.y_dim(), problem.y_weight())?;
            let gn = g.norm();
            SourceSpec::Range { v: g.scale(source_norm / gn) }
        }
    };
    make_source_initial_guess(problem, x_dagger, &spec)
}

/// Absolute noise level and seed for [`add_noise`].
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub delta: f64,
    pub seed: u64,
}

/// Returns `y + delta * g/||g||` for a seeded Gaussian `g`: the perturbation
/// has norm exactly `delta` (to round-off) and is deterministic per seed.
pub fn add_noise(y: &GridFunction, spec: &NoiseSpec) -> Result<GridFunction> {
    if !(spec.delta > 0.0) || !spec.delta.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "noise level must be positive and finite, got {}",
            spec.delta
        )));
    }
    let mut attempt = 0u64;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(attempt));
        let g = gaussian_vector(&mut rng, y.len(), y.weight())?;
        let gn = g.norm();
        if gn > 0.0 {
            let mut noisy = y.clone();
            noisy.axpy(spec.delta / gn, &g)?;
            return Ok(noisy);
        }
        attempt += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    #[test]
    fn thomas_matches_dense_solve() {
        let h = 0.25;
        let c = [0.5, 1.0, 2.0];
        let rhs = [1.0, -2.0, 3.0];
        let x = solve_shifted_laplacian(h, &c, &rhs).unwrap();
        let base = 2.0 / (h * h);
        let off = -1.0 / (h * h);
        let a = DMatrix::from_fn(3, 3, |i, j| {
            if i == j {
                base + c[i]
            } else if i.abs_diff(j) == 1 {
                off
            } else {
                0.0
            }
        });
        let expect = a.lu().solve(&DVector::from_column_slice(&rhs)).unwrap();
        for i in 0..3 {
            assert_relative_eq!(x[i], expect[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn thomas_rejects_indefinite() {
        // Large negative shift destroys positivity.
        let err = solve_shifted_laplacian(0.5, &[-100.0, -100.0], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn state_solve_analytic_zero_coefficient() {
        // -u'' = pi^2 sin(pi t)  =>  u = sin(pi t), second-order accurate.
        let p = EllipticProblem::with_functions(199, |t| PI * PI * (PI * t).sin(), |_| 0.0).unwrap();
        let u = p.solve_state(p.c_dagger()).unwrap();
        let h = p.mesh();
        let mut max_err = 0.0f64;
        for (i, v) in u.values().iter().enumerate() {
            let t = (i as f64 + 1.0) * h;
            max_err = max_err.max((v - (PI * t).sin()).abs());
        }
        assert!(max_err <= 1e-3, "max err {max_err}");
    }

    #[test]
    fn state_solve_zero_rhs() {
        let p = EllipticProblem::with_functions(31, |_| 0.0, |t| 1.0 + t).unwrap();
        let u = p.solve_state(p.c_dagger()).unwrap();
        assert!(u.norm() == 0.0);
    }

    #[test]
    fn state_solve_analytic_constant_coefficient() {
        let kappa = 3.0;
        let p = EllipticProblem::with_functions(
            199,
            move |t| (PI * PI + kappa) * (PI * t).sin(),
            move |_| kappa,
        )
        .unwrap();
        let u = p.solve_state(p.c_dagger()).unwrap();
        let h = p.mesh();
        let mut max_err = 0.0f64;
        for (i, v) in u.values().iter().enumerate() {
            let t = (i as f64 + 1.0) * h;
            max_err = max_err.max((v - (PI * t).sin()).abs());
        }
        assert!(max_err <= 1e-3, "max err {max_err}");
    }

    #[test]
    fn state_solve_residual_contract() {
        let p = EllipticProblem::new(101).unwrap();
        let c = p.c_dagger().clone();
        let u = p.solve_state(&c).unwrap();
        // Recompute A(c) u - f directly.
        let h = p.mesh();
        let (base, off) = (2.0 / (h * h), -1.0 / (h * h));
        let uv = u.values();
        let mut res = 0.0f64;
        for i in 0..p.n() {
            let mut row = (base + c.values()[i]) * uv[i];
            if i > 0 {
                row += off * uv[i - 1];
            }
            if i + 1 < p.n() {
                row += off * uv[i + 1];
            }
            res += (row - p.rhs().values()[i]).powi(2);
        }
        let rel = (h * res).sqrt() / p.rhs().norm();
        assert!(rel <= 1e-10, "relative residual {rel}");
    }

    #[test]
    fn state_solve_second_order_convergence() {
        let err_for = |n: usize| {
            let p =
                EllipticProblem::with_functions(n, |t| PI * PI * (PI * t).sin(), |_| 0.0).unwrap();
            let u = p.solve_state(p.c_dagger()).unwrap();
            let h = p.mesh();
            u.values()
                .iter()
                .enumerate()
                .map(|(i, v)| (v - (PI * ((i as f64 + 1.0) * h)).sin()).abs())
                .fold(0.0f64, f64::max)
        };
        let ratio = err_for(99) / err_for(199);
        assert!((3.2..=4.8).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn diagonal_eval_matches_formula() {
        let p = DiagonalProblem::new(5, 1.0, 0.1).unwrap();
        let op = diagonal_forward(p);
        let x = op.problem().x_dagger().clone();
        let y = op.eval(&x).unwrap();
        for i in 0..5 {
            let s = op.problem().sigma()[i];
            let xi = x.values()[i];
            assert_relative_eq!(y.values()[i], s * (xi + 0.05 * xi * xi), max_relative = 1e-15);
        }
    }

    #[test]
    fn diagonal_gamma_zero_is_linear_map() {
        let p = DiagonalProblem::new(4, 2.0, 0.0).unwrap();
        let op = diagonal_forward(p);
        let x = GridFunction::new(vec![1.0, -2.0, 0.5, 3.0], 1.0).unwrap();
        let y = op.eval(&x).unwrap();
        for i in 0..4 {
            assert_relative_eq!(y.values()[i], op.problem().sigma()[i] * x.values()[i]);
        }
        assert_eq!(op.lipschitz_estimate(), 0.0);
    }

    #[test]
    fn diagonal_adjoint_is_exact() {
        let p = DiagonalProblem::standard(8).unwrap();
        let op = diagonal_forward(p);
        let x = op.domain_center().clone();
        let disc = crate::operator::adjoint_check(&op, &x, 10, 5).unwrap();
        assert!(disc <= 1e-14);
    }

    #[test]
    fn source_power_nu2_diagonal_closed_form() {
        // gamma = 0, sigma_1 = 2: nu = 2 source along e_1 gives s^2 * omega.
        let mut p = DiagonalProblem::new(3, 1.0, 0.0).unwrap();
        p.sigma = vec![2.0, 0.5, 0.1];
        let op = diagonal_forward(p);
        let x_dagger = op.domain_center().clone();
        let omega = GridFunction::basis(3, 0, 1.0).unwrap().scale(0.03);
        let out = make_source_initial_guess(
            &op,
            &x_dagger,
            &SourceSpec::Power { nu: 2.0, omega },
        )
        .unwrap();
        let e0 = out.x0.sub(&x_dagger).unwrap();
        assert_relative_eq!(e0.values()[0], 4.0 * 0.03, max_relative = 1e-10);
        assert!(e0.values()[1].abs() <= 1e-12);
        assert!(e0.values()[2].abs() <= 1e-12);
    }

    #[test]
    fn source_zero_omega_returns_exact_solution() {
        let op = diagonal_forward(DiagonalProblem::standard(6).unwrap());
        let x_dagger = op.domain_center().clone();
        let omega = GridFunction::zeros(6, 1.0).unwrap();
        let out =
            make_source_initial_guess(&op, &x_dagger, &SourceSpec::Power { nu: 1.0, omega })
                .unwrap();
        assert!(out.x0.distance(&x_dagger).unwrap() <= 1e-15);
        assert_eq!(out.initial_error, 0.0);
    }

    #[test]
    fn source_power_matches_componentwise_svd_free_form() {
        // For the linear diagonal problem the SVD route must reproduce
        // sigma_i^nu * omega_i componentwise.
        let p = DiagonalProblem::new(10, 1.5, 0.0).unwrap();
        let op = diagonal_forward(p);
        let x_dagger = op.domain_center().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let omega = gaussian_vector(&mut rng, 10, 1.0).unwrap().scale(0.02);
        let nu = 1.3;
        let out = make_source_initial_guess(
            &op,
            &x_dagger,
            &SourceSpec::Power { nu, omega: omega.clone() },
        )
        .unwrap();
        let e0 = out.x0.sub(&x_dagger).unwrap();
        for i in 0..10 {
            let s = op.problem().sigma()[i];
            assert_relative_eq!(
                e0.values()[i],
                s.powf(nu) * omega.values()[i],
                max_relative = 1e-10,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn source_range_form_lies_in_range() {
        let op = diagonal_forward(DiagonalProblem::standard(12).unwrap());
        let x_dagger = op.domain_center().clone();
        let out = make_source_with_initial_error(&op, &x_dagger, SourceForm::Range, 3, 0.05)
            .unwrap();
        assert_relative_eq!(out.initial_error, 0.05, epsilon = 1e-12);
        // e0 = F'(x)* v means componentwise e0_i = s_i v_i; check residual of
        // the least-squares representation is at numerical null level.
        let e0 = out.x0.sub(&x_dagger).unwrap();
        let jac = dense_jacobian(&op, &x_dagger).unwrap();
        let svd = jac.svd(true, true);
        let vt = svd.v_t.unwrap();
        let coords = &vt * DVector::from_column_slice(e0.values());
        let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let mut outside = 0.0f64;
        for i in 0..coords.len() {
            if svd.singular_values[i] <= smax * SVD_CUT_REL {
                outside += coords[i] * coords[i];
            }
        }
        assert!(outside.sqrt() <= 1e-10);
    }

    #[test]
    fn source_target_error_is_exact_elliptic() {
        let op = elliptic_forward(EllipticProblem::new(41).unwrap()).unwrap();
        let x_dagger = op.domain_center().clone();
        let target = op.domain_radius() / 8.0;
        let out = make_source_with_initial_error(
            &op,
            &x_dagger,
            SourceForm::Power { nu: 1.0 },
            9,
            target,
        )
        .unwrap();
        assert_relative_eq!(out.initial_error, target, epsilon = 1e-12);
    }

    #[test]
    fn source_too_large_is_refused() {
        let op = diagonal_forward(DiagonalProblem::standard(6).unwrap());
        let x_dagger = op.domain_center().clone();
        let err = make_source_with_initial_error(
            &op,
            &x_dagger,
            SourceForm::Power { nu: 1.0 },
            1,
            op.domain_radius(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SourceOutsideBall { .. }));
    }

    #[test]
    fn noise_norm_is_exact() {
        let y = GridFunction::new(vec![1.0, 0.0], 1.0).unwrap();
        let spec = NoiseSpec { delta: 0.1, seed: 4 };
        let noisy = add_noise(&y, &spec).unwrap();
        let d = noisy.distance(&y).unwrap();
        assert!((d - 0.1).abs() <= 1e-15);
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let y = GridFunction::from_fn(20, 0.25, |i| i as f64).unwrap();
        let a = add_noise(&y, &NoiseSpec { delta: 0.3, seed: 8 }).unwrap();
        let b = add_noise(&y, &NoiseSpec { delta: 0.3, seed: 8 }).unwrap();
        assert_eq!(a, b);
        let c = add_noise(&y, &NoiseSpec { delta: 0.3, seed: 9 }).unwrap();
        assert_ne!(a, c);
        assert!((c.distance(&y).unwrap() - 0.3).abs() <= 1e-15);
    }

    #[test]
    fn noise_rejects_nonpositive_delta() {
        let y = GridFunction::new(vec![1.0], 1.0).unwrap();
        assert!(add_noise(&y, &NoiseSpec { delta: 0.0, seed: 1 }).is_err());
    }

    proptest::proptest! {
        /// The perturbation lands on the requested level for any shape,
        /// weight, seed, and level within floating-point cancellation.
        #[test]
        fn noise_level_is_exact_for_any_shape(
            n in 1usize..200,
            weight in 1e-4f64..1e2,
            seed in proptest::prelude::any::<u64>(),
            rel in 1e-6f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let y = gaussian_vector(&mut rng, n, weight).unwrap();
            let delta = rel * y.norm().max(1e-6);
            let noisy = add_noise(&y, &NoiseSpec { delta, seed }).unwrap();
            let achieved = noisy.distance(&y).unwrap();
            proptest::prop_assert!(
                (achieved - delta).abs() <= 1e-9 * delta + 1e-12 * y.norm(),
                "requested {delta}, achieved {achieved}"
            );
        }
    }
}
