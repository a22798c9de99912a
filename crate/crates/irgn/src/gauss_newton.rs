//! The iteratively regularized Gauss-Newton method with a posteriori stopping.
//!
//! Given a forward operator `F`, data `y` (possibly noisy at level `delta`),
//! an initial guess `x0` and a decreasing regularization schedule `alpha_k`,
//! the iteration is
//!
//! ```text
//! x_{k+1} = x_k - (alpha_k I + F'(x_k)* F'(x_k))^{-1}
//!                 [ F'(x_k)*(F(x_k) - y) + alpha_k (x_k - x0) ]
//! ```
//!
//! with every inverse realized matrix-free by conjugate gradients. The same
//! formula serves noisy and noise-free data; [`run`] drives the loop and
//! records a full [`IterationTrace`].
//!
//! Stopping is decided *before* each step at the current iterate, so a
//! stopping index of 0 is possible. Three rules are provided:
//!
//! * **posterior** — stop at the first `k` with
//!   `alpha_k ( F(x_k)-y_delta, (alpha_k I + F'(x_k)F'(x_k)*)^{-1} (F(x_k)-y_delta) ) <= tau^2 delta^2`.
//!   This quadratic form equals
//!   `|| alpha_k^{1/2} (alpha_k I + B)^{-1/2} (F(x_k)-y_delta) ||^2` and
//!   needs one positive-definite solve, no operator square roots.
//! * **discrepancy** — stop at the first `k` with `||F(x_k)-y_delta|| <= tau delta`.
//! * **a priori** — stop at the first `k` with
//!   `alpha_k <= (delta/||omega||)^{2/(1+nu)}`, which requires knowing the
//!   smoothness `(nu, ||omega||)` of the initial error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{cg_solve, CgSettings, GridFunction};
use crate::operator::ForwardOperator;

/// Geometric regularization schedule `alpha_k = alpha0 * r^{-k}`.
///
/// Values are always produced through the recurrence `alpha_{k+1} = alpha_k / r`
/// so consecutive ratios are exact to one ulp (exact for `r = 2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    alpha0: f64,
    ratio_r: f64,
}

impl AlphaSchedule {
    pub fn new(alpha0: f64, ratio_r: f64) -> Result<Self> {
        if !(alpha0 > 0.0) || !alpha0.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha0 must be positive, got {alpha0}")));
        }
        if !(ratio_r > 1.0) || !ratio_r.is_finite() {
            return Err(Error::InvalidConfig(format!("ratio r must exceed 1, got {ratio_r}")));
        }
        Ok(Self { alpha0, ratio_r })
    }

    /// The canonical choice `r = 2`.
    pub fn halving(alpha0: f64) -> Result<Self> {
        Self::new(alpha0, 2.0)
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn ratio(&self) -> f64 {
        self.ratio_r
    }

    /// `alpha_k`, computed by the recurrence.
    pub fn alpha(&self, k: usize) -> f64 {
        let mut a = self.alpha0;
        for _ in 0..k {
            a /= self.ratio_r;
        }
        a
    }

    /// Endless iterator over `alpha_0, alpha_1, ...`.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        let mut a = self.alpha0;
        let r = self.ratio_r;
        std::iter::from_fn(move || {
            let current = a;
            a /= r;
            Some(current)
        })
    }

    /// First `k` with `alpha_k <= threshold` (0 when `threshold >= alpha0`).
    fn first_index_at_or_below(&self, threshold: f64) -> usize {
        let mut k = 0usize;
        let mut a = self.alpha0;
        while a > threshold {
            a /= self.ratio_r;
            k += 1;
        }
        k
    }
}

/// A priori stopping index: first `N` with `alpha_N <= (delta/||omega||)^{2/(1+nu)}`.
pub fn apriori_stop_index(
    schedule: &AlphaSchedule,
    delta: f64,
    omega_norm: f64,
    nu: f64,
) -> Result<usize> {
    if !(delta > 0.0) || !(omega_norm > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "a priori index needs delta > 0 and ||omega|| > 0, got {delta}, {omega_norm}"
        )));
    }
    if !(nu > 0.0 && nu <= 2.0) {
        return Err(Error::InvalidConfig(format!("nu must lie in (0, 2], got {nu}")));
    }
    let threshold = (delta / omega_norm).powf(2.0 / (1.0 + nu));
    Ok(schedule.first_index_at_or_below(threshold))
}

/// Comparison index `k_tilde`: first `k` with `alpha_k <= c0 * delta / ||v||`.
/// The theory guarantees the posterior stopping index never exceeds it.
pub fn ktilde_index(schedule: &AlphaSchedule, delta: f64, v_norm: f64, c0: f64) -> Result<usize> {
    if !(delta > 0.0) || !(v_norm > 0.0) || !(c0 > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "k_tilde needs positive delta, ||v|| and c0, got {delta}, {v_norm}, {c0}"
        )));
    }
    Ok(schedule.first_index_at_or_below(c0 * delta / v_norm))
}

/// Which rule decides the stopping index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StopRule {
    /// The a posteriori rule on the damped residual functional.
    Posterior,
    /// The generalized discrepancy principle `||F(x_k)-y_delta|| <= tau delta`.
    Discrepancy,
    /// The a priori rule; needs the source smoothness.
    APriori { omega_norm: f64, nu: f64 },
    /// No rule: iterate to `k_max` (the noise-free reference sequence).
    KMaxOnly,
}

/// Stopping rule plus its constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRuleConfig {
    pub rule: StopRule,
    /// Rule constant; the posterior rule's theory needs `tau > 2`.
    pub tau: f64,
    /// Comparison-index constant, `0 < c0 < tau - 2`.
    pub c0: f64,
    /// Iteration cap.
    pub k_max: usize,
}

impl StopRuleConfig {
    pub fn new(rule: StopRule, tau: f64, c0: f64, k_max: usize) -> Result<Self> {
        if !(tau > 2.0) {
            return Err(Error::InvalidConfig(format!("tau must exceed 2, got {tau}")));
        }
        if !(c0 > 0.0 && c0 < tau - 2.0) {
            return Err(Error::InvalidConfig(format!(
                "c0 must lie in (0, tau - 2) = (0, {}), got {c0}",
                tau - 2.0
            )));
        }
        if k_max == 0 {
            return Err(Error::InvalidConfig("k_max must be >= 1".into()));
        }
        Ok(Self { rule, tau, c0, k_max })
    }

    /// Defaults `tau = 2.5`, `c0 = 0.25`, `k_max = 60`.
    pub fn with_defaults(rule: StopRule) -> Self {
        Self { rule, tau: 2.5, c0: 0.25, k_max: 60 }
    }
}

/// One row of an [`IterationTrace`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub alpha: f64,
    pub iterate: GridFunction,
    /// `||F(x_k) - y_data||`.
    pub residual_norm: f64,
    /// Value of the posterior-rule functional at this iterate.
    pub stop_functional: f64,
    /// Distance to the domain center — the true error when the center is the
    /// exact solution, as in the shipped test problems.
    pub error_norm: Option<f64>,
    /// Conjugate gradient iterations spent on this row (functional solve plus
    /// the step solve when a step was taken).
    pub cg_iterations: usize,
}

/// Why the iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    RuleFired,
    KMaxReached,
    /// The next iterate left the admissible ball; the trace is partial and
    /// ends at the last admissible iterate.
    DomainViolation,
}

/// Complete record of one Gauss-Newton run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    /// The stopping index selected by the rule (or the last recorded index
    /// when the rule never fired).
    pub stop_index: usize,
    pub stop_reason: StopReason,
    /// Noise level the run was told about.
    pub delta: f64,
    pub problem_id: String,
    pub schedule: AlphaSchedule,
    pub stop: StopRuleConfig,
    pub cg: CgSettings,
}

impl IterationTrace {
    pub fn final_record(&self) -> &IterationRecord {
        &self.records[self.stop_index]
    }

    /// Error at the stopping index (distance to the domain center).
    pub fn error_at_stop(&self) -> Option<f64> {
        self.final_record().error_norm
    }

    /// Replays the posterior-rule definition against the recorded functional
    /// values: strictly above `tau^2 delta^2` before the stopping index,
    /// at or below it there.
    pub fn verify_posterior_rule(&self) -> Result<()> {
        if self.stop.rule != StopRule::Posterior {
            return Err(Error::TraceMismatch("trace was not produced by the posterior rule".into()));
        }
        let bound = self.stop.tau * self.stop.tau * self.delta * self.delta;
        for record in &self.records {
            let fired = record.stop_functional <= bound;
            if record.k < self.stop_index && fired {
                return Err(Error::TraceMismatch(format!(
                    "functional already at or below the bound at k={} < stop index {}",
                    record.k, self.stop_index
                )));
            }
            if record.k == self.stop_index && self.stop_reason == StopReason::RuleFired && !fired {
                return Err(Error::TraceMismatch(format!(
                    "functional above the bound at the stopping index {}",
                    self.stop_index
                )));
            }
        }
        Ok(())
    }
}

/// One Gauss-Newton update from `x_k`.
pub fn irgn_step(
    problem: &dyn ForwardOperator,
    x_k: &GridFunction,
    x0: &GridFunction,
    y_data: &GridFunction,
    alpha_k: f64,
    cg: &CgSettings,
) -> Result<GridFunction> {
    irgn_step_traced(problem, x_k, x0, y_data, alpha_k, cg).map(|(x, _)| x)
}

fn irgn_step_traced(
    problem: &dyn ForwardOperator,
    x_k: &GridFunction,
    x0: &GridFunction,
    y_data: &GridFunction,
    alpha_k: f64,
    cg: &CgSettings,
) -> Result<(GridFunction, usize)> {
    let mut residual = problem.eval(x_k)?;
    residual.axpy(-1.0, y_data)?;
    let mut rhs = problem.adjoint_apply(x_k, &residual)?;
    let shift = x_k.sub(x0)?;
    rhs.axpy(alpha_k, &shift)?;
    let sol = cg_solve(|h| problem.normal_x_apply(x_k, h), alpha_k, &rhs, cg)?;
    let mut next = x_k.clone();
    next.axpy(-1.0, &sol.solution)?;
    Ok((next, sol.iterations))
}

/// `alpha * ( r, (alpha I + F'(x_lin) F'(x_lin)*)^{-1} r )` for a given
/// residual `r`, i.e. the square of
/// `|| alpha^{1/2} (alpha I + B)^{-1/2} r ||` with `B` linearized at `x_lin`.
///
/// The half-power form is the one the convergence analysis actually runs on;
/// it is evaluated here through a single positive-definite solve.
pub fn damped_residual_functional(
    problem: &dyn ForwardOperator,
    x_lin: &GridFunction,
    residual: &GridFunction,
    alpha: f64,
    cg: &CgSettings,
) -> Result<f64> {
    damped_residual_functional_traced(problem, x_lin, residual, alpha, cg).map(|(v, _)| v)
}

fn damped_residual_functional_traced(
    problem: &dyn ForwardOperator,
    x_lin: &GridFunction,
    residual: &GridFunction,
    alpha: f64,
    cg: &CgSettings,
) -> Result<(f64, usize)> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("functional needs alpha > 0, got {alpha}")));
    }
    let sol = cg_solve(|w| problem.normal_y_apply(x_lin, w), alpha, residual, cg)?;
    let value = alpha * residual.inner(&sol.solution)?;
    Ok((value.max(0.0), sol.iterations))
}

/// The posterior-rule stopping functional at iterate `x`:
/// `alpha * ( F(x)-y_delta, (alpha I + F'(x)F'(x)*)^{-1} (F(x)-y_delta) )`.
pub fn stopping_functional(
    problem: &dyn ForwardOperator,
    x: &GridFunction,
    y_delta: &GridFunction,
    alpha: f64,
    cg: &CgSettings,
) -> Result<f64> {
    let mut residual = problem.eval(x)?;
    residual.axpy(-1.0, y_delta)?;
    damped_residual_functional(problem, x, &residual, alpha, cg)
}

/// Runs the full iteration with the configured stopping rule.
///
/// The rule is evaluated at the current iterate before stepping, so a
/// stopping index of 0 is possible. Every visited iterate is recorded. The
/// run ends when the rule fires, `k_max` is reached, or an update leaves the
/// admissible ball (partial trace, never an error). With `delta = 0` and
/// [`StopRule::KMaxOnly`] this produces the noise-free reference sequence.
pub fn run(
    problem: &dyn ForwardOperator,
    x0: &GridFunction,
    y_data: &GridFunction,
    delta: f64,
    schedule: &AlphaSchedule,
    stop: &StopRuleConfig,
    cg: &CgSettings,
) -> Result<IterationTrace> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidConfig(format!("delta must be finite and >= 0, got {delta}")));
    }
    match stop.rule {
        StopRule::Posterior | StopRule::Discrepancy | StopRule::APriori { .. } if delta == 0.0 => {
            return Err(Error::InvalidConfig(
                "noise-dependent stopping rules need delta > 0; use KMaxOnly for clean runs".into(),
            ));
        }
        _ => {}
    }
    problem.check_in_domain(x0)?;

    let apriori_n = match stop.rule {
        StopRule::APriori { omega_norm, nu } => {
            Some(apriori_stop_index(schedule, delta, omega_norm, nu)?)
        }
        _ => None,
    };
    let rule_bound = stop.tau * stop.tau * delta * delta;
    let center = problem.domain_center().clone();

    let mut records: Vec<IterationRecord> = Vec::new();
    let mut x = x0.clone();
    let mut alpha = schedule.alpha0();
    let stop_index;
    let stop_reason;

    let mut k = 0usize;
    loop {
        let mut residual = problem.eval(&x)?;
        residual.axpy(-1.0, y_data)?;
        let residual_norm = residual.norm();
        let (stop_functional, cg_y) =
            damped_residual_functional_traced(problem, &x, &residual, alpha, cg)?;
        let error_norm = x.distance(&center).ok();

        let fired = match stop.rule {
            StopRule::Posterior => stop_functional <= rule_bound,
            StopRule::Discrepancy => residual_norm <= stop.tau * delta,
            StopRule::APriori { .. } => k >= apriori_n.expect("a priori index"),
            StopRule::KMaxOnly => false,
        };

        let mut record = IterationRecord {
            k,
            alpha,
            iterate: x.clone(),
            residual_norm,
            stop_functional,
            error_norm,
            cg_iterations: cg_y,
        };

        if fired {
            records.push(record);
            stop_index = k;
            stop_reason = StopReason::RuleFired;
            break;
        }
        if k == stop.k_max {
            records.push(record);
            stop_index = k;
            stop_reason = StopReason::KMaxReached;
            break;
        }

        let (next, cg_x) = irgn_step_traced(problem, &x, x0, y_data, alpha, cg)?;
        record.cg_iterations += cg_x;
        records.push(record);

        if problem.check_in_domain(&next).is_err() {
            stop_index = k;
            stop_reason = StopReason::DomainViolation;
            break;
        }
        x = next;
        alpha /= schedule.ratio();
        k += 1;
    }

    Ok(IterationTrace {
        records,
        stop_index,
        stop_reason,
        delta,
        problem_id: problem.problem_id(),
        schedule: *schedule,
        stop: *stop,
        cg: *cg,
    })
}

/// `beta_k = || alpha (alpha I + F'(x_true)* F'(x_true))^{-1} (x0 - x_true) ||`,
/// the deterministic part of the error propagation. Zero iff `x0 = x_true`.
pub fn beta_k(
    problem: &dyn ForwardOperator,
    x_dagger: &GridFunction,
    x0: &GridFunction,
    alpha: f64,
    cg: &CgSettings,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("beta_k needs alpha > 0, got {alpha}")));
    }
    let e0 = x0.sub(x_dagger)?;
    if e0.norm() == 0.0 {
        return Ok(0.0);
    }
    let sol = cg_solve(|h| problem.normal_x_apply(x_dagger, h), alpha, &e0, cg)?;
    Ok(alpha * sol.solution.norm())
}

/// One row of [`TheoryDiagnostics`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub k: usize,
    pub alpha: f64,
    /// `||x_k^delta - x_k||`, present while the noisy trace has a row `k`.
    pub noise_propagation: Option<f64>,
    /// `delta / sqrt(alpha_k)`, the bound the propagation is checked against.
    pub noise_bound: f64,
    /// Whether `k <= k_tilde`, the range on which the bound is claimed.
    pub within_ktilde: bool,
    /// `|| alpha_k^{1/2} (alpha_k I + B)^{-1/2} (F(x_k) - y) ||` with `B`
    /// linearized at the exact solution; computed for `k <= k_delta`.
    /// Expected of order `delta` at `k_delta` and above it before.
    pub clean_residual_functional: Option<f64>,
    /// `||x_k - x_true||` of the noise-free sequence.
    pub clean_error: f64,
    /// `||x_k - x_true|| / beta_k`; absent when `beta_k` vanishes.
    pub error_to_beta: Option<f64>,
}

/// Side-by-side comparison of a noisy run and its noise-free reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryDiagnostics {
    pub rows: Vec<DiagnosticRow>,
    pub k_delta: usize,
    pub ktilde: usize,
    pub delta: f64,
    /// `||x_{k_delta}^delta - x_true|| / inf_k (||x_k - x_true|| + delta/sqrt(alpha_k))`.
    pub oracle_ratio: f64,
    pub oracle_infimum: f64,
    /// Set when `x0 = x_true` (all quantities collapse to zero) or the
    /// source norm vanishes; ratios are then meaningless.
    pub degenerate: bool,
}

/// Compares a noisy trace against the noise-free reference sequence and
/// evaluates the bounds the convergence theory predicts. Both traces must
/// come from the same problem and schedule; `v_norm` is the range-form
/// source norm driving the comparison index.
pub fn theory_diagnostics(
    trace_noisy: &IterationTrace,
    trace_clean: &IterationTrace,
    problem: &dyn ForwardOperator,
    x_dagger: &GridFunction,
    v_norm: f64,
    c0: f64,
    cg: &CgSettings,
) -> Result<TheoryDiagnostics> {
    if trace_noisy.problem_id != trace_clean.problem_id {
        return Err(Error::TraceMismatch(format!(
            "problem ids differ: {} vs {}",
            trace_noisy.problem_id, trace_clean.problem_id
        )));
    }
    if trace_noisy.schedule != trace_clean.schedule {
        return Err(Error::TraceMismatch("schedules differ".into()));
    }
    if trace_clean.records.is_empty() || trace_noisy.records.is_empty() {
        return Err(Error::TraceMismatch("empty trace".into()));
    }

    let delta = trace_noisy.delta;
    let x0 = &trace_clean.records[0].iterate;
    let degenerate =
        v_norm == 0.0 || x0.distance(x_dagger)? <= 1e-14 * (1.0 + x_dagger.norm());
    let ktilde = if delta > 0.0 && v_norm > 0.0 {
        ktilde_index(&trace_noisy.schedule, delta, v_norm, c0)?
    } else {
        trace_clean.records.len() - 1
    };
    let k_delta = trace_noisy.stop_index;
    let y_clean = problem.eval(x_dagger)?;

    let mut rows = Vec::with_capacity(trace_clean.records.len());
    for clean in &trace_clean.records {
        let k = clean.k;
        let alpha = clean.alpha;
        let noise_propagation = match trace_noisy.records.get(k) {
            Some(noisy) => Some(noisy.iterate.distance(&clean.iterate)?),
            None => None,
        };
        let clean_residual_functional = if k <= k_delta {
            let mut residual = problem.eval(&clean.iterate)?;
            residual.axpy(-1.0, &y_clean)?;
            Some(damped_residual_functional(problem, x_dagger, &residual, alpha, cg)?.sqrt())
        } else {
            None
        };
        let clean_error = clean.iterate.distance(x_dagger)?;
        let beta = beta_k(problem, x_dagger, x0, alpha, cg)?;
        let error_to_beta = if beta > 0.0 { Some(clean_error / beta) } else { None };
        rows.push(DiagnosticRow {
            k,
            alpha,
            noise_propagation,
            noise_bound: delta / alpha.sqrt(),
            within_ktilde: k <= ktilde,
            clean_residual_functional,
            clean_error,
            error_to_beta,
        });
    }

    let numerator = trace_noisy.records[k_delta].iterate.distance(x_dagger)?;
    let oracle_infimum = rows
        .iter()
        .map(|row| row.clean_error + row.noise_bound)
        .fold(f64::INFINITY, f64::min);
    let oracle_ratio = if oracle_infimum > 0.0 { numerator / oracle_infimum } else { 0.0 };

    Ok(TheoryDiagnostics {
        rows,
        k_delta,
        ktilde,
        delta,
        oracle_ratio,
        oracle_infimum,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{diagonal_forward, DiagonalProblem};
    use approx::assert_relative_eq;

    fn scalar_linear() -> crate::problems::DiagonalOperator {
        // n = 1, gamma = 0: F(x) = x with x_true = sin(pi/2) = 1.
        diagonal_forward(DiagonalProblem::new(1, 1.0, 0.0).unwrap())
    }

    #[test]
    fn schedule_recurrence_is_exact_for_halving() {
        let s = AlphaSchedule::halving(1.0).unwrap();
        let alphas: Vec<f64> = s.iter().take(40).collect();
        for k in 1..alphas.len() {
            assert_eq!(alphas[k] * 2.0, alphas[k - 1]);
        }
        assert_eq!(s.alpha(10), 1.0 / 1024.0);
    }

    #[test]
    fn schedule_recurrence_general_ratio_one_ulp() {
        let s = AlphaSchedule::new(3.0, 1.7).unwrap();
        let alphas: Vec<f64> = s.iter().take(30).collect();
        for k in 1..alphas.len() {
            let back = alphas[k] * 1.7;
            assert_relative_eq!(back, alphas[k - 1], max_relative = 1e-15);
        }
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(AlphaSchedule::new(0.0, 2.0).is_err());
        assert!(AlphaSchedule::new(1.0, 1.0).is_err());
        assert!(AlphaSchedule::new(1.0, 0.5).is_err());
    }

    #[test]
    fn apriori_index_enumerations() {
        let s = AlphaSchedule::halving(1.0).unwrap();
        // threshold (1e-4)^{2/2} = 1e-4: first 2^{-k} <= 1e-4 is k = 14.
        assert_eq!(apriori_stop_index(&s, 1e-4, 1.0, 1.0).unwrap(), 14);
        // threshold 0.25: k = 2 (inclusive comparison).
        assert_eq!(apriori_stop_index(&s, 0.25, 1.0, 1.0).unwrap(), 2);
        // threshold above alpha0: 0.
        assert_eq!(apriori_stop_index(&s, 4.0, 1.0, 1.0).unwrap(), 0);
    }

    #[test]
    fn ktilde_enumerations() {
        let s = AlphaSchedule::halving(1.0).unwrap();
        // c0 delta / ||v|| = 5e-4: first 2^{-k} <= 5e-4 is k = 11.
        assert_eq!(ktilde_index(&s, 1e-3, 1.0, 0.5).unwrap(), 11);
        // threshold above alpha0.
        assert_eq!(ktilde_index(&s, 8.0, 1.0, 0.5).unwrap(), 0);
        // threshold exactly 2^{-5}: inclusive comparison, k = 5.
        assert_eq!(ktilde_index(&s, 2.0f64.powi(-5), 1.0, 1.0).unwrap(), 5);
    }

    #[test]
    fn stop_rule_config_validation() {
        assert!(StopRuleConfig::new(StopRule::Posterior, 2.0, 0.1, 60).is_err());
        assert!(StopRuleConfig::new(StopRule::Posterior, 2.5, 0.6, 60).is_err());
        assert!(StopRuleConfig::new(StopRule::Posterior, 2.5, 0.25, 60).is_ok());
    }

    #[test]
    fn irgn_step_scalar_closed_form() {
        let op = scalar_linear();
        let cg = CgSettings::for_dim(1);
        let x_k = GridFunction::zeros(1, 1.0).unwrap();
        let x0 = GridFunction::zeros(1, 1.0).unwrap();
        let y = GridFunction::constant(1, 1.0, 1.0).unwrap();
        let next = irgn_step(&op, &x_k, &x0, &y, 1.0, &cg).unwrap();
        assert_relative_eq!(next.values()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn irgn_step_fixed_point_at_solution() {
        let op = diagonal_forward(DiagonalProblem::standard(8).unwrap());
        let cg = CgSettings::for_dim(8);
        let x_dagger = op.domain_center().clone();
        let y = op.eval(&x_dagger).unwrap();
        let next = irgn_step(&op, &x_dagger, &x_dagger, &y, 0.5, &cg).unwrap();
        assert!(next.distance(&x_dagger).unwrap() <= 1e-14);
    }

    #[test]
    fn stopping_functional_zero_residual() {
        let op = scalar_linear();
        let cg = CgSettings::for_dim(1);
        let x = GridFunction::constant(1, 1.0, 1.0).unwrap();
        let y = op.eval(&x).unwrap();
        let v = stopping_functional(&op, &x, &y, 0.7, &cg).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn stopping_functional_scalar_closed_form() {
        // B = 1 at x = 0 (gamma = 0), residual 1, alpha 1: value 0.5.
        let op = scalar_linear();
        let cg = CgSettings::for_dim(1);
        let x = GridFunction::zeros(1, 1.0).unwrap();
        let y = GridFunction::constant(1, -1.0, 1.0).unwrap(); // F(x) - y = 1
        let v = stopping_functional(&op, &x, &y, 1.0, &cg).unwrap();
        assert_relative_eq!(v, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn beta_scalar_closed_form() {
        let op = scalar_linear();
        let cg = CgSettings::for_dim(1);
        let x_dagger = GridFunction::zeros(1, 1.0).unwrap();
        let x0 = GridFunction::constant(1, 1.0, 1.0).unwrap();
        // A = 1 at x_dagger = 0, e0 = 1, alpha = 1: beta = 1/(1+1) = 0.5.
        let b = beta_k(&op, &x_dagger, &x0, 1.0, &cg).unwrap();
        assert_relative_eq!(b, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn beta_zero_when_guess_is_exact() {
        let op = diagonal_forward(DiagonalProblem::standard(4).unwrap());
        let cg = CgSettings::for_dim(4);
        let x_dagger = op.domain_center().clone();
        let b = beta_k(&op, &x_dagger, &x_dagger, 0.3, &cg).unwrap();
        assert_eq!(b, 0.0);
    }

    #[test]
    fn run_stops_immediately_on_zero_residual() {
        let op = diagonal_forward(DiagonalProblem::standard(6).unwrap());
        let cg = CgSettings::for_dim(6);
        let x0 = op.domain_center().clone();
        let y = op.eval(&x0).unwrap();
        let schedule = AlphaSchedule::halving(op.scale_alpha0()).unwrap();
        let stop = StopRuleConfig::with_defaults(StopRule::Posterior);
        let trace = run(&op, &x0, &y, 0.01, &schedule, &stop, &cg).unwrap();
        assert_eq!(trace.stop_index, 0);
        assert_eq!(trace.stop_reason, StopReason::RuleFired);
        assert_eq!(trace.records.len(), 1);
    }

    #[test]
    fn run_noise_free_fixed_point() {
        let op = diagonal_forward(DiagonalProblem::standard(10).unwrap());
        let cg = CgSettings::for_dim(10);
        let x_dagger = op.domain_center().clone();
        let y = op.eval(&x_dagger).unwrap();
        let schedule = AlphaSchedule::halving(op.scale_alpha0()).unwrap();
        let stop = StopRuleConfig { rule: StopRule::KMaxOnly, tau: 2.5, c0: 0.25, k_max: 25 };
        let trace = run(&op, &x_dagger, &y, 0.0, &schedule, &stop, &cg).unwrap();
        assert_eq!(trace.stop_reason, StopReason::KMaxReached);
        assert_eq!(trace.records.len(), 26);
        for record in &trace.records {
            assert!(record.residual_norm <= 1e-12);
            assert!(record.error_norm.unwrap() <= 1e-12);
        }
    }

    #[test]
    fn run_rejects_noise_rules_without_noise() {
        let op = scalar_linear();
        let cg = CgSettings::for_dim(1);
        let x0 = op.domain_center().clone();
        let y = op.eval(&x0).unwrap();
        let schedule = AlphaSchedule::halving(1.0).unwrap();
        let stop = StopRuleConfig::with_defaults(StopRule::Posterior);
        assert!(run(&op, &x0, &y, 0.0, &schedule, &stop, &cg).is_err());
    }

    #[test]
    fn run_scalar_matches_independent_recurrence() {
        // F(x) = x, x_true = 1, x0 = 0, y_delta = 1 + delta. The update has
        // the closed form x_{k+1} = (1+delta)/(1+alpha_k) and the functional
        // alpha (x - 1 - delta)^2 / (alpha + 1).
        let op = scalar_linear();
        let cg = CgSettings::for_dim(1);
        let delta = 0.01;
        let x0 = GridFunction::zeros(1, 1.0).unwrap();
        let y_delta = GridFunction::constant(1, 1.0 + delta, 1.0).unwrap();
        let schedule = AlphaSchedule::halving(1.0).unwrap();
        let tau = 2.5;
        let stop = StopRuleConfig::with_defaults(StopRule::Posterior);
        let trace = run(&op, &x0, &y_delta, delta, &schedule, &stop, &cg).unwrap();

        // Independent scalar replay.
        let mut x = 0.0f64;
        let mut alpha = 1.0f64;
        let mut expected = Vec::new();
        let mut k_stop = None;
        for k in 0..=stop.k_max {
            let res = x - (1.0 + delta);
            let functional = alpha * res * res / (alpha + 1.0);
            expected.push((x, functional));
            if functional <= tau * tau * delta * delta {
                k_stop = Some(k);
                break;
            }
            x = (1.0 + delta) / (1.0 + alpha);
            alpha /= 2.0;
        }
        let k_stop = k_stop.expect("scalar rule fires");
        assert_eq!(trace.stop_index, k_stop);
        assert_eq!(trace.records.len(), expected.len());
        for (record, (ex, ef)) in trace.records.iter().zip(&expected) {
            assert_relative_eq!(record.iterate.values()[0], *ex, epsilon = 1e-10);
            assert_relative_eq!(record.stop_functional, *ef, epsilon = 1e-10, max_relative = 1e-10);
        }
        trace.verify_posterior_rule().unwrap();
    }

    #[test]
    fn diagnostics_identical_traces_have_zero_propagation() {
        let op = diagonal_forward(DiagonalProblem::standard(8).unwrap());
        let cg = CgSettings::for_dim(8);
        let x_dagger = op.domain_center().clone();
        let mut x0 = x_dagger.clone();
        x0.axpy(0.05, &GridFunction::basis(8, 0, 1.0).unwrap()).unwrap();
        let y = op.eval(&x_dagger).unwrap();
        let schedule = AlphaSchedule::halving(op.scale_alpha0()).unwrap();
        let stop = StopRuleConfig { rule: StopRule::KMaxOnly, tau: 2.5, c0: 0.25, k_max: 12 };
        let clean = run(&op, &x0, &y, 0.0, &schedule, &stop, &cg).unwrap();
        let diag =
            theory_diagnostics(&clean, &clean, &op, &x_dagger, 0.1, 0.25, &cg).unwrap();
        for row in &diag.rows {
            assert_eq!(row.noise_propagation.unwrap(), 0.0);
        }
        assert!(!diag.degenerate);
    }

    #[test]
    fn diagnostics_flag_degenerate_exact_start() {
        let op = diagonal_forward(DiagonalProblem::standard(5).unwrap());
        let cg = CgSettings::for_dim(5);
        let x_dagger = op.domain_center().clone();
        let y = op.eval(&x_dagger).unwrap();
        let schedule = AlphaSchedule::halving(op.scale_alpha0()).unwrap();
        let stop = StopRuleConfig { rule: StopRule::KMaxOnly, tau: 2.5, c0: 0.25, k_max: 5 };
        let clean = run(&op, &x_dagger, &y, 0.0, &schedule, &stop, &cg).unwrap();
        let diag = theory_diagnostics(&clean, &clean, &op, &x_dagger, 0.0, 0.25, &cg).unwrap();
        assert!(diag.degenerate);
        for row in &diag.rows {
            assert!(row.error_to_beta.is_none());
            assert_eq!(row.clean_error, 0.0);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        /// Fuzz the posterior rule across random diagonal problems and noise:
        /// every finished trace must replay its own stopping decision.
        #[test]
        fn posterior_trace_invariant_fuzz(
            n in 1usize..8,
            p in 0.5f64..3.0,
            gamma in 0.0f64..0.2,
            delta_exp in -5.0f64..-1.0,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let op = diagonal_forward(DiagonalProblem::new(n, p, gamma).unwrap());
            let cg = CgSettings::for_dim(n);
            let x_dagger = op.domain_center().clone();
            let y = op.eval(&x_dagger).unwrap();
            let delta = 10f64.powf(delta_exp) * y.norm().max(1e-3);
            let y_noisy =
                crate::problems::add_noise(&y, &crate::problems::NoiseSpec { delta, seed })
                    .unwrap();
            let mut x0 = x_dagger.clone();
            x0.axpy(0.3, &GridFunction::basis(n, seed as usize % n, 1.0).unwrap()).unwrap();

            let schedule = AlphaSchedule::halving(op.scale_alpha0()).unwrap();
            let stop = StopRuleConfig { rule: StopRule::Posterior, tau: 2.5, c0: 0.25, k_max: 30 };
            let trace = run(&op, &x0, &y_noisy, delta, &schedule, &stop, &cg).unwrap();

            proptest::prop_assert!(trace.stop_index < trace.records.len());
            proptest::prop_assert!(trace.records.len() <= stop.k_max + 1);
            if trace.stop_reason == StopReason::RuleFired {
                trace.verify_posterior_rule().unwrap();
            }
        }
    }

    #[test]
    fn diagnostics_reject_mismatched_traces() {
        let op_a = diagonal_forward(DiagonalProblem::standard(5).unwrap());
        let op_b = diagonal_forward(DiagonalProblem::standard(6).unwrap());
        let cg = CgSettings::for_dim(6);
        let mk = |op: &crate::problems::DiagonalOperator| {
            let x = op.domain_center().clone();
            let y = op.eval(&x).unwrap();
            let schedule = AlphaSchedule::halving(op.scale_alpha0()).unwrap();
            let stop = StopRuleConfig { rule: StopRule::KMaxOnly, tau: 2.5, c0: 0.25, k_max: 3 };
            run(op, &x, &y, 0.0, &schedule, &stop, &cg).unwrap()
        };
        let ta = mk(&op_a);
        let tb = mk(&op_b);
        let err = theory_diagnostics(&ta, &tb, &op_a, op_a.domain_center(), 0.1, 0.25, &cg)
            .unwrap_err();
        assert!(matches!(err, Error::TraceMismatch(_)));
    }
}
