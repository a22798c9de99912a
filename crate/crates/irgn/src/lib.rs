//! Iteratively regularized Gauss-Newton (IRGN) solver for nonlinear
//! ill-posed operator equations `F(x) = y` from noisy data `y_delta` with
//! `||y_delta - y|| <= delta`.
//!
//! Ill-posed here means the solution does not depend continuously on the
//! data: without regularization, arbitrarily small noise can produce
//! arbitrarily large solution error. The method iterates
//!
//! ```text
//! x_{k+1} = x_k - (alpha_k I + F'(x_k)* F'(x_k))^{-1}
//!                 [ F'(x_k)*(F(x_k) - y_delta) + alpha_k (x_k - x0) ]
//! ```
//!
//! with a geometric parameter schedule `alpha_k` and stops at the first `k`
//! where the damped residual functional
//! `alpha_k ( r_k, (alpha_k I + F'(x_k)F'(x_k)*)^{-1} r_k )` drops to
//! `tau^2 delta^2` — a rule that only uses computable quantities yet
//! recovers order-optimal convergence rates `delta^{nu/(1+nu)}` when the
//! initial error satisfies a source condition of smoothness `nu`.
//!
//! The crate is organized along that pipeline:
//!
//! * [`hilbert`] — weighted grid vectors, matrix-free conjugate gradients,
//!   Krylov operator-norm estimation, dense Jacobian assembly.
//! * [`operator`] — the [`operator::ForwardOperator`] contract (`F`, `F'h`,
//!   `F'*w`, ball radius, Lipschitz constant, scaling level) and probes that
//!   verify it: adjoint identity, Taylor remainder, Lipschitz estimation,
//!   rescaling.
//! * [`gauss_newton`] — the iteration, stopping rules, per-iteration traces
//!   and theory diagnostics.
//! * [`problems`] — an elliptic coefficient-identification problem, a
//!   closed-form diagonal benchmark, source-condition construction and
//!   exact-level noise.
//!
//! # Quick start
//!
//! Identify the exact solution of the diagonal benchmark from data with 0.1%
//! noise:
//!
//! ```
//! use irgn::gauss_newton::{run, AlphaSchedule, StopRule, StopRuleConfig};
//! use irgn::hilbert::CgSettings;
//! use irgn::operator::ForwardOperator;
//! use irgn::problems::{
//!     add_noise, diagonal_forward, make_source_with_initial_error, DiagonalProblem, NoiseSpec,
//!     SourceForm,
//! };
//!
//! let op = diagonal_forward(DiagonalProblem::standard(32)?);
//! let x_true = op.domain_center().clone();
//! let y = op.eval(&x_true)?;
//!
//! // Initial guess satisfying a source condition, 0.1 away from the truth.
//! let source = make_source_with_initial_error(
//!     &op, &x_true, SourceForm::Power { nu: 1.0 }, 7, 0.1,
//! )?;
//!
//! let delta = 1e-3 * y.norm();
//! let y_noisy = add_noise(&y, &NoiseSpec { delta, seed: 1 })?;
//!
//! let schedule = AlphaSchedule::halving(op.scale_alpha0())?;
//! let stop = StopRuleConfig::with_defaults(StopRule::Posterior);
//! let cg = CgSettings::for_dim(32);
//! let trace = run(&op, &source.x0, &y_noisy, delta, &schedule, &stop, &cg)?;
//!
//! let final_error = trace.error_at_stop().unwrap();
//! assert!(final_error < 0.5 * source.initial_error);
//! # Ok::<(), irgn::Error>(())
//! ```

// `!(x > 0.0)` is used for parameter validation throughout: unlike
// `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gauss_newton;
pub mod hilbert;
pub mod operator;
pub mod problems;

pub use error::{Error, Result};
pub use gauss_newton::{
    apriori_stop_index, beta_k, damped_residual_functional, irgn_step, ktilde_index, run,
    stopping_functional, theory_diagnostics, AlphaSchedule, IterationRecord, IterationTrace,
    StopReason, StopRule, StopRuleConfig,
};
pub use hilbert::{
    cg_solve, dense_jacobian, power_iteration_norm, CgSettings, CgSolution, GridFunction,
};
pub use operator::{
    adjoint_check, lipschitz_probe, random_ball_point, rescale, taylor_remainder_check,
    ForwardOperator, Rescaled,
};
pub use problems::{
    add_noise, diagonal_forward, elliptic_forward, make_source_initial_guess,
    make_source_with_initial_error, make_source_with_norm, DiagonalProblem, EllipticProblem,
    NoiseSpec, SourceForm, SourceOutcome, SourceSpec,
};

// The guide's code listings double as doctests, so the book cannot drift
// from the API. `mdbook build book` renders the same files.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/grid-functions.md")]
    mod grid_functions {}
    #[doc = include_str!("../../../book/src/forward-operators.md")]
    mod forward_operators {}
    #[doc = include_str!("../../../book/src/iteration.md")]
    mod iteration {}
    #[doc = include_str!("../../../book/src/stopping-rules.md")]
    mod stopping_rules {}
    #[doc = include_str!("../../../book/src/test-problems.md")]
    mod test_problems {}
    #[doc = include_str!("../../../book/src/benchmark-harness.md")]
    mod benchmark_harness {}
}
