//! Error type shared by all solver modules.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two vectors were combined that do not live on the same grid.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A NaN or infinity showed up where a finite number was required.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// The conjugate gradient loop ran out of iterations.
    #[error("conjugate gradient stalled after {iterations} iterations (relative residual {residual:.3e})")]
    CgDidNotConverge { iterations: usize, residual: f64 },

    /// The conjugate gradient loop met a direction of non-positive curvature;
    /// the operator was not positive definite after shifting.
    #[error("conjugate gradient breakdown after {iterations} iterations (non-positive curvature)")]
    CgBreakdown { iterations: usize },

    /// Dense assembly was requested for a dimension above the hard cap.
    #[error("dense assembly refused: dimension {dim} exceeds the cap {cap}")]
    DenseDimension { dim: usize, cap: usize },

    /// A point left the admissible ball around the domain center.
    #[error("point left the domain ball: distance {distance:.6e} exceeds radius {radius:.6e}")]
    DomainViolation { distance: f64, radius: f64 },

    /// Rescaling a numerically zero operator is meaningless.
    #[error("operator has (numerically) zero norm; nothing to rescale")]
    DegenerateOperator,

    /// A tridiagonal factorization hit a non-positive pivot.
    #[error("tridiagonal matrix lost positive definiteness at row {row}")]
    NotPositiveDefinite { row: usize },

    /// The constructed initial guess is too far from the exact solution for
    /// the ball condition rho > 4*||x0 - x_true|| to hold.
    #[error("initial guess violates the ball condition: ||x0 - x_true|| = {achieved:.6e} > rho/4 = {limit:.6e}; shrink the source norm")]
    SourceOutsideBall { achieved: f64, limit: f64 },

    /// A parameter failed validation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Two iteration traces that should describe the same experiment do not.
    #[error("traces are not comparable: {0}")]
    TraceMismatch(String),
}
