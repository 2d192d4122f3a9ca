//! Error types shared across the solver stack.

use thiserror::Error;

/// Everything that can go wrong while building problems or running solvers.
///
/// Solver failures carry enough context for a post-mortem: the iteration
/// trace stays attached to the variant so callers can serialize it even
/// when the run is abandoned.
#[derive(Debug, Error)]
pub enum MfgError {
    /// A constructor argument violated a documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A linear solve did not reach the requested residual.
    #[error("linear solver stalled: residual {residual:.3e} after {iterations} iterations")]
    LinearSolve { residual: f64, iterations: usize },

    /// Ergodic HJB continuation ran out of discount levels before the
    /// residual target was met. The best iterate is kept for inspection.
    #[error("ergodic HJB did not converge: residual {residual:.3e} (target {target:.3e})")]
    HjbNoConvergence { residual: f64, target: f64 },

    /// Newton's method failed to reduce the residual at some discount level.
    #[error("Newton iteration stalled at discount {delta:.3e}: residual {residual:.3e}")]
    NewtonStalled { delta: f64, residual: f64 },

    /// The Fokker-Planck operator kernel looks degenerate (dimension != 1).
    #[error("invariant-density kernel not simple: {0}")]
    KernelNotSimple(String),

    /// Fixed-point iteration exhausted its budget without meeting the
    /// self-consistency tolerance.
    #[error("fixed point stagnated at mollifier level {level}: update norm {update:.3e}")]
    Stagnation { level: u32, update: f64 },

    /// The density blew past the configured sup-norm ceiling, the discrete
    /// signature of mass concentration.
    #[error("density concentration: sup-norm {linf:.3e} exceeded ceiling {ceiling:.3e}")]
    Concentration { linf: f64, ceiling: f64 },

    /// Imaginary-time flow grew without bound before renormalization,
    /// the discrete signature of a collapsing (supercritical) ground state.
    #[error("supercritical collapse: pre-normalization norm {norm:.3e} exceeded ceiling {ceiling:.3e}")]
    SupercriticalCollapse { norm: f64, ceiling: f64 },

    /// Normalized flow ran out of iterations before reaching its residual
    /// target.
    #[error("flow did not converge: residual {residual:.3e} (target {target:.3e})")]
    FlowNoConvergence { residual: f64, target: f64 },

    /// The requested run sits in a regime the solver refuses without an
    /// explicit probing override.
    #[error("regime not solvable without probe override: {0}")]
    RegimeNotSupported(String),

    /// Config file could not be parsed or failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem or serialization trouble while writing/reading bundles.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MfgError>;
