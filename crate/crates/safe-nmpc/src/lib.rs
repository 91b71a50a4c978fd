//! Tube-based robust nonlinear model predictive control for safe navigation.
//!
//! The crate is organized as a pipeline:
//!
//! * [`model`] — plant dynamics, constraint sets, reference trajectories, and
//!   numerical integration.
//! * [`conic`] — small-scale LMI feasibility checking, SDP/LP solving, and
//!   multiplier bisection used by the offline design stage.
//! * [`synthesis`] — offline design of terminal ingredients, contraction
//!   metrics, tube parameters, and tightening constants.
//! * [`tube`] — tube dynamics, incremental Lyapunov evaluation, the ancillary
//!   feedback law, and terminal-set membership.
//! * [`ocp`] — the receding-horizon optimal control problems solved online by
//!   multiple-shooting SQP, plus candidate-solution construction.
//! * [`observer`] — the Luenberger-style state estimator used by the
//!   output-feedback controller.
//! * [`sim`] — deterministic closed-loop simulation under bounded disturbance
//!   and measurement noise.
//! * [`verify`] — numeric property checks that exercise the invariance and
//!   descent arguments the design rests on.
//! * [`cli`] — the `synth` / `simulate` / `verify` / `report` command surface.

pub mod cli;
pub mod conic;
pub mod model;
pub mod observer;
pub mod ocp;
pub mod sim;
pub mod synthesis;
pub mod tube;
pub mod verify;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent dimensions, malformed configs, bad registry names.
    #[error("configuration error: {0}")]
    Config(String),
    /// Non-finite values or failed factorizations encountered mid-computation.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A synthesis problem or optimal control problem admits no solution.
    #[error("infeasible: {0}")]
    Infeasible(String),
    /// Filesystem or serialization failure.
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
