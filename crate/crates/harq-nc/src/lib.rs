//! Closed-loop simulation of linear-quadratic control over a lossy link with
//! HARQ retransmissions.
//!
//! A sensor-side encoder runs a Kalman filter and decides, step by step,
//! whether to transmit its current state estimate or retransmit a previously
//! failed one (retransmissions succeed more often because the receiver
//! combines copies). An actuator-side decoder runs a switching filter over
//! whatever arrives and applies certainty-equivalent state feedback. The
//! crate provides:
//!
//! - [`model`] — scenario data model (system matrices, costs, channel, horizon)
//!   with JSON I/O and validation,
//! - [`lqr`] — backward Riccati pass producing the gain/weight schedules,
//! - [`estimator`] — encoder-side Kalman filter and covariance schedules,
//! - [`channel`] — packet-erasure channel with retransmission bookkeeping,
//! - [`encoder`] — the threshold switching rule deciding TX vs RTX,
//! - [`decoder`] — receiver-side switching filter and control law,
//! - [`dp_oracle`] — grid-based value iteration for scalar systems, used to
//!   evaluate the exact decision residual and audit the one-step rule,
//! - [`sim`] — closed-loop episodes, Monte Carlo evaluation, baselines, and
//!   trace/summary export.
//!
//! The `harq-nc` binary exposes all of it on the command line.

pub mod channel;
pub mod decoder;
pub mod dp_oracle;
pub mod encoder;
pub mod estimator;
pub mod lqr;
pub mod model;
pub mod rng;
pub mod sim;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Scenario document could not be read or parsed.
    #[error("parse error: {0}")]
    Parse(String),
    /// Scenario parsed but violates the data-model invariants.
    #[error("invalid scenario: {}", crate::model::format_violations(.0))]
    Validation(Vec<model::Violation>),
    /// A linear-algebra step failed (singular or ill-conditioned matrix).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Operation not supported for this scenario (e.g. non-scalar DP).
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// A cross-module protocol invariant was broken mid-run.
    #[error("protocol violation: {0}")]
    Protocol(String),
    /// Index outside the schedule horizon.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
pub(crate) mod test_fixtures {
    pub(crate) fn pendulum_path() -> std::path::PathBuf {
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/pendulum.json")
    }
}
