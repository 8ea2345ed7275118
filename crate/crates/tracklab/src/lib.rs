//! Desk-scale autonomous-racing trajectory optimization laboratory.
//!
//! The crate simulates the full learn-and-optimize cycle for minimum-lap-time
//! racing under uncertain vehicle dynamics:
//!
//! * [`track`] — closed race tracks (centerline, curvature, width) and a
//!   deterministic random-track generator,
//! * [`dynamics`] — Frenet-frame bicycle model with a simplified Pacejka tire
//!   model and pluggable residual corrections,
//! * [`wavelet`] — Daubechies-4 wavelet parameterization of raceline profiles,
//! * [`gp`] — Gaussian-process regression (exact and inducing-point) used for
//!   residual dynamics learning and as the lap-time surrogate,
//! * [`planner`] — two-stage nominal raceline planner (min-curvature path +
//!   forward/backward velocity profile),
//! * [`controller`] — linear-time-varying MPC reference tracker,
//! * [`simenv`] — closed-loop simulation worlds, lap timing, data logging,
//! * [`bo`] — Bayesian optimization of raceline parameters with an LCB
//!   acquisition over a lap-time surrogate,
//! * [`iterate`] — the iterative learning cycle plus empirical theory checks,
//! * [`harness`] — scenario configuration, baseline methods, batteries and
//!   plain-text report generation.
//!
//! Run `cargo run --release -- --help` for the CLI, or look at the `examples/`
//! directory: each file there is a runnable demonstration of one capability.

pub mod bo;
pub mod controller;
pub mod dynamics;
pub mod gp;
pub mod harness;
pub mod iterate;
pub mod planner;
pub mod simenv;
pub mod solver;
pub mod track;
pub mod wavelet;

pub use dynamics::{ControlInput, VehicleParams, VehicleState};
pub use track::Track;
pub use wavelet::TrajectoryProfiles;

/// Crate-wide error type aggregating per-module failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Track(#[from] track::TrackError),
    #[error(transparent)]
    Dynamics(#[from] dynamics::DynamicsError),
    #[error(transparent)]
    Wavelet(#[from] wavelet::WaveletError),
    #[error(transparent)]
    Gp(#[from] gp::GpError),
    #[error(transparent)]
    Plan(#[from] planner::PlanError),
    #[error(transparent)]
    Sim(#[from] simenv::SimError),
    #[error(transparent)]
    Config(#[from] harness::ConfigError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
