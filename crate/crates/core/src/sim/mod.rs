//! Exact stochastic simulation.
//!
//! * [`finite_n`]: the `N`-household system with mean-field global
//!   infections, driven by an exact event-by-event engine over indexed
//!   trees.
//! * [`isolated`]: one household with local infections only.
//! * [`graphical`]: the forced process built from three Poisson point
//!   processes, which couples runs with ordered forcings monotonically.
//! * [`branching`]: the household-level branching process used to minorize
//!   the early epidemic.

pub mod branching;
pub mod finite_n;
pub mod graphical;
pub mod isolated;

use thiserror::Error;

use crate::model::ModelError;

pub use branching::{
    fit_growth, simulate_branching, BranchingConfig, BranchingTrace, GrowthFit, HouseholdLifetime,
};
pub use finite_n::{
    run_population, simulate_finite_n, simulate_finite_n_with, EventTrace, FiniteNConfig,
    InitialCondition, JointRecording, Population,
};
pub use graphical::{
    simulate_forced_coupled, CoupledPaths, GraphicalEvents, PointEvent, PointKind, StepPath,
};
pub use isolated::{isolated_integral, simulate_isolated, IsolatedPath};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("need at least one household")]
    NoHouseholds,
    #[error("household {index}: {infected} infected exceeds size {size}")]
    InvalidInitial {
        index: usize,
        size: usize,
        infected: usize,
    },
    #[error("initial arrays have different lengths ({sizes} sizes, {infected} infected)")]
    InitialLengthMismatch { sizes: usize, infected: usize },
    #[error("horizon must be finite and >= 0 (got {0})")]
    BadHorizon(f64),
    #[error("sample spacing must be > 0 (got {0})")]
    BadSampleSpacing(f64),
    #[error("forcing path must lie in [0, {pi_bar}] (found {value})")]
    ForcingOutOfRange { value: f64, pi_bar: f64 },
    #[error("lower forcing exceeds upper forcing at t = {t} ({low} > {high})")]
    ForcingOrder { t: f64, low: f64, high: f64 },
    #[error("initial counts must satisfy x0_low <= x0_high <= n (got {low}, {high}, n = {n})")]
    InitialOrder { low: usize, high: usize, n: usize },
    #[error("discount p must lie in [0, 1) (got {0})")]
    BadDiscount(f64),
    #[error("coupling violated at t = {t}: lower path {low}, upper path {high}")]
    CouplingViolation { t: f64, low: usize, high: usize },
    #[error("population audit failed: {0}")]
    Audit(String),
}

/// Uniform sample times `0, dt, 2 dt, ...` up to `horizon` inclusive
/// (the last point snaps to the horizon when within rounding).
pub(crate) fn sample_times(horizon: f64, dt: f64) -> Result<Vec<f64>, SimError> {
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(SimError::BadHorizon(horizon));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SimError::BadSampleSpacing(dt));
    }
    let steps = (horizon / dt + 1e-9).floor() as usize;
    Ok((0..=steps).map(|j| j as f64 * dt).collect())
}
