//! Finite-`N` systems against their mean-field limit.
//!
//! For each population size, independent replicas of the `N`-household
//! process are compared with the nonlinear forward equation: the mean
//! infected per household along a probe grid, and the time-`T` law of a
//! typical household.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fp::{integrate_nonlinear, FpError, FpTrajectory, Storage};
use crate::model::{total_variation, JointDist, Model};
use crate::rng::{derive_seed, replica_rng};
use crate::sim::{
    simulate_finite_n_with, FiniteNConfig, InitialCondition, JointRecording, SimError,
};
use crate::stats::{fit_slope, mean_and_se};

pub const MIN_SIZES: usize = 3;
pub const MIN_SPREAD: f64 = 16.0;

#[derive(Debug, Error)]
pub enum ChaosError {
    #[error("need at least {min} population sizes spanning a factor >= {spread} (got {got:?})")]
    InsufficientSpread {
        got: Vec<usize>,
        min: usize,
        spread: f64,
    },
    #[error("need at least 2 replicas per population size (got {0})")]
    TooFewReplicas(usize),
    #[error(transparent)]
    Fp(#[from] FpError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone)]
pub struct ChaosConfig {
    pub populations: Vec<usize>,
    pub replicas: usize,
    pub horizon: f64,
    /// Spacing of the probe times `0, dt, ..., T`.
    pub probe_dt: f64,
    pub fp_dt: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChaosRow {
    pub households: usize,
    /// Replica average of `sup_t |mean_N(t) - E[X(t)]|` over probe times.
    pub mean_error: f64,
    pub mean_error_se: f64,
    /// TV between the limit law at `T` and the household law pooled over
    /// all households and replicas. Its true value is `O(1/N)`, so at modest
    /// replica counts it mostly measures sampling noise.
    pub tv_pooled: f64,
    /// Replica average of the TV of each replica's empirical law at `T`.
    pub tv_empirical: f64,
    pub replicas: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChaosReport {
    pub rows: Vec<ChaosRow>,
    /// Least-squares slope of `log mean_error` against `log N`.
    pub slope: f64,
    /// `tv_empirical` strictly decreases with `N`.
    pub tv_decreasing: bool,
}

impl ChaosReport {
    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(
            w,
            "households,mean_error,mean_error_se,tv_pooled,tv_empirical,replicas"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.households,
                r.mean_error,
                r.mean_error_se,
                r.tv_pooled,
                r.tv_empirical,
                r.replicas
            )?;
        }
        Ok(())
    }
}

pub fn check_populations(populations: &[usize]) -> Result<(), ChaosError> {
    let lo = populations.iter().copied().min().unwrap_or(0);
    let hi = populations.iter().copied().max().unwrap_or(0);
    if populations.len() < MIN_SIZES || lo == 0 || (hi as f64) < MIN_SPREAD * lo as f64 {
        return Err(ChaosError::InsufficientSpread {
            got: populations.to_vec(),
            min: MIN_SIZES,
            spread: MIN_SPREAD,
        });
    }
    Ok(())
}

/// Runs the study from i.i.d. households with law `mu0`. Replica `r` at
/// population size `N` always uses the same random stream.
pub fn run_chaos(
    model: &Model,
    mu0: &JointDist,
    config: &ChaosConfig,
) -> Result<(ChaosReport, FpTrajectory), ChaosError> {
    check_populations(&config.populations)?;
    if config.replicas < 2 {
        return Err(ChaosError::TooFewReplicas(config.replicas));
    }
    let limit = integrate_nonlinear(model, mu0, config.horizon, config.fp_dt, Storage::Endpoints)?;
    let limit_law = limit.final_state().weights();
    let sim_config = FiniteNConfig {
        horizon: config.horizon,
        sample_dt: config.probe_dt,
        record_joint: JointRecording::Final,
    };

    let mut rows = Vec::with_capacity(config.populations.len());
    for &households in &config.populations {
        let init = InitialCondition::Iid {
            law: mu0.clone(),
            households,
        };
        let seed = derive_seed(config.seed, households as u64);
        let per_replica: Vec<(f64, Vec<f64>)> = (0..config.replicas as u64)
            .into_par_iter()
            .map(|r| {
                let mut rng = replica_rng(seed, r);
                let trace = simulate_finite_n_with(model, &init, &sim_config, &mut rng)?;
                let err = trace
                    .times
                    .iter()
                    .zip(&trace.mean_infected)
                    .map(|(&t, &m)| (m - limit.means.eval(t)).abs())
                    .fold(0.0, f64::max);
                Ok((err, trace.joint.into_iter().last().unwrap_or_default()))
            })
            .collect::<Result<_, SimError>>()?;

        let errors: Vec<f64> = per_replica.iter().map(|(e, _)| *e).collect();
        let est = mean_and_se(&errors);
        let mut pooled = vec![0.0; limit_law.len()];
        let mut tv_sum = 0.0;
        for (_, law) in &per_replica {
            for (p, w) in pooled.iter_mut().zip(law) {
                *p += w / config.replicas as f64;
            }
            tv_sum += total_variation(law, limit_law);
        }
        rows.push(ChaosRow {
            households,
            mean_error: est.mean,
            mean_error_se: est.std_error,
            tv_pooled: total_variation(&pooled, limit_law),
            tv_empirical: tv_sum / config.replicas as f64,
            replicas: config.replicas,
        });
    }

    let mut sorted = rows.clone();
    sorted.sort_by_key(|r| r.households);
    let x: Vec<f64> = sorted.iter().map(|r| (r.households as f64).ln()).collect();
    let y: Vec<f64> = sorted.iter().map(|r| r.mean_error.ln()).collect();
    let tv_decreasing = sorted
        .windows(2)
        .all(|w| w[1].tv_empirical < w[0].tv_empirical);
    Ok((
        ChaosReport {
            slope: fit_slope(&x, &y),
            rows,
            tv_decreasing,
        },
        limit,
    ))
}
