//! Fixed points of `m -> E[X_.(m)]`, the map sending a forcing path to the
//! mean of the forced process it drives.
//!
//! [`iterate_monotone`] starts a supersolution at `pi_bar` and a subsolution
//! at `0`; applying the map keeps them ordered and squeezes them together,
//! with gap at most `pi_bar (pi_bar+ lambda_g T)^k / k!` after `k` steps.

use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::fp::{grid, integrate_forced, FpError, Storage};
use crate::model::{JointDist, Model, ModelError, SampledPath};

/// Slack allowed in the ordering checks for rounding in the integrator.
pub const ORDER_TOLERANCE: f64 = 1e-10;
/// `tol` must be at least this multiple of the integrator error estimate.
pub const TOLERANCE_MARGIN: f64 = 10.0;

#[derive(Debug, Error)]
pub enum FixedPointError {
    #[error(transparent)]
    Fp(#[from] FpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("tolerance must be > 0 (got {0})")]
    BadTolerance(f64),
    #[error(
        "tol = {tol} is below {margin} x the integrator error estimate {estimate}; \
         reduce dt or raise tol"
    )]
    ToleranceBelowIntegratorError {
        tol: f64,
        estimate: f64,
        margin: f64,
    },
    #[error("bracket ordering violated at iteration {k}, t = {t}: {detail}")]
    SandwichViolated { k: usize, t: f64, detail: String },
}

impl FixedPointError {
    /// Whether this is a failed numerical certificate rather than bad input.
    pub fn is_certificate_failure(&self) -> bool {
        matches!(
            self,
            FixedPointError::SandwichViolated { .. }
                | FixedPointError::Fp(FpError::MassDefect { .. })
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    /// `sup_t (m+ - m-)` after `k` applications.
    pub gap: f64,
    /// `sup_t |F(m) - m|` over both sequences at step `k`.
    pub residual: f64,
    /// `pi_bar (pi_bar+ lambda_g T)^k / k!`.
    pub bound: f64,
}

#[derive(Debug, Clone)]
pub struct Bracket {
    pub m_minus: SampledPath,
    pub m_plus: SampledPath,
    pub k: usize,
    pub gap: f64,
    pub history: Vec<IterationRecord>,
    /// Largest ordering defect seen, within [`ORDER_TOLERANCE`].
    pub max_order_defect: f64,
}

#[derive(Debug, Clone)]
pub struct MonotoneResult {
    pub bracket: Bracket,
    /// Midpoint of the final bracket.
    pub fixed_point: SampledPath,
    /// `sup_t |F(m) - m|` at the returned path.
    pub residual: f64,
    pub converged: bool,
    /// Sup difference of one application at `dt` versus `dt / 2`.
    pub integrator_error: f64,
}

impl MonotoneResult {
    /// `k,gap,residual,bound` rows.
    pub fn write_report_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "k,gap,residual,bound")?;
        for r in &self.bracket.history {
            writeln!(w, "{},{},{},{}", r.k, r.gap, r.residual, r.bound)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PicardResult {
    pub path: SampledPath,
    pub k: usize,
    /// `sup_t |m_k - m_{k-1}|` at the last step.
    pub last_change: f64,
    pub converged: bool,
}

struct Map<'a> {
    model: &'a Model,
    mu0: &'a JointDist,
    horizon: f64,
    dt: f64,
}

impl Map<'_> {
    fn apply(&self, m: &SampledPath) -> Result<SampledPath, FpError> {
        Ok(integrate_forced(
            self.model,
            self.mu0,
            m,
            self.horizon,
            self.dt,
            Storage::Endpoints,
        )?
        .means)
    }

    fn constant(&self, value: f64) -> Result<SampledPath, FixedPointError> {
        let (steps, h) = grid(self.horizon, self.dt)?;
        Ok(SampledPath::constant(
            value,
            0.0,
            h,
            steps + 1,
            (0.0, self.model.pi_bar()),
        )?)
    }

    /// Sup-norm change of one application at `dt` versus `dt / 2`, on the
    /// coarse grid.
    fn error_estimate(&self, m: &SampledPath) -> Result<f64, FpError> {
        let coarse = self.apply(m)?;
        let fine = integrate_forced(
            self.model,
            self.mu0,
            m,
            self.horizon,
            self.dt / 2.0,
            Storage::Endpoints,
        )?
        .means;
        Ok(coarse.sup_distance(&fine))
    }
}

fn sup_diff(a: &SampledPath, b: &SampledPath) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest `lo - hi` over the grid with its time; positive means `lo > hi`.
fn order_defect(lo: &SampledPath, hi: &SampledPath) -> (f64, f64) {
    lo.values()
        .iter()
        .zip(hi.values())
        .enumerate()
        .map(|(i, (a, b))| (a - b, lo.time(i)))
        .fold(
            (f64::NEG_INFINITY, 0.0),
            |acc, x| if x.0 > acc.0 { x } else { acc },
        )
}

/// `pi_bar (pi_bar+ lambda_g T)^k / k!`.
pub fn gap_bound(model: &Model, horizon: f64, k: usize) -> f64 {
    let c = model.sizes().pi_bar_plus() * model.rates().lambda_g * horizon;
    (1..=k).fold(model.pi_bar(), |b, j| b * c / j as f64)
}

pub fn iterate_monotone(
    model: &Model,
    mu0: &JointDist,
    horizon: f64,
    dt: f64,
    tol: f64,
    k_max: usize,
) -> Result<MonotoneResult, FixedPointError> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(FixedPointError::BadTolerance(tol));
    }
    let map = Map {
        model,
        mu0,
        horizon,
        dt,
    };
    let mut m_plus = map.constant(model.pi_bar())?;
    let mut m_minus = map.constant(0.0)?;

    let integrator_error = map.error_estimate(&m_plus)?;
    if tol < TOLERANCE_MARGIN * integrator_error {
        return Err(FixedPointError::ToleranceBelowIntegratorError {
            tol,
            estimate: integrator_error,
            margin: TOLERANCE_MARGIN,
        });
    }

    let mut gap = sup_diff(&m_plus, &m_minus);
    let mut history = vec![IterationRecord {
        k: 0,
        gap,
        residual: f64::NAN,
        bound: gap_bound(model, horizon, 0),
    }];
    let mut max_order_defect: f64 = 0.0;
    let mut k = 0;
    while gap > tol && k < k_max {
        let (next_plus, next_minus) = rayon::join(|| map.apply(&m_plus), || map.apply(&m_minus));
        let (next_plus, next_minus) = (next_plus?, next_minus?);
        k += 1;
        for (name, lo, hi) in [
            ("m-(k-1) <= m-(k)", &m_minus, &next_minus),
            ("m-(k) <= m+(k)", &next_minus, &next_plus),
            ("m+(k) <= m+(k-1)", &next_plus, &m_plus),
        ] {
            let (defect, t) = order_defect(lo, hi);
            if defect > ORDER_TOLERANCE {
                return Err(FixedPointError::SandwichViolated {
                    k,
                    t,
                    detail: format!("{name} fails by {defect}"),
                });
            }
            max_order_defect = max_order_defect.max(defect);
        }
        let residual = sup_diff(&next_plus, &m_plus).max(sup_diff(&next_minus, &m_minus));
        m_plus = next_plus;
        m_minus = next_minus;
        gap = sup_diff(&m_plus, &m_minus);
        history.push(IterationRecord {
            k,
            gap,
            residual,
            bound: gap_bound(model, horizon, k),
        });
    }

    let fixed_point = m_plus.zip_with(&m_minus, (0.0, model.pi_bar()), |a, b| 0.5 * (a + b))?;
    let residual = sup_diff(&map.apply(&fixed_point)?, &fixed_point);
    Ok(MonotoneResult {
        converged: gap <= tol,
        bracket: Bracket {
            m_minus,
            m_plus,
            k,
            gap,
            history,
            max_order_defect,
        },
        fixed_point,
        residual,
        integrator_error,
    })
}

/// Plain successive substitution `m <- F(m)`, from `start` or `pi_bar`.
/// Stops when consecutive iterates differ by at most `tol`.
pub fn picard_iterate(
    model: &Model,
    mu0: &JointDist,
    horizon: f64,
    dt: f64,
    tol: f64,
    k_max: usize,
    start: Option<&SampledPath>,
) -> Result<PicardResult, FixedPointError> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(FixedPointError::BadTolerance(tol));
    }
    let map = Map {
        model,
        mu0,
        horizon,
        dt,
    };
    let mut path = match start {
        Some(p) => p.clone(),
        None => map.constant(model.pi_bar())?,
    };
    let mut last_change = f64::INFINITY;
    let mut k = 0;
    while k < k_max {
        let next = map.apply(&path)?;
        last_change = next.sup_distance(&path);
        path = next;
        k += 1;
        if last_change <= tol {
            break;
        }
    }
    Ok(PicardResult {
        path,
        k,
        last_change,
        converged: last_change <= tol,
    })
}
