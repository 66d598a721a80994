//! Stationary laws under constant forcing, `R0`, the endemic level `m*`
//! and the Malthusian growth rate of the household branching process.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{JointDist, Model, ModelError};
use crate::rng::replica_rng;
use crate::sim::{isolated_integral, simulate_isolated};
use crate::stats::{mean_and_se, Estimate};

/// Rows above this size use log-space products.
const LOG_SPACE_ABOVE: usize = 50;
const MAX_BISECTIONS: usize = 400;
/// Points on which `mu_bar_inf(m) - m` must change sign exactly once.
const SIGN_GRID: usize = 64;
/// `(1 - p) R0` within this of 1 counts as the critical boundary, `r = 0`.
const CRITICAL_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EquilibriumError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("forcing m = {m} outside [0, {pi_bar}]")]
    ForcingOutOfRange { m: f64, pi_bar: f64 },
    #[error("tolerance must be > 0 (got {0})")]
    BadTolerance(f64),
    #[error("step h = {h} must lie in (0, {max}]")]
    BadStep { h: f64, max: f64 },
    #[error("need at least {min} replicas (got {got})")]
    TooFewReplicas { got: usize, min: usize },
    #[error("discount p must lie in [0, 1) (got {0})")]
    BadDiscount(f64),
    #[error(
        "no endemic bracket: g(m) = mu_bar_inf(m) - m changes sign {sign_changes} times on [{lo}, {hi}] \
         (g(lo) = {g_lo}, g(hi) = {g_hi}, R0 = {r0})"
    )]
    BracketFailure {
        lo: f64,
        hi: f64,
        g_lo: f64,
        g_hi: f64,
        sign_changes: usize,
        r0: f64,
    },
    #[error(
        "no growth: (1 - p) R0 = {transform_at_zero} <= 1, so no Malthusian rate r >= 0 exists"
    )]
    NoGrowth { transform_at_zero: f64 },
    #[error("self-test failed: transform(0, 0) = {transform} but R0 = {r0}")]
    SelfTest { transform: f64, r0: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Subcritical,
    Critical,
    Supercritical,
}

impl Regime {
    pub fn of(r0: f64) -> Self {
        if (r0 - 1.0).abs() <= CRITICAL_TOL {
            Regime::Critical
        } else if r0 < 1.0 {
            Regime::Subcritical
        } else {
            Regime::Supercritical
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumReport {
    pub r0: f64,
    pub m_star: f64,
    pub regime: Regime,
    pub malthusian_r: Option<f64>,
    pub n_max: usize,
    #[serde(skip)]
    pub mu_star: JointDist,
}

fn check_m(model: &Model, m: f64) -> Result<(), EquilibriumError> {
    let pi_bar = model.pi_bar();
    if !(m.is_finite() && (0.0..=pi_bar * (1.0 + 1e-12)).contains(&m)) {
        return Err(EquilibriumError::ForcingOutOfRange { m, pi_bar });
    }
    Ok(())
}

/// Unnormalized stationary row of size `n`: `w[l+1] / w[l] = up(l) / down(l+1)`.
fn stationary_row(model: &Model, n: usize, m: f64) -> Vec<f64> {
    let mut row = vec![0.0; n + 1];
    if n > LOG_SPACE_ABOVE {
        let mut logs = vec![0.0; n + 1];
        for l in 0..n {
            logs[l + 1] = logs[l] + model.up_rate(n, l, m).ln() - model.down_rate(l + 1).ln();
        }
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (w, lw) in row.iter_mut().zip(&logs) {
            *w = (lw - top).exp();
        }
    } else {
        row[0] = 1.0;
        for l in 0..n {
            row[l + 1] = row[l] * model.up_rate(n, l, m) / model.down_rate(l + 1);
        }
    }
    row
}

/// Stationary law of the forced process with constant forcing `m`.
pub fn stationary_dist(model: &Model, m: f64) -> Result<JointDist, EquilibriumError> {
    check_m(model, m)?;
    Ok(JointDist::from_conditional(
        model.sizes_arc().clone(),
        |n| stationary_row(model, n, m),
    )?)
}

/// Largest relative defect of `up(l) mu[n,l] = down(l+1) mu[n,l+1]` over
/// all rows.
pub fn balance_residual(model: &Model, mu: &JointDist, m: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for n in 1..=model.n_max() {
        let row = mu.row(n);
        for l in 0..n {
            let a = model.up_rate(n, l, m) * row[l];
            let b = model.down_rate(l + 1) * row[l + 1];
            let scale = a.abs().max(b.abs());
            if scale > 0.0 {
                worst = worst.max((a - b).abs() / scale);
            }
        }
    }
    worst
}

/// `E[X_inf(m)]`.
pub fn mu_bar_inf(model: &Model, m: f64) -> Result<f64, EquilibriumError> {
    Ok(stationary_dist(model, m)?.mean_infected())
}

fn size_biased_average(model: &Model, mut per_size: impl FnMut(usize) -> f64) -> f64 {
    let sizes = model.sizes();
    let mut total = 0.0;
    let mut mass = 0.0;
    for (n, p) in sizes.size_biased().iter().enumerate() {
        if *p > 0.0 {
            total += p * per_size(n + 1);
            mass += p;
        }
    }
    total / mass
}

/// `(lambda_g / gamma) sum_n pi+(n) [1 + sum_{l=1}^{n-1} (lambda_l/gamma)^l prod_{j=1}^l (1 - j/n)]`.
pub fn r0_formula(model: &Model) -> f64 {
    let r = model.rates();
    let ratio = r.lambda_l / r.gamma;
    r.lambda_g / r.gamma
        * size_biased_average(model, |n| {
            let nf = n as f64;
            let mut term = 1.0;
            let mut sum = 1.0;
            for l in 1..n {
                term *= ratio * (1.0 - l as f64 / nf);
                sum += term;
            }
            sum
        })
}

/// `psi(n, 1)` from `psi(n, n) = 1`, `psi(n, x) = 1 + (lambda_l/gamma)(1 - x/n) psi(n, x+1)`.
pub fn psi_one(model: &Model, n: usize) -> f64 {
    let r = model.rates();
    let ratio = r.lambda_l / r.gamma;
    let nf = n as f64;
    let mut psi = 1.0;
    for x in (1..n).rev() {
        psi = 1.0 + ratio * (1.0 - x as f64 / nf) * psi;
    }
    psi
}

pub fn r0_psi(model: &Model) -> f64 {
    let r = model.rates();
    r.lambda_g / r.gamma * size_biased_average(model, |n| psi_one(model, n))
}

pub const MIN_R0_REPLICAS: usize = 1000;

/// `R0 = (lambda_g / pi_bar) E[nu int_0^inf I(t) dt]` with `nu ~ pi` and
/// one initial infected, by simulation.
pub fn r0_montecarlo(
    model: &Model,
    replicas: usize,
    seed: u64,
) -> Result<Estimate, EquilibriumError> {
    if replicas < MIN_R0_REPLICAS {
        return Err(EquilibriumError::TooFewReplicas {
            got: replicas,
            min: MIN_R0_REPLICAS,
        });
    }
    let r = model.rates();
    if r.lambda_g == 0.0 {
        return Ok(Estimate {
            mean: 0.0,
            std_error: 0.0,
        });
    }
    let sizes = WeightedIndex::new(model.sizes().probs()).expect("pi has mass");
    let scale = r.lambda_g / model.pi_bar();
    let samples: Vec<f64> = (0..replicas as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(seed, i);
            let n = sizes.sample(&mut rng) + 1;
            scale * n as f64 * isolated_integral(model, n, 1, &mut rng).expect("valid start")
        })
        .collect();
    Ok(mean_and_se(&samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivativeCheck {
    /// `(mu_bar_inf(h) - mu_bar_inf(0)) / h`.
    pub quotient: f64,
    /// `2 q(h/2) - q(h)`.
    pub richardson: f64,
}

/// One-sided difference quotient of `mu_bar_inf` at `0`, whose limit is `R0`.
pub fn r0_derivative_check(model: &Model, h: f64) -> Result<DerivativeCheck, EquilibriumError> {
    let max = model.pi_bar() / 10.0;
    if !(h > 0.0 && h <= max) {
        return Err(EquilibriumError::BadStep { h, max });
    }
    let base = mu_bar_inf(model, 0.0)?;
    let q = |h: f64| -> Result<f64, EquilibriumError> { Ok((mu_bar_inf(model, h)? - base) / h) };
    let quotient = q(h)?;
    let richardson = 2.0 * q(h / 2.0)? - quotient;
    Ok(DerivativeCheck {
        quotient,
        richardson,
    })
}

/// Endemic level `m*`, the positive root of `mu_bar_inf(m) = m`, or `0`
/// when `R0 <= 1`. The returned `m*` satisfies `|mu_bar_inf(m*) - m*| <= tol`.
pub fn find_m_star(model: &Model, tol: f64) -> Result<EquilibriumReport, EquilibriumError> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(EquilibriumError::BadTolerance(tol));
    }
    let r0 = r0_formula(model);
    let regime = Regime::of(r0);
    let malthusian_r = malthusian_rate(model, 0.0).ok();
    let m_star = if regime == Regime::Supercritical {
        positive_root(model, tol, r0)?
    } else {
        0.0
    };
    Ok(EquilibriumReport {
        r0,
        m_star,
        regime,
        malthusian_r,
        n_max: model.n_max(),
        mu_star: stationary_dist(model, m_star)?,
    })
}

fn positive_root(model: &Model, tol: f64, r0: f64) -> Result<f64, EquilibriumError> {
    let pi_bar = model.pi_bar();
    let g = |m: f64| -> Result<f64, EquilibriumError> { Ok(mu_bar_inf(model, m)? - m) };
    // g(m) / m is decreasing, so its sign locates the root even where g
    // itself is below rounding.
    let slope = |m: f64| -> Result<f64, EquilibriumError> { Ok(mu_bar_inf(model, m)? / m - 1.0) };
    let eps0 = (tol / 10.0).min(pi_bar / 2.0);

    let (g_lo, g_hi) = (g(eps0)?, g(pi_bar)?);
    let mut signs = Vec::with_capacity(SIGN_GRID + 1);
    for j in 0..=SIGN_GRID {
        let m = eps0 + (pi_bar - eps0) * j as f64 / SIGN_GRID as f64;
        signs.push(slope(m)? > 0.0);
    }
    let sign_changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
    let fail = || EquilibriumError::BracketFailure {
        lo: eps0,
        hi: pi_bar,
        g_lo,
        g_hi,
        sign_changes,
        r0,
    };
    let (mut lo, mut hi) = match (signs[0], sign_changes) {
        (true, 1) => (eps0, pi_bar),
        // Root below eps0: only possible very close to criticality.
        (false, 0) => (0.0, eps0),
        _ => return Err(fail()),
    };
    if *signs.last().unwrap() {
        return Err(fail());
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= tol * 1e-3 && g(mid)?.abs() <= tol {
            break;
        }
    }
    let m = 0.5 * (lo + hi);
    if g(m)?.abs() > tol {
        return Err(fail());
    }
    Ok(m)
}

/// Solves `(r - Q_n) u = x` on the transient states `1..=n` of the isolated
/// local chain and returns `u(1) = int_0^inf e^{-rt} E_1[I(t)] dt`.
///
/// Eliminates from `x = n` down, writing `u(x) = a(x) + (1 - c(x)) u(x - 1)`;
/// every quantity in the recursion is a sum of non-negative terms.
fn resolvent_at_one(model: &Model, n: usize, r: f64) -> f64 {
    let mut a = 0.0;
    let mut c = 1.0;
    for x in (1..=n).rev() {
        let up = model.up_rate(n, x, 0.0);
        let denom = r + model.down_rate(x) + up * c;
        a = (x as f64 + up * a) / denom;
        c = (r + up * c) / denom;
    }
    a
}

/// `(lambda_g / pi_bar)(1 - p) int_0^inf e^{-rt} E_1[nu I(t)] dt` with `nu ~ pi`.
pub fn laplace_transform(model: &Model, r: f64, p: f64) -> f64 {
    let sizes = model.sizes();
    let mut sum = 0.0;
    for (n, pn) in sizes.support() {
        sum += n as f64 * pn * resolvent_at_one(model, n, r);
    }
    model.rates().lambda_g / model.pi_bar() * (1.0 - p) * sum
}

/// Root `r >= 0` of `laplace_transform(r, p) = 1`.
pub fn malthusian_rate(model: &Model, p: f64) -> Result<f64, EquilibriumError> {
    if !(0.0..1.0).contains(&p) {
        return Err(EquilibriumError::BadDiscount(p));
    }
    let f = |r: f64| laplace_transform(model, r, p) - 1.0;
    let at_zero = f(0.0);
    if at_zero.abs() <= CRITICAL_TOL {
        return Ok(0.0);
    }
    if at_zero < 0.0 {
        return Err(EquilibriumError::NoGrowth {
            transform_at_zero: at_zero + 1.0,
        });
    }
    // u_n(1) <= n / r, so the transform is at most 1 here.
    let mut hi = model.rates().lambda_g * (1.0 - p) * model.sizes().pi_bar_plus();
    let mut lo = 0.0;
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = f(mid);
        if v == 0.0 {
            return Ok(mid);
        }
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Checks `laplace_transform(0, 0) = R0` to `1e-12` relative.
pub fn self_test(model: &Model) -> Result<(), EquilibriumError> {
    let r0 = r0_formula(model);
    let transform = laplace_transform(model, 0.0, 0.0);
    if (transform - r0).abs() > 1e-12 * r0.max(1.0) {
        return Err(EquilibriumError::SelfTest { transform, r0 });
    }
    Ok(())
}

/// Monte Carlo estimate of `P(I(t) > 0)` for a household drawn from `pi+`
/// with one initial infected.
pub fn local_survival_mc(model: &Model, times: &[f64], replicas: usize, seed: u64) -> Vec<f64> {
    let sizes = WeightedIndex::new(model.sizes().size_biased()).expect("pi+ has mass");
    let ends: Vec<f64> = (0..replicas as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(seed, i);
            let n = sizes.sample(&mut rng) + 1;
            let path =
                simulate_isolated(model, n, 1, f64::INFINITY, &mut rng).expect("valid start");
            path.absorbed_at.unwrap_or(f64::INFINITY)
        })
        .collect();
    times
        .iter()
        .map(|&t| ends.iter().filter(|&&e| e > t).count() as f64 / replicas.max(1) as f64)
        .collect()
}
