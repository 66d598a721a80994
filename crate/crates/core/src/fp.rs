//! Deterministic evolution of the household law `mu[n,k](t)`.
//!
//! Each row `n` is a birth-death chain on `0..=n` with up-rate
//! `(1 - k/n)[lambda_l k + lambda_g (n / pi_bar) m]` and down-rate `gamma k`.
//! The forced system takes `m(t)` from a [`SampledPath`]; the nonlinear one
//! sets `m = E[X(t)]` of the current state. Both are stepped with classical
//! RK4 at a fixed step.

use std::io::{self, Write};

use thiserror::Error;

use crate::model::{mean_of_ragged, renormalize_rows};
use crate::model::{ragged_len, row_offset, JointDist, Model, ModelError, SampledPath};

/// `dt * max_total_rate` may not exceed this.
pub const STABILITY_LIMIT: f64 = 0.5;
pub const RENORMALIZE_EVERY: usize = 100;
/// Row-mass drift beyond this between renormalizations aborts the run.
pub const DEFECT_ABORT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FpError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("step dt = {dt} violates the stability bound; need dt <= {required}")]
    Unstable { dt: f64, required: f64 },
    #[error("horizon must be finite and >= 0 (got {0})")]
    BadHorizon(f64),
    #[error("forcing path must lie in [0, {pi_bar}] (found {value})")]
    ForcingOutOfRange { value: f64, pi_bar: f64 },
    #[error("forcing path ends at t = {end}, before the horizon {horizon}")]
    ForcingTooShort { end: f64, horizon: f64 },
    #[error("initial law does not match the model's size distribution")]
    SizeMismatch,
    #[error("row mass drifted by {defect} by t = {t}")]
    MassDefect { t: f64, defect: f64 },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Which intermediate laws an integration keeps. The initial and final
/// laws are always kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    Endpoints,
    /// Every `stride`-th grid point.
    Every(usize),
}

#[derive(Debug, Clone)]
pub struct FpTrajectory {
    /// `E[X(t)]` at every grid point `i * dt`.
    pub means: SampledPath,
    /// Stored `(grid index, law)` pairs in increasing index order.
    pub states: Vec<(usize, JointDist)>,
    /// Largest row-mass defect seen before any renormalization.
    pub max_defect: f64,
}

impl FpTrajectory {
    pub fn dt(&self) -> f64 {
        self.means.dt()
    }

    pub fn steps(&self) -> usize {
        self.means.len() - 1
    }

    pub fn final_state(&self) -> &JointDist {
        &self.states.last().expect("final law is always stored").1
    }

    pub fn final_mean(&self) -> f64 {
        *self.means.values().last().unwrap()
    }

    /// `t,mean` rows.
    pub fn write_means_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "t,mean")?;
        for (t, m) in self.means.times().zip(self.means.values()) {
            writeln!(w, "{t},{m}")?;
        }
        Ok(())
    }

    /// `t,n,k,weight` rows for every stored law.
    pub fn write_states_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "t,n,k,weight")?;
        for (i, mu) in &self.states {
            let t = self.means.time(*i);
            for (n, k, p) in mu.iter() {
                writeln!(w, "{t},{n},{k},{p}")?;
            }
        }
        Ok(())
    }
}

/// Per-state rate coefficients: `up = up_local + up_global * m`.
#[derive(Debug, Clone)]
struct Operator {
    n_max: usize,
    up_local: Vec<f64>,
    up_global: Vec<f64>,
    down: Vec<f64>,
}

impl Operator {
    fn new(model: &Model) -> Self {
        let n_max = model.n_max();
        let len = ragged_len(n_max);
        let (mut up_local, mut up_global, mut down) =
            (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        let r = model.rates();
        let scale = r.lambda_g / model.pi_bar();
        for n in 1..=n_max {
            let off = row_offset(n);
            let nf = n as f64;
            for k in 0..=n {
                let kf = k as f64;
                let s = (nf - kf) / nf;
                up_local[off + k] = s * r.lambda_l * kf;
                up_global[off + k] = s * scale * nf;
                down[off + k] = r.gamma * kf;
            }
        }
        Self {
            n_max,
            up_local,
            up_global,
            down,
        }
    }

    /// Writes `d mu / dt` into `out` in flux form, so each row sums to zero
    /// up to rounding.
    fn apply(&self, mu: &[f64], m: f64, out: &mut [f64]) {
        for n in 1..=self.n_max {
            let off = row_offset(n);
            let mut inflow = 0.0;
            for k in 0..n {
                let i = off + k;
                let flux = (self.up_local[i] + self.up_global[i] * m) * mu[i]
                    - self.down[i + 1] * mu[i + 1];
                out[i] = inflow - flux;
                inflow = flux;
            }
            out[off + n] = inflow;
        }
    }
}

/// Right-hand side of the forward equation at forcing `m`, in the ragged
/// layout of [`JointDist`].
pub fn fp_rhs(mu: &JointDist, m: f64, model: &Model) -> Result<Vec<f64>, FpError> {
    if !(m.is_finite() && m >= 0.0) {
        return Err(ModelError::BadForcing { m }.into());
    }
    check_sizes(mu, model)?;
    let mut out = vec![0.0; mu.weights().len()];
    Operator::new(model).apply(mu.weights(), m, &mut out);
    Ok(out)
}

/// Largest step the explicit scheme accepts for this model.
pub fn max_stable_dt(model: &Model) -> f64 {
    STABILITY_LIMIT / model.max_total_rate()
}

fn check_sizes(mu: &JointDist, model: &Model) -> Result<(), FpError> {
    if mu.sizes() != model.sizes() {
        return Err(FpError::SizeMismatch);
    }
    Ok(())
}

/// Number of steps and the effective step: `T` is split into
/// `ceil(T / dt)` equal steps, never longer than `dt`.
pub fn grid(horizon: f64, dt: f64) -> Result<(usize, f64), FpError> {
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(FpError::BadHorizon(horizon));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(ModelError::BadGrid.into());
    }
    let steps = ((horizon / dt) - 1e-9).ceil().max(0.0) as usize;
    if steps == 0 {
        return Ok((0, dt));
    }
    Ok((steps, horizon / steps as f64))
}

enum Forcing<'a> {
    Path(&'a SampledPath),
    SelfConsistent,
}

fn integrate(
    model: &Model,
    mu0: &JointDist,
    forcing: Forcing<'_>,
    horizon: f64,
    dt: f64,
    storage: Storage,
) -> Result<FpTrajectory, FpError> {
    check_sizes(mu0, model)?;
    let (steps, h) = grid(horizon, dt)?;
    let required = max_stable_dt(model);
    if h * model.max_total_rate() > STABILITY_LIMIT {
        return Err(FpError::Unstable { dt, required });
    }
    let pi_bar = model.pi_bar();
    if let Forcing::Path(path) = forcing {
        if let Some(&value) = path
            .values()
            .iter()
            .find(|&&v| !(0.0..=pi_bar + 1e-12).contains(&v))
        {
            return Err(FpError::ForcingOutOfRange { value, pi_bar });
        }
        if path.end_time() < horizon - 1e-9 * horizon.max(1.0) {
            return Err(FpError::ForcingTooShort {
                end: path.end_time(),
                horizon,
            });
        }
    }

    let op = Operator::new(model);
    let n_max = model.n_max();
    let len = ragged_len(n_max);
    let mut mu = mu0.weights().to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (
        vec![0.0; len],
        vec![0.0; len],
        vec![0.0; len],
        vec![0.0; len],
        vec![0.0; len],
    );
    let forcing_at = |t: f64, state: &[f64]| -> f64 {
        match forcing {
            Forcing::Path(p) => p.eval(t),
            Forcing::SelfConsistent => mean_of_ragged(state, n_max).clamp(0.0, pi_bar),
        }
    };

    let mut means = Vec::with_capacity(steps + 1);
    means.push(mu0.mean_infected());
    let mut states = vec![(0, mu0.clone())];
    let mut max_defect: f64 = 0.0;
    for step in 0..steps {
        let t = step as f64 * h;
        op.apply(&mu, forcing_at(t, &mu), &mut k1);
        axpy(&mu, 0.5 * h, &k1, &mut tmp);
        op.apply(&tmp, forcing_at(t + 0.5 * h, &tmp), &mut k2);
        axpy(&mu, 0.5 * h, &k2, &mut tmp);
        op.apply(&tmp, forcing_at(t + 0.5 * h, &tmp), &mut k3);
        axpy(&mu, h, &k3, &mut tmp);
        op.apply(&tmp, forcing_at(t + h, &tmp), &mut k4);
        for i in 0..len {
            mu[i] += h / 6.0 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
        }

        let done = step + 1;
        let keep = done == steps || matches!(storage, Storage::Every(s) if s > 0 && done % s == 0);
        if done % RENORMALIZE_EVERY == 0 || keep {
            let defect = renormalize_rows(mu0.sizes(), &mut mu)?;
            max_defect = max_defect.max(defect);
            if defect > DEFECT_ABORT {
                return Err(FpError::MassDefect {
                    t: done as f64 * h,
                    defect,
                });
            }
        }
        let mean = mean_of_ragged(&mu, n_max);
        means.push(mean.clamp(0.0, pi_bar));
        if keep {
            states.push((
                done,
                JointDist::from_weights(mu0.sizes_arc().clone(), mu.clone())?,
            ));
        }
    }
    let means = SampledPath::new(0.0, h, means, (0.0, pi_bar))?;
    Ok(FpTrajectory {
        means,
        states,
        max_defect,
    })
}

fn axpy(x: &[f64], a: f64, y: &[f64], out: &mut [f64]) {
    for ((o, &xi), &yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

/// Law of the forced process `X_t(m)` started from `mu0`. Between grid
/// points of `m` the forcing is interpolated linearly.
pub fn integrate_forced(
    model: &Model,
    mu0: &JointDist,
    m: &SampledPath,
    horizon: f64,
    dt: f64,
    storage: Storage,
) -> Result<FpTrajectory, FpError> {
    integrate(model, mu0, Forcing::Path(m), horizon, dt, storage)
}

/// Law of the nonlinear process: the forcing is the current mean,
/// re-evaluated at every Runge-Kutta stage.
pub fn integrate_nonlinear(
    model: &Model,
    mu0: &JointDist,
    horizon: f64,
    dt: f64,
    storage: Storage,
) -> Result<FpTrajectory, FpError> {
    integrate(model, mu0, Forcing::SelfConsistent, horizon, dt, storage)
}

/// Sup-norm distance between the means of `traj` and the forced run driven
/// by those same means; small when `traj` is a numerical fixed point.
pub fn self_consistency_residual(
    model: &Model,
    mu0: &JointDist,
    traj: &FpTrajectory,
) -> Result<f64, FpError> {
    let horizon = traj.means.end_time();
    let forced = integrate_forced(
        model,
        mu0,
        &traj.means,
        horizon,
        traj.dt() * (1.0 + 1e-12),
        Storage::Endpoints,
    )?;
    Ok(forced.means.sup_distance(&traj.means))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Rates, SizeDist};
    use std::sync::Arc;

    fn model(rates: (f64, f64, f64), sizes: SizeDist) -> Model {
        Model::validate_relaxed(Rates::new(rates.0, rates.1, rates.2), sizes).unwrap()
    }

    fn two_state(p1: f64, sizes: &Arc<SizeDist>) -> JointDist {
        JointDist::from_weights(sizes.clone(), vec![1.0 - p1, p1]).unwrap()
    }

    #[test]
    fn disease_free_rhs_vanishes() {
        let m = model((1.0, 2.0, 1.0), SizeDist::geometric_at(0.4, 8).unwrap());
        let mu = JointDist::disease_free(m.sizes_arc().clone());
        assert!(fp_rhs(&mu, 0.0, &m).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn two_state_rhs_at_endemic_point() {
        let m = model((1.0, 2.0, 1.0), SizeDist::delta(1));
        let mu = two_state(0.5, m.sizes_arc());
        let d = fp_rhs(&mu, 0.5, &m).unwrap();
        assert!(d[1].abs() < 1e-15 && d[0].abs() < 1e-15);
    }

    #[test]
    fn full_household_only_recovers() {
        let g = 0.7;
        let m = model((1.3, 2.0, g), SizeDist::delta(2));
        let mu = JointDist::fixed_count(m.sizes_arc().clone(), 2).unwrap();
        let d = fp_rhs(&mu, 1.1, &m).unwrap();
        assert_eq!(d[row_offset(2)..], [0.0, 2.0 * g, -2.0 * g]);
        assert_eq!(d[..row_offset(2)], [0.0, 0.0]);
    }

    #[test]
    fn rows_conserve_mass() {
        let m = model((1.5, 2.5, 0.8), SizeDist::geometric_at(0.3, 10).unwrap());
        let mu = JointDist::binomial(m.sizes_arc().clone(), 0.35).unwrap();
        let d = fp_rhs(&mu, 0.9, &m).unwrap();
        let scale = m.max_total_rate();
        for n in 1..=10 {
            let off = row_offset(n);
            let s: f64 = d[off..=off + n].iter().sum();
            assert!(s.abs() < 1e-12 * scale, "row {n}: {s}");
        }
    }

    #[test]
    fn constant_forcing_two_state_closed_form() {
        let m = model((1.0, 2.0, 1.0), SizeDist::delta(1));
        let mu0 = JointDist::disease_free(m.sizes_arc().clone());
        let dt = 1e-3;
        let forcing = SampledPath::constant(0.5, 0.0, dt, 5001, (0.0, 1.0)).unwrap();
        let traj = integrate_forced(&m, &mu0, &forcing, 5.0, dt, Storage::Endpoints).unwrap();
        let err = traj
            .means
            .times()
            .zip(traj.means.values())
            .map(|(t, v)| (v - 0.5 * (1.0 - (-2.0 * t).exp())).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_forcing_from_disease_free_is_constant() {
        let m = model((2.0, 1.0, 1.0), SizeDist::geometric_at(0.5, 6).unwrap());
        let mu0 = JointDist::disease_free(m.sizes_arc().clone());
        let forcing = SampledPath::constant(0.0, 0.0, 0.01, 101, (0.0, m.pi_bar())).unwrap();
        let traj = integrate_forced(&m, &mu0, &forcing, 1.0, 0.01, Storage::Every(10)).unwrap();
        assert!(traj.means.values().iter().all(|&v| v == 0.0));
        assert_eq!(traj.states.len(), 11);
        assert_eq!(traj.final_state(), &mu0);
    }

    #[test]
    fn logistic_reduction() {
        let (lam, g) = (2.0, 1.0);
        let m = model((0.0, lam, g), SizeDist::delta(1));
        let i0 = 0.9;
        let mu0 = two_state(i0, m.sizes_arc());
        let traj = integrate_nonlinear(&m, &mu0, 20.0, 1e-3, Storage::Endpoints).unwrap();
        let k = 1.0 - g / lam;
        let r = lam - g;
        let exact = |t: f64| k / (1.0 + (k / i0 - 1.0) * (-r * t).exp());
        let err = traj
            .means
            .times()
            .zip(traj.means.values())
            .map(|(t, v)| (v - exact(t)).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
        assert!((traj.final_mean() - k).abs() < 1e-8);
    }

    #[test]
    fn nonlinear_means_are_self_consistent() {
        let m = model((1.2, 1.5, 1.0), SizeDist::geometric_at(0.5, 8).unwrap());
        let mu0 = JointDist::binomial(m.sizes_arc().clone(), 0.2).unwrap();
        let traj = integrate_nonlinear(&m, &mu0, 10.0, 1e-3, Storage::Endpoints).unwrap();
        let res = self_consistency_residual(&m, &mu0, &traj).unwrap();
        assert!(res < 1e-6, "{res}");
    }

    #[test]
    fn drift_is_bounded_over_long_runs() {
        let m = model((1.0, 2.0, 1.0), SizeDist::geometric_at(0.5, 12).unwrap());
        let mu0 = JointDist::binomial(m.sizes_arc().clone(), 0.5).unwrap();
        let traj = integrate_nonlinear(&m, &mu0, 50.0, 1e-3, Storage::Every(5000)).unwrap();
        assert!(traj.max_defect < 1e-8, "{}", traj.max_defect);
        for (_, mu) in &traj.states {
            for n in 1..=12 {
                let s: f64 = mu.row(n).iter().sum();
                assert!((s - m.sizes().prob(n)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn stored_means_match_stored_states() {
        let m = model((1.0, 2.0, 1.0), SizeDist::geometric_at(0.5, 5).unwrap());
        let mu0 = JointDist::fixed_count(m.sizes_arc().clone(), 1).unwrap();
        let traj = integrate_nonlinear(&m, &mu0, 2.0, 0.01, Storage::Every(7)).unwrap();
        for (i, mu) in &traj.states {
            assert!((traj.means.values()[*i] - mu.mean_infected()).abs() < 1e-15);
        }
        assert_eq!(traj.states.last().unwrap().0, traj.steps());
    }

    #[test]
    fn unstable_step_names_required_dt() {
        let m = model((1.0, 1.0, 1.0), SizeDist::delta(10));
        let mu0 = JointDist::disease_free(m.sizes_arc().clone());
        match integrate_nonlinear(&m, &mu0, 1.0, 0.1, Storage::Endpoints) {
            Err(FpError::Unstable { required, .. }) => {
                assert!((required - 0.5 / 30.0).abs() < 1e-15)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn forcing_must_stay_in_range() {
        let m = model((1.0, 1.0, 1.0), SizeDist::delta(1));
        let mu0 = JointDist::disease_free(m.sizes_arc().clone());
        let bad = SampledPath::constant(1.5, 0.0, 0.01, 101, (0.0, 2.0)).unwrap();
        assert!(matches!(
            integrate_forced(&m, &mu0, &bad, 1.0, 0.01, Storage::Endpoints),
            Err(FpError::ForcingOutOfRange { .. })
        ));
        let short = SampledPath::constant(0.5, 0.0, 0.01, 11, (0.0, 1.0)).unwrap();
        assert!(matches!(
            integrate_forced(&m, &mu0, &short, 1.0, 0.01, Storage::Endpoints),
            Err(FpError::ForcingTooShort { .. })
        ));
    }

    #[test]
    fn csv_export_shapes() {
        let m = model((1.0, 1.0, 1.0), SizeDist::delta(2));
        let mu0 = JointDist::fixed_count(m.sizes_arc().clone(), 1).unwrap();
        let traj = integrate_nonlinear(&m, &mu0, 0.1, 0.01, Storage::Endpoints).unwrap();
        let mut buf = Vec::new();
        traj.write_means_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 12);
        let mut buf = Vec::new();
        traj.write_states_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 2 * 5);
    }
}
