//! Graphical construction of the forced process for one household.
//!
//! Three independent Poisson point processes on `[0, T]`:
//!
//! * recoveries `(t, i)`, intensity `gamma` per individual;
//! * local arrows `(t, i, j)`, intensity `lambda_l / nu` per ordered pair;
//! * global attempts `(t, i, u)`, intensity `lambda_g / pi_bar` per
//!   individual and unit of mark `u in [0, pi_bar]`.
//!
//! Replaying them against a forcing `m` keeps the set of currently infected
//! individuals: a recovery removes `i`, an arrow adds `j` if `i` is
//! infected, and a global attempt adds `i` if `u <= m(t)`. That set is the
//! union of the local epidemics seeded by the initial infecteds and by the
//! accepted global attempts, so the same points replayed under two ordered
//! forcings give nested sets at all times.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use super::SimError;
use crate::model::{Model, SampledPath};
use crate::rng::SimRng;

const RANGE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointKind {
    Recovery { individual: u32 },
    Local { from: u32, to: u32 },
    Global { individual: u32, mark: f64 },
}

impl PointKind {
    /// Simultaneous points (only possible through float collisions) are
    /// processed recoveries first, then local arrows, then global attempts.
    fn rank(&self) -> u8 {
        match self {
            PointKind::Recovery { .. } => 0,
            PointKind::Local { .. } => 1,
            PointKind::Global { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEvent {
    pub time: f64,
    pub kind: PointKind,
}

/// Right-continuous integer step path.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPath {
    pub times: Vec<f64>,
    pub values: Vec<u32>,
}

impl StepPath {
    pub fn value_at(&self, t: f64) -> u32 {
        let j = self.times.partition_point(|&s| s <= t);
        self.values[j.saturating_sub(1)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPaths {
    pub low: StepPath,
    pub high: StepPath,
}

#[derive(Debug, Clone)]
pub struct GraphicalEvents {
    size: usize,
    horizon: f64,
    points: Vec<PointEvent>,
    counts: [usize; 3],
}

fn poisson_count(mean: f64, rng: &mut SimRng) -> usize {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean)
            .expect("finite positive mean")
            .sample(rng) as usize
    }
}

impl GraphicalEvents {
    pub fn sample(
        model: &Model,
        size: usize,
        horizon: f64,
        rng: &mut SimRng,
    ) -> Result<Self, SimError> {
        if size == 0 {
            return Err(crate::model::ModelError::ZeroSize.into());
        }
        if !(horizon.is_finite() && horizon >= 0.0) {
            return Err(SimError::BadHorizon(horizon));
        }
        let r = model.rates();
        let pi_bar = model.pi_bar();
        let nu = size as f64;
        let n_rec = poisson_count(r.gamma * nu * horizon, rng);
        // nu^2 ordered pairs at lambda_l / nu each.
        let n_loc = poisson_count(r.lambda_l * nu * horizon, rng);
        // nu individuals times mark length pi_bar at lambda_g / pi_bar.
        let n_glob = poisson_count(r.lambda_g * nu * horizon, rng);
        let n = size as u32;
        let mut points = Vec::with_capacity(n_rec + n_loc + n_glob);
        for _ in 0..n_rec {
            let time = rng.random::<f64>() * horizon;
            points.push(PointEvent {
                time,
                kind: PointKind::Recovery {
                    individual: rng.random_range(0..n),
                },
            });
        }
        for _ in 0..n_loc {
            let time = rng.random::<f64>() * horizon;
            let from = rng.random_range(0..n);
            let to = rng.random_range(0..n);
            points.push(PointEvent {
                time,
                kind: PointKind::Local { from, to },
            });
        }
        for _ in 0..n_glob {
            let time = rng.random::<f64>() * horizon;
            let individual = rng.random_range(0..n);
            let mark = rng.random::<f64>() * pi_bar;
            points.push(PointEvent {
                time,
                kind: PointKind::Global { individual, mark },
            });
        }
        points.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then(a.kind.rank().cmp(&b.kind.rank()))
        });
        Ok(Self {
            size,
            horizon,
            points,
            counts: [n_rec, n_loc, n_glob],
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn points(&self) -> &[PointEvent] {
        &self.points
    }

    /// `(recoveries, local arrows, global attempts)`.
    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    fn apply(state: &mut [bool], count: &mut u32, kind: &PointKind, time: f64, m: &SampledPath) {
        match *kind {
            PointKind::Recovery { individual } => {
                let s = &mut state[individual as usize];
                if *s {
                    *s = false;
                    *count -= 1;
                }
            }
            PointKind::Local { from, to } => {
                if state[from as usize] && !state[to as usize] {
                    state[to as usize] = true;
                    *count += 1;
                }
            }
            PointKind::Global { individual, mark } => {
                let s = &mut state[individual as usize];
                if !*s && mark <= m.eval(time) {
                    *s = true;
                    *count += 1;
                }
            }
        }
    }

    /// The forced process `X_t(m)` started from individuals `0..x0` infected.
    pub fn replay(&self, x0: usize, m: &SampledPath) -> StepPath {
        let mut state: Vec<bool> = (0..self.size).map(|i| i < x0).collect();
        let mut count = x0.min(self.size) as u32;
        let mut path = StepPath {
            times: vec![0.0],
            values: vec![count],
        };
        for p in &self.points {
            let before = count;
            Self::apply(&mut state, &mut count, &p.kind, p.time, m);
            if count != before {
                path.times.push(p.time);
                path.values.push(count);
            }
        }
        path
    }

    /// Replays both forcings on the same points, checking set inclusion
    /// after every point.
    pub fn replay_coupled(
        &self,
        x0_low: usize,
        x0_high: usize,
        m_low: &SampledPath,
        m_high: &SampledPath,
    ) -> Result<CoupledPaths, SimError> {
        let mut low: Vec<bool> = (0..self.size).map(|i| i < x0_low).collect();
        let mut high: Vec<bool> = (0..self.size).map(|i| i < x0_high).collect();
        let (mut cl, mut ch) = (x0_low as u32, x0_high as u32);
        let mut paths = CoupledPaths {
            low: StepPath {
                times: vec![0.0],
                values: vec![cl],
            },
            high: StepPath {
                times: vec![0.0],
                values: vec![ch],
            },
        };
        for p in &self.points {
            let (bl, bh) = (cl, ch);
            Self::apply(&mut low, &mut cl, &p.kind, p.time, m_low);
            Self::apply(&mut high, &mut ch, &p.kind, p.time, m_high);
            if cl > ch || low.iter().zip(&high).any(|(&l, &h)| l && !h) {
                return Err(SimError::CouplingViolation {
                    t: p.time,
                    low: cl as usize,
                    high: ch as usize,
                });
            }
            if cl != bl || ch != bh {
                paths.low.times.push(p.time);
                paths.low.values.push(cl);
                paths.high.times.push(p.time);
                paths.high.values.push(ch);
            }
        }
        Ok(paths)
    }
}

fn check_forcing(m: &SampledPath, pi_bar: f64) -> Result<(), SimError> {
    for &v in m.values() {
        if !(v >= -RANGE_TOLERANCE && v <= pi_bar + RANGE_TOLERANCE) {
            return Err(SimError::ForcingOutOfRange { value: v, pi_bar });
        }
    }
    Ok(())
}

/// Both paths are piecewise linear between the union of their grid nodes,
/// so ordering at the nodes gives ordering everywhere.
fn check_order(low: &SampledPath, high: &SampledPath) -> Result<(), SimError> {
    for t in low.times().chain(high.times()) {
        let (l, h) = (low.eval(t), high.eval(t));
        if l > h + RANGE_TOLERANCE {
            return Err(SimError::ForcingOrder { t, low: l, high: h });
        }
    }
    Ok(())
}

/// Coupled realizations of `X_t(m_low)` from `x0_low` and `X_t(m_high)` from
/// `x0_high` over `[0, horizon]`, driven by the same point processes.
#[allow(clippy::too_many_arguments)]
pub fn simulate_forced_coupled(
    model: &Model,
    size: usize,
    x0_low: usize,
    x0_high: usize,
    m_low: &SampledPath,
    m_high: &SampledPath,
    horizon: f64,
    rng: &mut SimRng,
) -> Result<CoupledPaths, SimError> {
    if !(x0_low <= x0_high && x0_high <= size) {
        return Err(SimError::InitialOrder {
            low: x0_low,
            high: x0_high,
            n: size,
        });
    }
    check_forcing(m_low, model.pi_bar())?;
    check_forcing(m_high, model.pi_bar())?;
    check_order(m_low, m_high)?;
    let events = GraphicalEvents::sample(model, size, horizon, rng)?;
    events.replay_coupled(x0_low, x0_high, m_low, m_high)
}
