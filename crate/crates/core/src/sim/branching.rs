//! Household-level branching process.
//!
//! Active households run independent local epidemics (rates `lambda_l`,
//! `gamma`). New households, with size drawn from `pi+` and one infected,
//! arrive at rate `(1 - p) lambda_g` times the number of infected
//! individuals over all active households. `Y_t` counts active households;
//! a household leaves when its local epidemic reaches zero.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::Serialize;

use super::{sample_times, SimError};
use crate::fenwick::Fenwick;
use crate::model::Model;
use crate::rng::{replica_rng, SimRng};
use crate::stats::fit_slope;

#[derive(Debug, Clone)]
pub struct BranchingConfig {
    /// Discount `p` on the spawn rate, in `[0, 1)`.
    pub discount: f64,
    pub init_count: usize,
    pub horizon: f64,
    pub sample_dt: f64,
    /// Stop early once this many households are active at once.
    pub max_active: Option<usize>,
    pub record_households: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HouseholdLifetime {
    pub size: u32,
    pub start: f64,
    /// Time the local epidemic died out, if before the horizon.
    pub end: Option<f64>,
    pub parent: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchingTrace {
    pub times: Vec<f64>,
    /// `Y_t` at each sample.
    pub active: Vec<u64>,
    pub infected: Vec<u64>,
    pub spawned: u64,
    pub events: u64,
    pub extinct_at: Option<f64>,
    /// Set when `max_active` stopped the run; samples end before this time.
    pub capped_at: Option<f64>,
    pub households: Vec<HouseholdLifetime>,
}

struct Arena {
    size: Vec<u32>,
    infected: Vec<u32>,
    record: Vec<u32>,
    free: Vec<usize>,
    weights: Fenwick<f64>,
    active: usize,
    total_infected: u64,
}

impl Arena {
    fn weight(lambda_l: f64, gamma: f64, n: u32, x: u32) -> f64 {
        let (n, x) = (n as f64, x as f64);
        lambda_l * x * (n - x) / n + gamma * x
    }

    fn insert(&mut self, n: u32, record: u32, lambda_l: f64, gamma: f64) {
        let w = Self::weight(lambda_l, gamma, n, 1);
        match self.free.pop() {
            Some(slot) => {
                self.size[slot] = n;
                self.infected[slot] = 1;
                self.record[slot] = record;
                self.weights.set(slot, w);
            }
            None => {
                self.size.push(n);
                self.infected.push(1);
                self.record.push(record);
                self.weights.push(w);
            }
        }
        self.active += 1;
        self.total_infected += 1;
    }
}

pub fn simulate_branching(
    model: &Model,
    config: &BranchingConfig,
    rng: &mut SimRng,
) -> Result<BranchingTrace, SimError> {
    let p = config.discount;
    if !(0.0..1.0).contains(&p) {
        return Err(SimError::BadDiscount(p));
    }
    let times = sample_times(config.horizon, config.sample_dt)?;
    let r = *model.rates();
    let sizes = model.sizes();
    let size_biased = WeightedIndex::new(sizes.size_biased()).expect("size-biased law has mass");
    let spawn_coef = (1.0 - p) * r.lambda_g;

    let mut arena = Arena {
        size: Vec::new(),
        infected: Vec::new(),
        record: Vec::new(),
        free: Vec::new(),
        weights: Fenwick::new(Vec::new()),
        active: 0,
        total_infected: 0,
    };
    let mut trace = BranchingTrace {
        active: Vec::with_capacity(times.len()),
        infected: Vec::with_capacity(times.len()),
        times,
        spawned: 0,
        events: 0,
        extinct_at: None,
        capped_at: None,
        households: Vec::new(),
    };
    let spawn = |arena: &mut Arena,
                 trace: &mut BranchingTrace,
                 t: f64,
                 parent: Option<u32>,
                 rng: &mut SimRng| {
        let n = (size_biased.sample(rng) + 1) as u32;
        let id = trace.households.len() as u32;
        if config.record_households {
            trace.households.push(HouseholdLifetime {
                size: n,
                start: t,
                end: None,
                parent,
            });
        }
        arena.insert(n, id, r.lambda_l, r.gamma);
        trace.spawned += 1;
    };
    for _ in 0..config.init_count {
        spawn(&mut arena, &mut trace, 0.0, None, rng);
    }

    let last = trace.times.len() - 1;
    let mut next = 0usize;
    let mut t = 0.0;
    while next <= last {
        let spawn_rate = spawn_coef * arena.total_infected as f64;
        let local = arena.weights.total().max(0.0);
        let total = spawn_rate + local;
        let wait = if arena.active == 0 {
            f64::INFINITY
        } else {
            rng.sample::<f64, _>(Exp1) / total
        };
        while next <= last && trace.times[next] < t + wait {
            trace.active.push(arena.active as u64);
            trace.infected.push(arena.total_infected);
            next += 1;
        }
        if next > last {
            break;
        }
        t += wait;
        trace.events += 1;
        if rng.random::<f64>() * total < spawn_rate {
            // Parent is the household of a uniformly chosen infected
            // individual; only tracked when lifetimes are recorded.
            let parent = config.record_households.then(|| {
                let target = rng.random_range(0..arena.total_infected);
                let mut acc = 0u64;
                let slot = (0..arena.size.len())
                    .find(|&s| {
                        acc += arena.infected[s] as u64;
                        acc > target
                    })
                    .expect("target below total");
                arena.record[slot]
            });
            spawn(&mut arena, &mut trace, t, parent, rng);
        } else {
            let slot = loop {
                let v = rng.random::<f64>() * arena.weights.total();
                if let Some(s) = arena.weights.find(v) {
                    break s;
                }
            };
            let (n, x) = (arena.size[slot], arena.infected[slot]);
            let infect = r.lambda_l * x as f64 * (n - x) as f64 / n as f64;
            let w = infect + r.gamma * x as f64;
            if rng.random::<f64>() * w < infect {
                arena.infected[slot] = x + 1;
                arena.total_infected += 1;
                arena
                    .weights
                    .set(slot, Arena::weight(r.lambda_l, r.gamma, n, x + 1));
            } else if x == 1 {
                arena.infected[slot] = 0;
                arena.total_infected -= 1;
                arena.weights.set(slot, 0.0);
                arena.free.push(slot);
                arena.active -= 1;
                if config.record_households {
                    trace.households[arena.record[slot] as usize].end = Some(t);
                }
                if arena.active == 0 {
                    trace.extinct_at = Some(t);
                }
            } else {
                arena.infected[slot] = x - 1;
                arena.total_infected -= 1;
                arena
                    .weights
                    .set(slot, Arena::weight(r.lambda_l, r.gamma, n, x - 1));
            }
        }
        if config.max_active.is_some_and(|cap| arena.active > cap) {
            trace.capped_at = Some(t);
            trace.times.truncate(next);
            break;
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthFit {
    pub times: Vec<f64>,
    /// Replica average of `Y_t`, extinct runs included.
    pub mean_active: Vec<f64>,
    pub mean_infected: Vec<f64>,
    /// Slope of `log mean_active` over `window`.
    pub slope: f64,
    pub window: (f64, f64),
    pub extinct_fraction: f64,
}

/// Runs `replicas` independent branching processes and fits the
/// exponential growth rate of `E[Y_t]` on `window`.
pub fn fit_growth(
    model: &Model,
    config: &BranchingConfig,
    replicas: usize,
    seed: u64,
    window: (f64, f64),
) -> Result<GrowthFit, SimError> {
    let config = BranchingConfig {
        max_active: None,
        record_households: false,
        ..config.clone()
    };
    let traces: Vec<BranchingTrace> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| simulate_branching(model, &config, &mut replica_rng(seed, r)))
        .collect::<Result<_, _>>()?;
    let times = sample_times(config.horizon, config.sample_dt)?;
    let scale = 1.0 / replicas.max(1) as f64;
    let mut mean_active = vec![0.0; times.len()];
    let mut mean_infected = vec![0.0; times.len()];
    for trace in &traces {
        for j in 0..times.len() {
            mean_active[j] += trace.active[j] as f64 * scale;
            mean_infected[j] += trace.infected[j] as f64 * scale;
        }
    }
    let (x, y): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&mean_active)
        .filter(|(&t, &y)| t >= window.0 && t <= window.1 && y > 0.0)
        .map(|(&t, &y)| (t, y.ln()))
        .unzip();
    let slope = if x.len() >= 2 {
        fit_slope(&x, &y)
    } else {
        f64::NAN
    };
    let extinct = traces
        .iter()
        .filter(|t| t.active.last() == Some(&0))
        .count();
    Ok(GrowthFit {
        times,
        mean_active,
        mean_infected,
        slope,
        window,
        extinct_fraction: extinct as f64 * scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Rates, SizeDist};
    use crate::rng::replica_rng;

    fn cfg(init: usize, horizon: f64) -> BranchingConfig {
        BranchingConfig {
            discount: 0.0,
            init_count: init,
            horizon,
            sample_dt: 0.5,
            max_active: None,
            record_households: false,
        }
    }

    #[test]
    fn empty_start_stays_empty() {
        let m = Model::validate(Rates::new(1.0, 2.0, 1.0), SizeDist::delta(1)).unwrap();
        let mut rng = replica_rng(1, 0);
        let trace = simulate_branching(&m, &cfg(0, 5.0), &mut rng).unwrap();
        assert!(trace.active.iter().all(|&y| y == 0));
        assert_eq!(trace.events, 0);
    }

    #[test]
    fn subcritical_dies_out() {
        let m = Model::validate(Rates::new(1.0, 1.0, 2.0), SizeDist::delta(1)).unwrap();
        let runs = 1000;
        let extinct = (0..runs)
            .filter(|&r| {
                let mut rng = replica_rng(2, r);
                simulate_branching(&m, &cfg(1, 30.0), &mut rng)
                    .unwrap()
                    .active
                    .last()
                    == Some(&0)
            })
            .count();
        assert!(extinct as f64 / runs as f64 > 0.95, "{extinct}");
    }

    #[test]
    fn lifetimes_are_consistent() {
        let m = Model::validate(
            Rates::new(1.5, 1.2, 1.0),
            SizeDist::geometric(0.5, 1e-10).unwrap(),
        )
        .unwrap();
        let mut rng = replica_rng(3, 0);
        let mut c = cfg(5, 4.0);
        c.record_households = true;
        let trace = simulate_branching(&m, &c, &mut rng).unwrap();
        assert_eq!(trace.households.len() as u64, trace.spawned);
        let alive_at_end = trace.households.iter().filter(|h| h.end.is_none()).count() as u64;
        assert_eq!(alive_at_end, *trace.active.last().unwrap());
        for h in &trace.households {
            if let Some(end) = h.end {
                assert!(end > h.start);
            }
            if let Some(parent) = h.parent {
                let par = &trace.households[parent as usize];
                assert!(par.start <= h.start && par.end.is_none_or(|e| e >= h.start));
            }
        }
    }

    #[test]
    fn cap_stops_the_run() {
        let m = Model::validate(Rates::new(1.0, 3.0, 1.0), SizeDist::delta(1)).unwrap();
        let mut rng = replica_rng(4, 0);
        let mut c = cfg(50, 50.0);
        c.max_active = Some(500);
        let trace = simulate_branching(&m, &c, &mut rng).unwrap();
        assert!(trace.capped_at.is_some());
        assert_eq!(trace.times.len(), trace.active.len());
    }

    #[test]
    fn homogeneous_growth_rate() {
        // lambda_g = 2, gamma = 1, unit households: E[Y_t] = Y_0 e^t.
        let m = Model::validate(Rates::new(1.0, 2.0, 1.0), SizeDist::delta(1)).unwrap();
        let c = BranchingConfig {
            init_count: 20,
            horizon: 7.0,
            ..cfg(0, 0.0)
        };
        let fit = fit_growth(&m, &c, 40, 6, (2.0, 7.0)).unwrap();
        assert!((fit.slope - 1.0).abs() < 0.1, "{}", fit.slope);
    }

    #[test]
    fn bad_discount_rejected() {
        let m = Model::validate(Rates::new(1.0, 1.0, 1.0), SizeDist::delta(1)).unwrap();
        let mut rng = replica_rng(5, 0);
        let mut c = cfg(1, 1.0);
        c.discount = 1.0;
        assert!(matches!(
            simulate_branching(&m, &c, &mut rng),
            Err(SimError::BadDiscount(_))
        ));
    }
}
