//! The `N`-household SIS system.
//!
//! Household `i` gains an infection at rate
//! `(1 - X_i/nu_i) [lambda_l X_i + lambda_g (nu_i / nu_bar_N) (1/N) sum_j X_j]`
//! and loses one at rate `gamma X_i`. The global part of all up-rates is
//! `lambda_g (sum_j X_j / N) (nu_i - X_i) / nu_bar_N`, so its total is a
//! scalar times the number of susceptibles in the population and a global
//! infection hits a uniformly chosen susceptible individual. The engine
//! therefore keeps two trees: per-household local weights
//! `lambda_l X(nu - X)/nu + gamma X`, and per-household susceptible counts.
//! Both are updated in O(log N) per event and no rate ever needs
//! recomputing for households other than the one that jumped.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

use super::{sample_times, SimError};
use crate::fenwick::Fenwick;
use crate::model::{ragged_len, row_offset, JointDist, Model, Rates};
use crate::rng::{replica_rng, SimRng};

/// Household configuration `(nu_i, X_i)` with cached aggregates.
#[derive(Debug, Clone)]
pub struct Population {
    rates: Rates,
    sizes: Vec<u32>,
    infected: Vec<u32>,
    total_infected: u64,
    total_size: u64,
    nu_bar_n: f64,
    infected_households: usize,
    local: Fenwick<f64>,
    susceptible: Fenwick<u64>,
}

#[inline]
fn local_weight(rates: &Rates, n: u32, x: u32) -> f64 {
    let (n, x) = (n as f64, x as f64);
    rates.lambda_l * x * (n - x) / n + rates.gamma * x
}

impl Population {
    pub fn new(rates: Rates, sizes: Vec<u32>, infected: Vec<u32>) -> Result<Self, SimError> {
        if sizes.is_empty() {
            return Err(SimError::NoHouseholds);
        }
        if sizes.len() != infected.len() {
            return Err(SimError::InitialLengthMismatch {
                sizes: sizes.len(),
                infected: infected.len(),
            });
        }
        for (index, (&n, &x)) in sizes.iter().zip(&infected).enumerate() {
            if n == 0 || x > n {
                return Err(SimError::InvalidInitial {
                    index,
                    size: n as usize,
                    infected: x as usize,
                });
            }
        }
        let total_size: u64 = sizes.iter().map(|&n| n as u64).sum();
        let total_infected: u64 = infected.iter().map(|&x| x as u64).sum();
        let local = Fenwick::new(
            sizes
                .iter()
                .zip(&infected)
                .map(|(&n, &x)| local_weight(&rates, n, x))
                .collect(),
        );
        let susceptible = Fenwick::new(
            sizes
                .iter()
                .zip(&infected)
                .map(|(&n, &x)| (n - x) as u64)
                .collect(),
        );
        Ok(Self {
            rates,
            nu_bar_n: total_size as f64 / sizes.len() as f64,
            infected_households: infected.iter().filter(|&&x| x > 0).count(),
            sizes,
            infected,
            total_infected,
            total_size,
            local,
            susceptible,
        })
    }

    pub fn households(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[u32] {
        &self.sizes
    }

    pub fn infected(&self) -> &[u32] {
        &self.infected
    }

    pub fn total_infected(&self) -> u64 {
        self.total_infected
    }

    pub fn total_size(&self) -> u64 {
        self.total_size
    }

    pub fn nu_bar_n(&self) -> f64 {
        self.nu_bar_n
    }

    /// `(1/N) sum_i X_i`.
    pub fn mean_infected(&self) -> f64 {
        self.total_infected as f64 / self.households() as f64
    }

    /// `Z_N / N`.
    pub fn frac_infected_households(&self) -> f64 {
        self.infected_households as f64 / self.households() as f64
    }

    /// Total rate of global infections.
    pub fn global_rate(&self) -> f64 {
        let susceptibles = (self.total_size - self.total_infected) as f64;
        self.rates.lambda_g * self.mean_infected() * susceptibles / self.nu_bar_n
    }

    pub fn local_rate(&self) -> f64 {
        self.local.total().max(0.0)
    }

    /// Per-household `(up, down)` rates recomputed from state.
    pub fn household_rates(&self, i: usize) -> (f64, f64) {
        let (n, x) = (self.sizes[i] as f64, self.infected[i] as f64);
        let r = &self.rates;
        let up = (1.0 - x / n)
            * (r.lambda_l * x + r.lambda_g * n / self.nu_bar_n * self.mean_infected());
        (up, r.gamma * x)
    }

    fn set_infected(&mut self, i: usize, x: u32) {
        let old = self.infected[i];
        let n = self.sizes[i];
        self.infected[i] = x;
        if old == 0 && x > 0 {
            self.infected_households += 1;
        } else if old > 0 && x == 0 {
            self.infected_households -= 1;
        }
        self.total_infected = self.total_infected + x as u64 - old as u64;
        self.local.set(i, local_weight(&self.rates, n, x));
        self.susceptible.set(i, (n - x) as u64);
    }

    /// Holding time until the next jump; `None` once absorbed (no infected
    /// left, so every rate vanishes).
    pub fn next_wait(&self, rng: &mut SimRng) -> Option<f64> {
        if self.total_infected == 0 {
            return None;
        }
        let total = self.global_rate() + self.local_rate();
        Some(rng.sample::<f64, _>(Exp1) / total)
    }

    /// Applies one jump drawn from the current rates.
    pub fn jump(&mut self, rng: &mut SimRng) {
        let global = self.global_rate();
        let total = global + self.local_rate();
        if rng.random::<f64>() * total < global {
            let s = self.total_size - self.total_infected;
            let target = rng.random_range(0..s);
            let i = self
                .susceptible
                .find(target)
                .expect("integer tree walk is exact");
            self.set_infected(i, self.infected[i] + 1);
        } else {
            let i = loop {
                let v = rng.random::<f64>() * self.local.total();
                if let Some(i) = self.local.find(v) {
                    break i;
                }
            };
            let (n, x) = (self.sizes[i], self.infected[i]);
            let infect = self.rates.lambda_l * x as f64 * (n - x) as f64 / n as f64;
            let w = infect + self.rates.gamma * x as f64;
            if rng.random::<f64>() * w < infect {
                self.set_infected(i, x + 1);
            } else {
                self.set_infected(i, x - 1);
            }
        }
    }

    /// Draws the holding time and applies the jump.
    pub fn step(&mut self, rng: &mut SimRng) -> Option<f64> {
        let wait = self.next_wait(rng)?;
        self.jump(rng);
        Some(wait)
    }

    /// Empirical law `(1/N) #{i : nu_i = n, X_i = k}` in ragged layout.
    pub fn empirical_joint(&self, n_max: usize) -> Vec<f64> {
        let mut w = vec![0.0; ragged_len(n_max)];
        let unit = 1.0 / self.households() as f64;
        for (&n, &x) in self.sizes.iter().zip(&self.infected) {
            if (n as usize) <= n_max {
                w[row_offset(n as usize) + x as usize] += unit;
            }
        }
        w
    }

    /// Recomputes every cached aggregate and tree leaf from scratch.
    pub fn audit(&self) -> Result<(), SimError> {
        let mut total = 0u64;
        let mut households = 0usize;
        for (i, (&n, &x)) in self.sizes.iter().zip(&self.infected).enumerate() {
            if x > n {
                return Err(SimError::Audit(format!(
                    "household {i}: {x} infected > size {n}"
                )));
            }
            total += x as u64;
            households += (x > 0) as usize;
            let w = local_weight(&self.rates, n, x);
            if self.local.leaf(i) != w {
                return Err(SimError::Audit(format!(
                    "local leaf {i} = {} != {w}",
                    self.local.leaf(i)
                )));
            }
            if self.susceptible.leaf(i) != (n - x) as u64 {
                return Err(SimError::Audit(format!("susceptible leaf {i} stale")));
            }
        }
        if total != self.total_infected {
            return Err(SimError::Audit(format!(
                "cached total {} != recomputed {total}",
                self.total_infected
            )));
        }
        if households != self.infected_households {
            return Err(SimError::Audit("infected-household count stale".into()));
        }
        let s = self.total_size - self.total_infected;
        if self.susceptible.total() != s {
            return Err(SimError::Audit("susceptible tree total stale".into()));
        }
        let direct: f64 = self.local.leaves().iter().sum();
        if (self.local.total() - direct).abs() > 1e-9 * direct.max(1.0) {
            return Err(SimError::Audit(format!(
                "local tree total {} drifted from {direct}",
                self.local.total()
            )));
        }
        Ok(())
    }
}

/// How the initial population is formed.
#[derive(Debug, Clone)]
pub enum InitialCondition {
    /// `(nu_i, X_i)` drawn i.i.d. from a joint law.
    Iid {
        law: JointDist,
        households: usize,
    },
    Explicit {
        sizes: Vec<u32>,
        infected: Vec<u32>,
    },
}

impl InitialCondition {
    pub fn build(&self, rates: Rates, rng: &mut SimRng) -> Result<Population, SimError> {
        match self {
            InitialCondition::Explicit { sizes, infected } => {
                Population::new(rates, sizes.clone(), infected.clone())
            }
            InitialCondition::Iid { law, households } => {
                if *households == 0 {
                    return Err(SimError::NoHouseholds);
                }
                let states: Vec<(u32, u32)> =
                    law.iter().map(|(n, k, _)| (n as u32, k as u32)).collect();
                let index = WeightedIndex::new(law.weights()).expect("joint law has positive mass");
                let (sizes, infected) = (0..*households).map(|_| states[index.sample(rng)]).unzip();
                Population::new(rates, sizes, infected)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum JointRecording {
    None,
    Final,
    All,
}

#[derive(Debug, Clone)]
pub struct FiniteNConfig {
    pub horizon: f64,
    pub sample_dt: f64,
    pub record_joint: JointRecording,
}

/// Summaries of one realization on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventTrace {
    pub times: Vec<f64>,
    pub mean_infected: Vec<f64>,
    pub frac_infected_households: Vec<f64>,
    /// Empirical joint law per recorded sample (ragged, up to `n_max`).
    pub joint: Vec<Vec<f64>>,
    pub n_max: usize,
    pub households: usize,
    pub events: u64,
}

fn record(trace: &mut EventTrace, pop: &Population, joint: bool) {
    trace.mean_infected.push(pop.mean_infected());
    trace
        .frac_infected_households
        .push(pop.frac_infected_households());
    if joint {
        trace.joint.push(pop.empirical_joint(trace.n_max));
    }
    debug_assert!(pop.audit().is_ok(), "{:?}", pop.audit());
}

/// Runs an exact realization from `pop` over `[0, horizon]`.
pub fn run_population(
    pop: &mut Population,
    config: &FiniteNConfig,
    rng: &mut SimRng,
) -> Result<EventTrace, SimError> {
    let times = sample_times(config.horizon, config.sample_dt)?;
    let n_max = pop.sizes.iter().copied().max().unwrap_or(1) as usize;
    let last = times.len() - 1;
    let mut trace = EventTrace {
        mean_infected: Vec::with_capacity(times.len()),
        frac_infected_households: Vec::with_capacity(times.len()),
        joint: Vec::new(),
        n_max,
        households: pop.households(),
        events: 0,
        times,
    };
    let wants_joint = |j: usize| match config.record_joint {
        JointRecording::None => false,
        JointRecording::Final => j == last,
        JointRecording::All => true,
    };
    let mut t = 0.0;
    let mut next = 0usize;
    while next <= last {
        // The state is constant on [t, t + wait).
        let wait = pop.next_wait(rng).unwrap_or(f64::INFINITY);
        while next <= last && trace.times[next] < t + wait {
            record(&mut trace, pop, wants_joint(next));
            next += 1;
        }
        if next > last {
            break;
        }
        pop.jump(rng);
        t += wait;
        trace.events += 1;
    }
    Ok(trace)
}

/// One exact realization with `N` households from `init`. Deterministic in
/// `(model, init, config, seed)`.
pub fn simulate_finite_n(
    model: &Model,
    init: &InitialCondition,
    config: &FiniteNConfig,
    seed: u64,
) -> Result<EventTrace, SimError> {
    let mut rng = replica_rng(seed, 0);
    simulate_finite_n_with(model, init, config, &mut rng)
}

pub fn simulate_finite_n_with(
    model: &Model,
    init: &InitialCondition,
    config: &FiniteNConfig,
    rng: &mut SimRng,
) -> Result<EventTrace, SimError> {
    let mut pop = init.build(*model.rates(), rng)?;
    run_population(&mut pop, config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SizeDist;
    use std::sync::Arc;

    fn model(l: f64, g: f64, gamma: f64, sizes: SizeDist) -> Model {
        Model::validate_relaxed(Rates::new(l, g, gamma), sizes).unwrap()
    }

    #[test]
    fn disease_free_single_household_stays_empty() {
        let m = model(1.0, 3.0, 1.0, SizeDist::delta(1));
        let init = InitialCondition::Explicit {
            sizes: vec![1],
            infected: vec![0],
        };
        let cfg = FiniteNConfig {
            horizon: 10.0,
            sample_dt: 0.5,
            record_joint: JointRecording::None,
        };
        let trace = simulate_finite_n(&m, &init, &cfg, 1).unwrap();
        assert_eq!(trace.times.len(), 21);
        assert!(trace.mean_infected.iter().all(|&v| v == 0.0));
        assert_eq!(trace.events, 0);
    }

    #[test]
    fn invalid_initial_rejected() {
        let m = model(1.0, 1.0, 1.0, SizeDist::delta(2));
        let init = InitialCondition::Explicit {
            sizes: vec![2, 2],
            infected: vec![1, 3],
        };
        let cfg = FiniteNConfig {
            horizon: 1.0,
            sample_dt: 0.5,
            record_joint: JointRecording::None,
        };
        assert!(matches!(
            simulate_finite_n(&m, &init, &cfg, 1),
            Err(SimError::InvalidInitial { index: 1, .. })
        ));
    }

    #[test]
    fn single_household_recovery_time_is_exponential() {
        // lambda_g = 0, one size-1 household: absorption time ~ Exp(gamma).
        let gamma = 2.0;
        let m = model(0.0, 0.0, gamma, SizeDist::delta(1));
        let replicas = 20_000;
        let mut times = Vec::with_capacity(replicas);
        for r in 0..replicas {
            let mut rng = replica_rng(11, r as u64);
            let mut pop = Population::new(*m.rates(), vec![1], vec![1]).unwrap();
            let t = pop.step(&mut rng).unwrap();
            assert_eq!(pop.total_infected(), 0);
            assert!(pop.step(&mut rng).is_none());
            times.push(t);
        }
        let mean = times.iter().sum::<f64>() / replicas as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (replicas - 1) as f64;
        let se = (var / replicas as f64).sqrt();
        assert!((mean - 1.0 / gamma).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn audit_holds_through_a_run() {
        let sizes = Arc::new(SizeDist::geometric(0.4, 1e-10).unwrap());
        let m = Model::validate(Rates::new(1.2, 1.0, 1.0), (*sizes).clone()).unwrap();
        let mut rng = replica_rng(5, 0);
        let init = InitialCondition::Iid {
            law: JointDist::binomial(sizes, 0.3).unwrap(),
            households: 300,
        };
        let mut pop = init.build(*m.rates(), &mut rng).unwrap();
        for _ in 0..20_000 {
            let before = pop.total_infected() as i64;
            if pop.step(&mut rng).is_none() {
                break;
            }
            assert_eq!((pop.total_infected() as i64 - before).abs(), 1);
        }
        pop.audit().unwrap();
        for (&n, &x) in pop.sizes().iter().zip(pop.infected()) {
            assert!(x <= n);
        }
    }

    #[test]
    fn household_rates_match_model_form() {
        let m = model(1.5, 0.7, 1.0, SizeDist::delta(3));
        let pop = Population::new(*m.rates(), vec![3, 3, 3], vec![1, 0, 3]).unwrap();
        // nu_bar_N = pi_bar = 3 here, so the population rates equal the
        // generator row at m = mean infected.
        for i in 0..3 {
            let (up, down) = pop.household_rates(i);
            let (mu, md) = m
                .generator_row(3, pop.infected()[i] as usize, pop.mean_infected())
                .unwrap();
            assert!((up - mu).abs() < 1e-14 && (down - md).abs() < 1e-14);
        }
        let total_up: f64 = (0..3).map(|i| pop.household_rates(i).0).sum();
        let local_up: f64 = [1u32, 0, 3]
            .iter()
            .map(|&x| 1.5 * x as f64 * (3 - x) as f64 / 3.0)
            .sum();
        assert!((total_up - local_up - pop.global_rate()).abs() < 1e-14);
    }

    #[test]
    fn same_seed_same_trace() {
        let sizes = Arc::new(SizeDist::delta(2));
        let m = Model::validate(Rates::new(1.0, 1.5, 1.0), (*sizes).clone()).unwrap();
        let init = InitialCondition::Iid {
            law: JointDist::binomial(sizes, 0.5).unwrap(),
            households: 200,
        };
        let cfg = FiniteNConfig {
            horizon: 5.0,
            sample_dt: 0.25,
            record_joint: JointRecording::All,
        };
        let a = simulate_finite_n(&m, &init, &cfg, 99).unwrap();
        let b = simulate_finite_n(&m, &init, &cfg, 99).unwrap();
        assert_eq!(a, b);
        let c = simulate_finite_n(&m, &init, &cfg, 100).unwrap();
        assert_ne!(a.mean_infected, c.mean_infected);
    }

    #[test]
    fn homogeneous_endemic_level() {
        // pi = delta_1, lambda_g = 2, gamma = 1: long-run mean 1 - gamma/lambda_g.
        let sizes = Arc::new(SizeDist::delta(1));
        let m = Model::validate(Rates::new(1.0, 2.0, 1.0), (*sizes).clone()).unwrap();
        let init = InitialCondition::Iid {
            law: JointDist::binomial(sizes, 0.5).unwrap(),
            households: 10_000,
        };
        let cfg = FiniteNConfig {
            horizon: 40.0,
            sample_dt: 0.1,
            record_joint: JointRecording::None,
        };
        let trace = simulate_finite_n(&m, &init, &cfg, 2024).unwrap();
        let window: Vec<f64> = trace
            .times
            .iter()
            .zip(&trace.mean_infected)
            .filter(|(t, _)| **t >= 20.0)
            .map(|(_, v)| *v)
            .collect();
        let avg = window.iter().sum::<f64>() / window.len() as f64;
        assert!((avg - 0.5).abs() < 0.02, "time average {avg}");
    }

    #[test]
    fn jumps_aggregate_between_samples() {
        let sizes = Arc::new(SizeDist::delta(3));
        let m = Model::validate(Rates::new(1.0, 1.0, 1.0), (*sizes).clone()).unwrap();
        let init = InitialCondition::Iid {
            law: JointDist::binomial(sizes, 0.4).unwrap(),
            households: 50,
        };
        let cfg = FiniteNConfig {
            horizon: 3.0,
            sample_dt: 0.5,
            record_joint: JointRecording::All,
        };
        let trace = simulate_finite_n(&m, &init, &cfg, 3).unwrap();
        for (mean, joint) in trace.mean_infected.iter().zip(&trace.joint) {
            let from_joint: f64 = (1..=3)
                .flat_map(|n| (0..=n).map(move |k| (n, k)))
                .map(|(n, k)| k as f64 * joint[row_offset(n) + k])
                .sum();
            assert!((mean - from_joint).abs() < 1e-12);
            let mass: f64 = joint.iter().sum();
            assert!((mass - 1.0).abs() < 1e-12);
        }
    }
}
