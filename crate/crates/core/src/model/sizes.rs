use std::collections::BTreeMap;

use serde::Serialize;

use super::ModelError;

const SUM_TOLERANCE: f64 = 1e-12;
/// Hard cap on truncation points for infinite-support families.
const MAX_TRUNCATION: usize = 100_000;

/// Household-size distribution `pi` on `1..=n_max` with its size-biased
/// companion `pi+(n) = n pi(n) / pi_bar`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeDist {
    /// `probs[n - 1] = pi(n)`.
    probs: Vec<f64>,
    size_biased: Vec<f64>,
    pi_bar: f64,
    pi_bar_plus: f64,
    /// Mass discarded when an infinite-support family was truncated.
    tail_mass: f64,
}

impl SizeDist {
    /// Point mass at household size `n`.
    pub fn delta(n: usize) -> Self {
        assert!(n >= 1, "household size must be >= 1");
        let mut probs = vec![0.0; n];
        probs[n - 1] = 1.0;
        Self::build(probs, 0.0)
    }

    /// `probs[n - 1] = pi(n)`. Rejects negative entries and sums off by more
    /// than 1e-12, then rescales the residual rounding away.
    pub fn from_probs(mut probs: Vec<f64>) -> Result<Self, ModelError> {
        for (i, &p) in probs.iter().enumerate() {
            if !(p.is_finite() && (0.0..=1.0 + SUM_TOLERANCE).contains(&p)) {
                return Err(ModelError::BadProbability { n: i + 1, p });
            }
        }
        while probs.last() == Some(&0.0) {
            probs.pop();
        }
        if probs.is_empty() {
            return Err(ModelError::EmptySupport);
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(ModelError::Unnormalized { sum });
        }
        probs.iter_mut().for_each(|p| *p /= sum);
        Ok(Self::build(probs, 0.0))
    }

    pub fn from_map(map: &BTreeMap<usize, f64>) -> Result<Self, ModelError> {
        if map.contains_key(&0) {
            return Err(ModelError::ZeroSize);
        }
        let n_max = map
            .keys()
            .next_back()
            .copied()
            .ok_or(ModelError::EmptySupport)?;
        let mut probs = vec![0.0; n_max];
        for (&n, &p) in map {
            probs[n - 1] = p;
        }
        Self::from_probs(probs)
    }

    /// `pi(n) = p (1-p)^(n-1)`, truncated where the tail drops below
    /// `tail_tol` and renormalized.
    pub fn geometric(p: f64, tail_tol: f64) -> Result<Self, ModelError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(ModelError::BadFamilyParameter {
                name: "p",
                value: p,
            });
        }
        Self::truncate_family(
            |n, prev| if n == 1 { p } else { prev * (1.0 - p) },
            tail_tol,
            None,
        )
    }

    /// Geometric family truncated at an explicit `n_max`.
    pub fn geometric_at(p: f64, n_max: usize) -> Result<Self, ModelError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(ModelError::BadFamilyParameter {
                name: "p",
                value: p,
            });
        }
        Self::truncate_family(
            |n, prev| if n == 1 { p } else { prev * (1.0 - p) },
            0.0,
            Some(n_max),
        )
    }

    /// `nu - 1 ~ Poisson(mu)`.
    pub fn shifted_poisson(mu: f64, tail_tol: f64) -> Result<Self, ModelError> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(ModelError::BadFamilyParameter {
                name: "mu",
                value: mu,
            });
        }
        Self::truncate_family(poisson_step(mu), tail_tol, None)
    }

    pub fn shifted_poisson_at(mu: f64, n_max: usize) -> Result<Self, ModelError> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(ModelError::BadFamilyParameter {
                name: "mu",
                value: mu,
            });
        }
        Self::truncate_family(poisson_step(mu), 0.0, Some(n_max))
    }

    /// Walks the pmf via `next(n, pi(n-1))` until the remaining tail mass is
    /// below `tail_tol`, or up to `fixed_n_max`.
    fn truncate_family(
        mut next: impl FnMut(usize, f64) -> f64,
        tail_tol: f64,
        fixed_n_max: Option<usize>,
    ) -> Result<Self, ModelError> {
        if fixed_n_max.is_none() && (tail_tol.is_nan() || tail_tol <= 0.0) {
            return Err(ModelError::BadFamilyParameter {
                name: "tail_tol",
                value: tail_tol,
            });
        }
        let limit = fixed_n_max.unwrap_or(MAX_TRUNCATION);
        if limit == 0 {
            return Err(ModelError::EmptySupport);
        }
        let mut probs = Vec::new();
        let mut prev = 0.0;
        let mut cumulative = 0.0;
        for n in 1..=limit {
            prev = next(n, prev);
            probs.push(prev);
            cumulative += prev;
            if fixed_n_max.is_none() && 1.0 - cumulative < tail_tol {
                break;
            }
        }
        let tail = (1.0 - cumulative).max(0.0);
        if fixed_n_max.is_none() && tail >= tail_tol {
            return Err(ModelError::TruncationTooLarge { limit, tail_tol });
        }
        while probs.last() == Some(&0.0) {
            probs.pop();
        }
        if probs.is_empty() {
            return Err(ModelError::EmptySupport);
        }
        probs.iter_mut().for_each(|p| *p /= cumulative);
        Ok(Self::build(probs, tail))
    }

    fn build(probs: Vec<f64>, tail_mass: f64) -> Self {
        let pi_bar: f64 = probs
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p)
            .sum();
        let size_biased: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p / pi_bar)
            .collect();
        let pi_bar_plus = size_biased
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p)
            .sum();
        Self {
            probs,
            size_biased,
            pi_bar,
            pi_bar_plus,
            tail_mass,
        }
    }

    pub fn n_max(&self) -> usize {
        self.probs.len()
    }

    /// `pi(n)`, zero outside the support.
    pub fn prob(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.probs.get(n - 1).copied().unwrap_or(0.0)
        }
    }

    pub fn size_biased_prob(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.size_biased.get(n - 1).copied().unwrap_or(0.0)
        }
    }

    /// `pi(1), ..., pi(n_max)`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn size_biased(&self) -> &[f64] {
        &self.size_biased
    }

    pub fn pi_bar(&self) -> f64 {
        self.pi_bar
    }

    /// `E[nu^2] / E[nu]`.
    pub fn pi_bar_plus(&self) -> f64 {
        self.pi_bar_plus
    }

    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    /// Sizes with positive probability, ascending.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (i + 1, p))
    }
}

fn poisson_step(mu: f64) -> impl FnMut(usize, f64) -> f64 {
    move |n, prev| {
        if n == 1 {
            (-mu).exp()
        } else {
            prev * mu / (n - 1) as f64
        }
    }
}
