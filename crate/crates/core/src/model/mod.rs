//! Core domain types for the SIS household model.
//!
//! A [`Model`] bundles the three epidemic [`Rates`] with a household
//! [`SizeDist`]. Laws of `(household size, infected count)` pairs live in
//! [`JointDist`], and deterministic time-gridded functions (forcing terms,
//! mean trajectories) in [`SampledPath`].

mod joint;
mod path;
mod sizes;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) use joint::{mean_of_ragged, renormalize_rows, total_variation};
pub use joint::{ragged_len, row_offset, JointDist, NEGATIVE_ABORT, NEGATIVE_TOLERANCE};
pub use path::SampledPath;
pub use sizes::SizeDist;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("{name} must be > 0 (got {value})")]
    NonPositiveRate { name: &'static str, value: f64 },
    #[error("{name} must be >= 0 (got {value})")]
    NegativeRate { name: &'static str, value: f64 },
    #[error("pi must sum to 1 (sum = {sum})")]
    Unnormalized { sum: f64 },
    #[error("pi({n}) = {p} is not a probability")]
    BadProbability { n: usize, p: f64 },
    #[error("household sizes must be >= 1")]
    ZeroSize,
    #[error("pi has empty support")]
    EmptySupport,
    #[error("size distribution parameter {name} = {value} out of range")]
    BadFamilyParameter { name: &'static str, value: f64 },
    #[error("truncation needs n_max > {limit} to reach tail mass {tail_tol}; refusing (infinite moment request)")]
    TruncationTooLarge { limit: usize, tail_tol: f64 },
    #[error("infected count {x} outside 0..={n}")]
    InfectedOutOfRange { n: usize, x: usize },
    #[error("household size {n} outside the support 1..={n_max}")]
    SizeOutOfRange { n: usize, n_max: usize },
    #[error("forcing value m = {m} must be finite and >= 0")]
    BadForcing { m: f64 },
    #[error("joint distribution has {got} weights, expected {expected} for n_max = {n_max}")]
    LayoutMismatch {
        got: usize,
        expected: usize,
        n_max: usize,
    },
    #[error("joint weight mu[{n},{k}] = {w} is negative beyond tolerance")]
    NegativeWeight { n: usize, k: usize, w: f64 },
    #[error("row {n} of the joint distribution sums to {sum}, expected pi({n}) = {expected}")]
    MarginalMismatch { n: usize, sum: f64, expected: f64 },
    #[error("sampled path value {value} at index {index} outside [{lo}, {hi}]")]
    PathOutOfRange {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("sampled path needs dt > 0 and at least one sample")]
    BadGrid,
}

/// Local infection, global infection and recovery rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub lambda_l: f64,
    pub lambda_g: f64,
    pub gamma: f64,
}

impl Rates {
    pub fn new(lambda_l: f64, lambda_g: f64, gamma: f64) -> Self {
        Self {
            lambda_l,
            lambda_g,
            gamma,
        }
    }

    fn check(&self, relaxed: bool) -> Result<(), ModelError> {
        let fields = [
            ("lambda_l", self.lambda_l),
            ("lambda_g", self.lambda_g),
            ("gamma", self.gamma),
        ];
        for (name, value) in fields {
            let may_vanish = relaxed && name != "gamma";
            if !value.is_finite() || value < 0.0 || (value == 0.0 && !may_vanish) {
                return Err(if may_vanish {
                    ModelError::NegativeRate { name, value }
                } else {
                    ModelError::NonPositiveRate { name, value }
                });
            }
        }
        Ok(())
    }
}

/// Checked bundle of rates and household sizes shared by every other module.
#[derive(Debug, Clone)]
pub struct Model {
    rates: Rates,
    sizes: Arc<SizeDist>,
}

impl Model {
    /// All three rates strictly positive.
    pub fn validate(rates: Rates, sizes: SizeDist) -> Result<Self, ModelError> {
        rates.check(false)?;
        Ok(Self {
            rates,
            sizes: Arc::new(sizes),
        })
    }

    /// Allows `lambda_l = 0` and `lambda_g = 0` (pure global or pure local
    /// dynamics). `gamma` must still be positive.
    pub fn validate_relaxed(rates: Rates, sizes: SizeDist) -> Result<Self, ModelError> {
        rates.check(true)?;
        Ok(Self {
            rates,
            sizes: Arc::new(sizes),
        })
    }

    pub fn rates(&self) -> &Rates {
        &self.rates
    }

    pub fn sizes(&self) -> &SizeDist {
        &self.sizes
    }

    pub fn sizes_arc(&self) -> &Arc<SizeDist> {
        &self.sizes
    }

    pub fn n_max(&self) -> usize {
        self.sizes.n_max()
    }

    pub fn pi_bar(&self) -> f64 {
        self.sizes.pi_bar()
    }

    /// Jump rates of one household of size `n` with `x` infected under
    /// forcing `m`: `(up, down)`.
    pub fn generator_row(&self, n: usize, x: usize, m: f64) -> Result<(f64, f64), ModelError> {
        if n == 0 {
            return Err(ModelError::ZeroSize);
        }
        if x > n {
            return Err(ModelError::InfectedOutOfRange { n, x });
        }
        if !(m.is_finite() && m >= 0.0) {
            return Err(ModelError::BadForcing { m });
        }
        Ok((self.up_rate(n, x, m), self.down_rate(x)))
    }

    /// `(1 - x/n) [lambda_l x + lambda_g (n / pi_bar) m]`, unchecked.
    #[inline]
    pub fn up_rate(&self, n: usize, x: usize, m: f64) -> f64 {
        let n_f = n as f64;
        let x_f = x as f64;
        let susceptible = (n - x) as f64 / n_f;
        susceptible
            * (self.rates.lambda_l * x_f + self.rates.lambda_g * n_f / self.sizes.pi_bar() * m)
    }

    #[inline]
    pub fn down_rate(&self, x: usize) -> f64 {
        self.rates.gamma * x as f64
    }

    /// Largest total jump rate over all states with `m <= pi_bar`; bounds the
    /// explicit integrator step.
    pub fn max_total_rate(&self) -> f64 {
        let r = &self.rates;
        (r.lambda_l + r.lambda_g + r.gamma) * self.n_max() as f64
    }
}

/// Free-function form of [`JointDist::mean_infected`].
pub fn mean_infected(mu: &JointDist) -> f64 {
    mu.mean_infected()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Model {
        Model::validate(Rates::new(1.0, 1.0, 1.0), SizeDist::delta(1)).unwrap()
    }

    #[test]
    fn simplest_model_is_valid() {
        let m = unit();
        assert_eq!(m.pi_bar(), 1.0);
        assert_eq!(m.n_max(), 1);
    }

    #[test]
    fn negative_local_rate_rejected() {
        let err = Model::validate(Rates::new(-1.0, 1.0, 1.0), SizeDist::delta(1)).unwrap_err();
        assert_eq!(err.to_string(), "lambda_l must be > 0 (got -1)");
    }

    #[test]
    fn relaxed_mode_allows_zero_local_rate_only_for_infections() {
        assert!(Model::validate(Rates::new(0.0, 1.0, 1.0), SizeDist::delta(2)).is_err());
        assert!(Model::validate_relaxed(Rates::new(0.0, 1.0, 1.0), SizeDist::delta(2)).is_ok());
        assert!(Model::validate_relaxed(Rates::new(1.0, 0.0, 1.0), SizeDist::delta(2)).is_ok());
        assert!(Model::validate_relaxed(Rates::new(1.0, 1.0, 0.0), SizeDist::delta(2)).is_err());
        assert!(Model::validate_relaxed(Rates::new(-0.5, 1.0, 1.0), SizeDist::delta(2)).is_err());
    }

    #[test]
    fn full_household_cannot_gain() {
        let m = Model::validate(Rates::new(1.0, 1.0, 0.7), SizeDist::delta(2)).unwrap();
        for mf in [0.0, 0.5, 2.0] {
            let (up, down) = m.generator_row(2, 2, mf).unwrap();
            assert_eq!(up, 0.0);
            assert!((down - 1.4).abs() < 1e-15);
        }
    }

    #[test]
    fn single_household_forced_only() {
        let m = Model::validate(Rates::new(3.0, 1.5, 1.0), SizeDist::delta(1)).unwrap();
        let (up, down) = m.generator_row(1, 0, 0.3).unwrap();
        assert!((up - 1.5 * 0.3).abs() < 1e-15);
        assert_eq!(down, 0.0);
    }

    #[test]
    fn hand_evaluated_row() {
        let m = Model::validate(Rates::new(1.0, 1.0, 1.0), SizeDist::delta(3)).unwrap();
        let (up, down) = m.generator_row(3, 1, 0.0).unwrap();
        assert!((up - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(down, 1.0);
    }

    #[test]
    fn generator_row_rejects_bad_state() {
        let m = unit();
        assert!(matches!(
            m.generator_row(1, 2, 0.0),
            Err(ModelError::InfectedOutOfRange { .. })
        ));
        assert!(matches!(
            m.generator_row(1, 0, -0.1),
            Err(ModelError::BadForcing { .. })
        ));
    }

    #[test]
    fn boundary_rates_vanish_for_every_size() {
        let sizes = SizeDist::geometric(0.3, 1e-10).unwrap();
        let m = Model::validate(Rates::new(1.3, 0.8, 1.1), sizes).unwrap();
        for n in 1..=m.n_max() {
            assert_eq!(m.generator_row(n, n, 0.9).unwrap().0, 0.0);
            assert_eq!(m.generator_row(n, 0, 0.9).unwrap().1, 0.0);
        }
    }
}
