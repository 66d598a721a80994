use std::sync::Arc;

use super::{ModelError, SizeDist};

/// Entries down to this value are treated as rounding and clamped to zero.
pub const NEGATIVE_TOLERANCE: f64 = 1e-12;
/// Entries below this value are a hard error when sanitizing.
pub const NEGATIVE_ABORT: f64 = -1e-8;
const MASS_TOLERANCE: f64 = 1e-10;

/// Offset of row `n` (states `(n, 0..=n)`) in the ragged layout.
#[inline]
pub const fn row_offset(n: usize) -> usize {
    (n - 1) * (n + 2) / 2
}

/// Number of states `(n, k)` with `1 <= n <= n_max`.
#[inline]
pub const fn ragged_len(n_max: usize) -> usize {
    n_max * (n_max + 3) / 2
}

/// Probability measure `mu[n,k] = P(nu = n, X = k)` whose first marginal
/// is the referenced size distribution.
///
/// Stored ragged: row `n` has `n + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDist {
    sizes: Arc<SizeDist>,
    weights: Vec<f64>,
}

impl JointDist {
    /// Validates mass, marginals and sign. Entries in
    /// `[-NEGATIVE_TOLERANCE, 0)` are clamped to zero.
    pub fn from_weights(sizes: Arc<SizeDist>, mut weights: Vec<f64>) -> Result<Self, ModelError> {
        let n_max = sizes.n_max();
        let expected = ragged_len(n_max);
        if weights.len() != expected {
            return Err(ModelError::LayoutMismatch {
                got: weights.len(),
                expected,
                n_max,
            });
        }
        for n in 1..=n_max {
            let off = row_offset(n);
            for k in 0..=n {
                let w = &mut weights[off + k];
                if !w.is_finite() || *w < -NEGATIVE_TOLERANCE {
                    return Err(ModelError::NegativeWeight { n, k, w: *w });
                }
                if *w < 0.0 {
                    *w = 0.0;
                }
            }
        }
        check_marginals(&sizes, &weights, MASS_TOLERANCE)?;
        Ok(Self { sizes, weights })
    }

    /// Builds row `n` from the conditional law `f(n)` of `X` given `nu = n`
    /// (length `n + 1`, any positive scale), rescaled to sum to `pi(n)`.
    pub fn from_conditional(
        sizes: Arc<SizeDist>,
        mut f: impl FnMut(usize) -> Vec<f64>,
    ) -> Result<Self, ModelError> {
        let n_max = sizes.n_max();
        let mut weights = vec![0.0; ragged_len(n_max)];
        for n in 1..=n_max {
            let row = f(n);
            assert_eq!(
                row.len(),
                n + 1,
                "conditional row for n = {n} has wrong length"
            );
            let total: f64 = row.iter().sum();
            let pi_n = sizes.prob(n);
            let off = row_offset(n);
            if total > 0.0 {
                for (k, w) in row.iter().enumerate() {
                    weights[off + k] = pi_n * w / total;
                }
            } else {
                weights[off] = pi_n;
            }
        }
        Self::from_weights(sizes, weights)
    }

    /// `pi (x) delta_0`: nobody infected.
    pub fn disease_free(sizes: Arc<SizeDist>) -> Self {
        let mut weights = vec![0.0; ragged_len(sizes.n_max())];
        for n in 1..=sizes.n_max() {
            weights[row_offset(n)] = sizes.prob(n);
        }
        Self { sizes, weights }
    }

    /// Every individual independently infected with probability `q`.
    pub fn binomial(sizes: Arc<SizeDist>, q: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&q) {
            return Err(ModelError::BadFamilyParameter {
                name: "q",
                value: q,
            });
        }
        Self::from_conditional(sizes, |n| binomial_row(n, q))
    }

    /// All mass of row `n` at `k = min(x, n)`.
    pub fn fixed_count(sizes: Arc<SizeDist>, x: usize) -> Result<Self, ModelError> {
        Self::from_conditional(sizes, |n| {
            let mut row = vec![0.0; n + 1];
            row[x.min(n)] = 1.0;
            row
        })
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

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn get(&self, n: usize, k: usize) -> f64 {
        if n == 0 || n > self.n_max() || k > n {
            0.0
        } else {
            self.weights[row_offset(n) + k]
        }
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let off = row_offset(n);
        &self.weights[off..off + n + 1]
    }

    /// `(n, k, weight)` for every state.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (1..=self.n_max())
            .flat_map(move |n| self.row(n).iter().enumerate().map(move |(k, &w)| (n, k, w)))
    }

    /// `E[X] = sum_n sum_k k mu[n,k]`.
    pub fn mean_infected(&self) -> f64 {
        mean_of_ragged(&self.weights, self.n_max())
    }

    /// `P(X >= 1)`.
    pub fn prob_infected(&self) -> f64 {
        1.0 - (1..=self.n_max())
            .map(|n| self.weights[row_offset(n)])
            .sum::<f64>()
    }

    pub fn total_variation(&self, other: &JointDist) -> f64 {
        total_variation(&self.weights, &other.weights)
    }
}

pub(crate) fn mean_of_ragged(weights: &[f64], n_max: usize) -> f64 {
    let mut mean = 0.0;
    for n in 1..=n_max {
        let off = row_offset(n);
        for k in 1..=n {
            mean += k as f64 * weights[off + k];
        }
    }
    mean
}

/// Half the L1 distance; shorter vectors are zero-padded.
pub(crate) fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().max(b.len());
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    0.5 * (0..len).map(|i| (at(a, i) - at(b, i)).abs()).sum::<f64>()
}

fn check_marginals(sizes: &SizeDist, weights: &[f64], tol: f64) -> Result<(), ModelError> {
    let mut total = 0.0;
    for n in 1..=sizes.n_max() {
        let off = row_offset(n);
        let sum: f64 = weights[off..off + n + 1].iter().sum();
        let expected = sizes.prob(n);
        if (sum - expected).abs() > tol {
            return Err(ModelError::MarginalMismatch { n, sum, expected });
        }
        total += sum;
    }
    if (total - 1.0).abs() > tol {
        return Err(ModelError::Unnormalized { sum: total });
    }
    Ok(())
}

/// Clamps small negative entries to zero and rescales each row to `pi(n)`.
/// Returns the largest pre-rescaling row defect `|sum_k mu[n,k] - pi(n)|`.
pub(crate) fn renormalize_rows(sizes: &SizeDist, weights: &mut [f64]) -> Result<f64, ModelError> {
    let mut defect: f64 = 0.0;
    for n in 1..=sizes.n_max() {
        let off = row_offset(n);
        let row = &mut weights[off..off + n + 1];
        for (k, w) in row.iter_mut().enumerate() {
            if !w.is_finite() || *w < NEGATIVE_ABORT {
                return Err(ModelError::NegativeWeight { n, k, w: *w });
            }
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let sum: f64 = row.iter().sum();
        let pi_n = sizes.prob(n);
        defect = defect.max((sum - pi_n).abs());
        if sum > 0.0 {
            let scale = pi_n / sum;
            row.iter_mut().for_each(|w| *w *= scale);
        } else {
            row[0] = pi_n;
        }
    }
    Ok(defect)
}

pub(crate) fn binomial_row(n: usize, q: f64) -> Vec<f64> {
    let mut row = vec![0.0; n + 1];
    let mut coeff = 1.0;
    for (k, w) in row.iter_mut().enumerate() {
        *w = coeff * q.powi(k as i32) * (1.0 - q).powi((n - k) as i32);
        coeff *= (n - k) as f64 / (k + 1) as f64;
    }
    row
}
