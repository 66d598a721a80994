//! A single household with local infections only: up-rate
//! `lambda_l (1 - I/n) I`, down-rate `gamma I`.

use rand::Rng;
use rand_distr::Exp1;

use super::SimError;
use crate::model::{Model, ModelError};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq)]
pub struct IsolatedPath {
    /// Jump times, starting with `0`.
    pub times: Vec<f64>,
    /// `I` on `[times[j], times[j+1])`.
    pub values: Vec<u32>,
    /// `int_0^horizon I(s) ds`.
    pub integral: f64,
    pub absorbed_at: Option<f64>,
}

impl IsolatedPath {
    pub fn value_at(&self, t: f64) -> u32 {
        let j = self.times.partition_point(|&s| s <= t);
        self.values[j.saturating_sub(1)]
    }
}

fn check(n: usize, i0: usize) -> Result<(), SimError> {
    if n == 0 {
        return Err(ModelError::ZeroSize.into());
    }
    if i0 > n {
        return Err(ModelError::InfectedOutOfRange { n, x: i0 }.into());
    }
    Ok(())
}

/// Simulates `I` on `[0, horizon]`; `horizon = inf` runs to absorption.
pub fn simulate_isolated(
    model: &Model,
    n: usize,
    i0: usize,
    horizon: f64,
    rng: &mut SimRng,
) -> Result<IsolatedPath, SimError> {
    check(n, i0)?;
    if horizon.is_nan() || horizon < 0.0 {
        return Err(SimError::BadHorizon(horizon));
    }
    let r = model.rates();
    let nf = n as f64;
    let mut path = IsolatedPath {
        times: vec![0.0],
        values: vec![i0 as u32],
        integral: 0.0,
        absorbed_at: None,
    };
    let mut t = 0.0;
    let mut x = i0;
    if x == 0 {
        path.absorbed_at = Some(0.0);
        return Ok(path);
    }
    loop {
        let xf = x as f64;
        let up = r.lambda_l * xf * (nf - xf) / nf;
        let total = up + r.gamma * xf;
        let wait = rng.sample::<f64, _>(Exp1) / total;
        if t + wait > horizon {
            path.integral += xf * (horizon - t);
            break;
        }
        path.integral += xf * wait;
        t += wait;
        x = if rng.random::<f64>() * total < up {
            x + 1
        } else {
            x - 1
        };
        path.times.push(t);
        path.values.push(x as u32);
        if x == 0 {
            path.absorbed_at = Some(t);
            break;
        }
    }
    Ok(path)
}

/// `int_0^inf I(s) ds` until absorption, without recording the path.
pub fn isolated_integral(
    model: &Model,
    n: usize,
    i0: usize,
    rng: &mut SimRng,
) -> Result<f64, SimError> {
    check(n, i0)?;
    let r = model.rates();
    let nf = n as f64;
    let mut x = i0;
    let mut integral = 0.0;
    while x > 0 {
        let xf = x as f64;
        let up = r.lambda_l * xf * (nf - xf) / nf;
        let total = up + r.gamma * xf;
        integral += xf * rng.sample::<f64, _>(Exp1) / total;
        x = if rng.random::<f64>() * total < up {
            x + 1
        } else {
            x - 1
        };
    }
    Ok(integral)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Rates, SizeDist};
    use crate::rng::replica_rng;

    fn mean_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn size_one_is_a_single_exponential_sojourn() {
        let m = Model::validate(Rates::new(5.0, 1.0, 1.0), SizeDist::delta(1)).unwrap();
        let mut rng = replica_rng(1, 0);
        let samples: Vec<f64> = (0..20_000)
            .map(|_| {
                let p = simulate_isolated(&m, 1, 1, f64::INFINITY, &mut rng).unwrap();
                assert_eq!(p.values, vec![1, 0]);
                p.integral
            })
            .collect();
        let (mean, se) = mean_se(&samples);
        assert!((mean - 1.0).abs() < 3.0 * se, "{mean} +- {se}");
    }

    #[test]
    fn pair_household_integral_matches_recursion_value() {
        // n = 2, i0 = 1, lambda_l = gamma = 1: E[int I] = psi(2,1)/gamma = 1.5.
        let m = Model::validate(Rates::new(1.0, 1.0, 1.0), SizeDist::delta(2)).unwrap();
        let mut rng = replica_rng(2, 0);
        let samples: Vec<f64> = (0..100_000)
            .map(|_| isolated_integral(&m, 2, 1, &mut rng).unwrap())
            .collect();
        let (mean, se) = mean_se(&samples);
        assert!((mean - 1.5).abs() < 3.0 * se, "{mean} +- {se}");
    }

    #[test]
    fn zero_start_is_absorbed() {
        let m = Model::validate(Rates::new(1.0, 1.0, 1.0), SizeDist::delta(4)).unwrap();
        let mut rng = replica_rng(3, 0);
        let p = simulate_isolated(&m, 4, 0, 10.0, &mut rng).unwrap();
        assert_eq!(p.integral, 0.0);
        assert_eq!(p.value_at(5.0), 0);
        assert_eq!(isolated_integral(&m, 4, 0, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn finite_horizon_integral_is_piecewise_exact() {
        let m = Model::validate(Rates::new(2.0, 1.0, 0.5), SizeDist::delta(5)).unwrap();
        let mut rng = replica_rng(4, 0);
        let p = simulate_isolated(&m, 5, 2, 3.0, &mut rng).unwrap();
        let mut acc = 0.0;
        for j in 0..p.times.len() {
            let end = p.times.get(j + 1).copied().unwrap_or(3.0).min(3.0);
            acc += p.values[j] as f64 * (end - p.times[j]);
        }
        assert!((acc - p.integral).abs() < 1e-12);
        assert!(p.values.windows(2).all(|w| w[0].abs_diff(w[1]) == 1));
    }

    #[test]
    fn out_of_range_start_rejected() {
        let m = Model::validate(Rates::new(1.0, 1.0, 1.0), SizeDist::delta(2)).unwrap();
        let mut rng = replica_rng(5, 0);
        assert!(simulate_isolated(&m, 2, 3, 1.0, &mut rng).is_err());
    }
}
