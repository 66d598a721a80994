use super::ModelError;

const RANGE_TOLERANCE: f64 = 1e-12;

/// Real-valued function sampled on the uniform grid `t0 + i dt`.
///
/// Evaluation interpolates linearly between samples and holds the end
/// values outside the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    t0: f64,
    dt: f64,
    values: Vec<f64>,
    range: (f64, f64),
}

impl SampledPath {
    /// Values within `1e-12` of the range are clamped into it.
    pub fn new(
        t0: f64,
        dt: f64,
        mut values: Vec<f64>,
        range: (f64, f64),
    ) -> Result<Self, ModelError> {
        if !(dt > 0.0 && dt.is_finite()) || values.is_empty() {
            return Err(ModelError::BadGrid);
        }
        let (lo, hi) = range;
        for (index, v) in values.iter_mut().enumerate() {
            if !v.is_finite() || *v < lo - RANGE_TOLERANCE || *v > hi + RANGE_TOLERANCE {
                return Err(ModelError::PathOutOfRange {
                    index,
                    value: *v,
                    lo,
                    hi,
                });
            }
            *v = v.clamp(lo, hi);
        }
        Ok(Self {
            t0,
            dt,
            values,
            range,
        })
    }

    /// `len` samples of a constant.
    pub fn constant(
        value: f64,
        t0: f64,
        dt: f64,
        len: usize,
        range: (f64, f64),
    ) -> Result<Self, ModelError> {
        Self::new(t0, dt, vec![value; len.max(1)], range)
    }

    /// Samples `f` on `len` grid points.
    pub fn from_fn(
        t0: f64,
        dt: f64,
        len: usize,
        range: (f64, f64),
        f: impl Fn(f64) -> f64,
    ) -> Result<Self, ModelError> {
        Self::new(
            t0,
            dt,
            (0..len).map(|i| f(t0 + i as f64 * dt)).collect(),
            range,
        )
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn end_time(&self) -> f64 {
        self.time(self.values.len() - 1)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(|i| self.time(i))
    }

    pub fn eval(&self, t: f64) -> f64 {
        let s = (t - self.t0) / self.dt;
        if s <= 0.0 {
            return self.values[0];
        }
        let i = s.floor() as usize;
        if i + 1 >= self.values.len() {
            return *self.values.last().unwrap();
        }
        let frac = s - i as f64;
        self.values[i] + frac * (self.values[i + 1] - self.values[i])
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest `|self - other|` over the samples of `self`.
    pub fn sup_distance(&self, other: &SampledPath) -> f64 {
        self.times()
            .zip(&self.values)
            .map(|(t, v)| (v - other.eval(t)).abs())
            .fold(0.0, f64::max)
    }

    /// Running integral from `t0` to each grid point; exact for the
    /// piecewise-linear interpolant.
    pub fn cumulative_integral(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.values.len());
        out.push(0.0);
        for w in self.values.windows(2) {
            acc += 0.5 * self.dt * (w[0] + w[1]);
            out.push(acc);
        }
        out
    }

    /// Pointwise combination on the grid of `self`.
    pub fn zip_with(
        &self,
        other: &SampledPath,
        range: (f64, f64),
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, ModelError> {
        let values = self
            .times()
            .zip(&self.values)
            .map(|(t, &a)| f(a, other.eval(t)))
            .collect();
        Self::new(self.t0, self.dt, values, range)
    }
}
