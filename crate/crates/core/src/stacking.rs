//! Time-context stacks of a spectrogram and the mixture-power weighting map.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::ComplexSpectrogram;

/// Default floor coefficient for [`lambda_weight`].
pub const DEFAULT_XI: f64 = 1e-4;

/// Which frames enter a stack. Taps are ordered from the oldest frame to the newest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StackSpec {
    /// Frames `t-K+1 ..= t-delay`; `K - delay` taps.
    PastDelayed { k: usize, delay: usize },
    /// Frames `t-I+1 ..= t+J`; `I + J` taps.
    Context { past: usize, future: usize },
    /// Frames `t-L ..= t+L`; `2L + 1` taps.
    Garbage { half_width: usize },
}

impl StackSpec {
    pub fn past_delayed(k: usize, delay: usize) -> Result<Self> {
        let s = StackSpec::PastDelayed { k, delay };
        s.validate()?;
        Ok(s)
    }

    pub fn context(past: usize, future: usize) -> Result<Self> {
        let s = StackSpec::Context { past, future };
        s.validate()?;
        Ok(s)
    }

    pub fn garbage(half_width: usize) -> Self {
        StackSpec::Garbage { half_width }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StackSpec::PastDelayed { k, delay } if k <= delay => Err(Error::Config(format!(
                "past-delayed stack needs K > delay (got K={k}, delay={delay})"
            ))),
            StackSpec::Context { past: 0, .. } => {
                Err(Error::Config("context stack needs I >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn taps(&self) -> usize {
        match *self {
            StackSpec::PastDelayed { k, delay } => k - delay,
            StackSpec::Context { past, future } => past + future,
            StackSpec::Garbage { half_width } => 2 * half_width + 1,
        }
    }

    fn max_lag(&self) -> isize {
        match *self {
            StackSpec::PastDelayed { k, .. } => k as isize - 1,
            StackSpec::Context { past, .. } => past as isize - 1,
            StackSpec::Garbage { half_width } => half_width as isize,
        }
    }

    /// Frame lag of tap `k`: entry `(t, f, k)` reads source frame `t - lag(k)`.
    pub fn lag(&self, k: usize) -> isize {
        self.max_lag() - k as isize
    }

    pub fn lags(&self) -> Vec<isize> {
        (0..self.taps()).map(|k| self.lag(k)).collect()
    }
}

/// Lazily indexed T×F×taps stack over a source spectrogram. Out-of-range frames read as zero.
#[derive(Debug, Clone)]
pub struct StackedTensor {
    source: ComplexSpectrogram,
    spec: StackSpec,
}

impl StackedTensor {
    pub fn spec(&self) -> &StackSpec {
        &self.spec
    }

    pub fn source(&self) -> &ComplexSpectrogram {
        &self.source
    }

    pub fn frame_count(&self) -> usize {
        self.source.frame_count()
    }

    pub fn bin_count(&self) -> usize {
        self.source.bin_count()
    }

    pub fn taps(&self) -> usize {
        self.spec.taps()
    }

    pub fn get(&self, t: usize, f: usize, k: usize) -> Complex64 {
        let src = t as isize - self.spec.lag(k);
        if src < 0 || src >= self.frame_count() as isize {
            Complex64::new(0.0, 0.0)
        } else {
            self.source.data()[[src as usize, f]]
        }
    }

    /// Dense copy, mainly for inspection and tests.
    pub fn to_dense(&self) -> Array3<Complex64> {
        let (t_len, f_len) = self.source.shape();
        Array3::from_shape_fn((t_len, f_len, self.taps()), |(t, f, k)| self.get(t, f, k))
    }
}

pub fn build_stack(source: &ComplexSpectrogram, spec: StackSpec) -> Result<StackedTensor> {
    spec.validate()?;
    Ok(StackedTensor {
        source: source.clone(),
        spec,
    })
}

/// Per-T-F weighting λ shared by every microphone's regression.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    values: Array2<f64>,
    xi: f64,
    degenerate: bool,
}

impl WeightMap {
    /// λ ≡ 1.
    pub fn uniform(frames: usize, bins: usize) -> Self {
        Self {
            values: Array2::ones((frames, bins)),
            xi: 0.0,
            degenerate: false,
        }
    }

    /// Wraps caller-provided positive weights.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain("weights must be finite and positive".into()));
        }
        Ok(Self {
            values,
            xi: 0.0,
            degenerate: false,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// True when every mixture was silent and the map fell back to a constant floor.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.mapv(|v| v * c),
            ..self.clone()
        }
    }
}

/// Channel-averaged mixture power plus `xi` times its utterance-wide maximum.
pub fn lambda_weight(mixtures: &[ComplexSpectrogram], xi: f64) -> Result<WeightMap> {
    let first = mixtures
        .first()
        .ok_or_else(|| Error::Domain("lambda_weight needs at least one mixture".into()))?;
    if !(xi > 0.0) {
        return Err(Error::Config(format!("xi must be positive, got {xi}")));
    }
    for m in &mixtures[1..] {
        first.ensure_same_shape(m, "lambda_weight mixtures")?;
    }
    let p = mixtures.len() as f64;
    let mut power = Array2::<f64>::zeros(first.shape());
    for m in mixtures {
        power.zip_mut_with(m.data(), |acc, z| *acc += z.norm_sqr());
    }
    power.mapv_inplace(|v| v / p);
    let max = power.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Ok(WeightMap {
            values: Array2::from_elem(first.shape(), f64::EPSILON),
            xi,
            degenerate: true,
        });
    }
    let floor = xi * max;
    power.mapv_inplace(|v| v + floor);
    Ok(WeightMap {
        values: power,
        xi,
        degenerate: false,
    })
}
