//! Waveform and complex spectrogram types, plus the sqrt-Hann STFT/iSTFT pair.
//!
//! Frames are laid out so that every input sample is covered by the full
//! `window_len / hop_len` overlapping windows: the signal is zero-padded by
//! `window_len - hop_len` samples at the front and up to a full window at the
//! back. Analysis and synthesis windows are identical sqrt-Hann windows scaled
//! so that their product overlap-adds to exactly one.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono real-valued signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Domain(
                "waveform must have at least one sample".into(),
            ));
        }
        if sample_rate == 0 {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len.max(1)],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn with_sample_rate(mut self, sample_rate: u32) -> Self {
        self.sample_rate = sample_rate;
        self
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Zero-pads or truncates to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len.max(1), 0.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    SqrtHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop_len: usize,
    pub dft_size: usize,
    pub window_kind: WindowKind,
}

impl Default for StftConfig {
    /// 32 ms window, 8 ms hop, 512-point DFT at 16 kHz.
    fn default() -> Self {
        Self {
            window_len: 512,
            hop_len: 128,
            dft_size: 512,
            window_kind: WindowKind::SqrtHann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dft_size == 0 || self.window_len == 0 || self.hop_len == 0 {
            return Err(Error::Config(
                "window_len, hop_len and dft_size must be positive".into(),
            ));
        }
        if self.hop_len > self.window_len {
            return Err(Error::Config(format!(
                "hop_len {} exceeds window_len {}",
                self.hop_len, self.window_len
            )));
        }
        if self.window_len % self.hop_len != 0 {
            return Err(Error::Config(format!(
                "hop_len {} must divide window_len {}",
                self.hop_len, self.window_len
            )));
        }
        if self.window_len / self.hop_len < 2 {
            return Err(Error::Config(
                "sqrt-Hann reconstruction needs at least 2x overlap".into(),
            ));
        }
        if self.dft_size < self.window_len {
            return Err(Error::Config(format!(
                "dft_size {} is smaller than window_len {}",
                self.dft_size, self.window_len
            )));
        }
        Ok(())
    }

    pub fn bin_count(&self) -> usize {
        self.dft_size / 2 + 1
    }

    /// Front padding in samples.
    pub fn front_pad(&self) -> usize {
        self.window_len - self.hop_len
    }

    pub fn frame_count(&self, len: usize) -> usize {
        (len.max(1) - 1 + self.front_pad()) / self.hop_len + 1
    }

    /// Window shared by analysis and synthesis; its square overlap-adds to one.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_len as f64;
        let overlap = (self.window_len / self.hop_len) as f64;
        let gain = (2.0 / overlap).sqrt();
        (0..self.window_len)
            .map(|i| match self.window_kind {
                WindowKind::SqrtHann => gain * (0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).sqrt(),
            })
            .collect()
    }
}

/// T×F one-sided complex spectrogram (DC first, Nyquist last).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    data: Array2<Complex64>,
    config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn new(data: Array2<Complex64>, config: StftConfig) -> Result<Self> {
        if data.ncols() != config.bin_count() {
            return Err(Error::Shape(format!(
                "spectrogram has {} bins, config expects {}",
                data.ncols(),
                config.bin_count()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Domain(
                "spectrogram contains non-finite entries".into(),
            ));
        }
        Ok(Self { data, config })
    }

    /// Wraps raw data without the finiteness scan; shape is still checked.
    pub(crate) fn from_parts(data: Array2<Complex64>, config: StftConfig) -> Self {
        debug_assert_eq!(data.ncols(), config.bin_count());
        Self { data, config }
    }

    pub fn zeros(frames: usize, config: StftConfig) -> Self {
        Self {
            data: Array2::zeros((frames, config.bin_count())),
            config,
        }
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<Complex64> {
        self.data
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn frame_count(&self) -> usize {
        self.data.nrows()
    }

    pub fn bin_count(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.data.nrows(), self.data.ncols())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        Self {
            data: self.data.mapv(|z| z * c),
            config: self.config,
        }
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            data: self.data.mapv(f),
            config: self.config,
        }
    }

    /// Time series of one frequency bin.
    pub fn bin(&self, f: usize) -> Vec<Complex64> {
        self.data.column(f).to_vec()
    }
}

pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let samples = wave.samples();
    let frames = cfg.frame_count(samples.len());
    let bins = cfg.bin_count();
    let pad = cfg.front_pad();
    let window = cfg.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.dft_size);

    let mut data = Array2::<Complex64>::zeros((frames, bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.dft_size];
    for t in 0..frames {
        buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        let start = (t * cfg.hop_len) as isize - pad as isize;
        for (i, w) in window.iter().enumerate() {
            let n = start + i as isize;
            if n >= 0 && (n as usize) < samples.len() {
                buf[i].re = samples[n as usize] * w;
            }
        }
        fft.process(&mut buf);
        for (dst, src) in data.row_mut(t).iter_mut().zip(buf.iter()) {
            *dst = *src;
        }
    }
    Ok(ComplexSpectrogram::from_parts(data, *cfg))
}

pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig, out_len: usize) -> Result<Waveform> {
    cfg.validate()?;
    if spec.config() != cfg || spec.bin_count() != cfg.bin_count() {
        return Err(Error::Shape(format!(
            "spectrogram geometry {:?} does not match config {:?}",
            spec.config(),
            cfg
        )));
    }
    let frames = spec.frame_count();
    let pad = cfg.front_pad();
    let window = cfg.window();
    let n_fft = cfg.dft_size;
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);

    let total = (frames.saturating_sub(1)) * cfg.hop_len + cfg.window_len;
    let mut acc = vec![0.0; total.max(pad + out_len)];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let bins = cfg.bin_count();
    for t in 0..frames {
        let row = spec.data().row(t);
        for k in 0..bins {
            buf[k] = row[k];
        }
        // Hermitian completion; DC and Nyquist imaginary parts are dropped by taking the real part.
        for k in bins..n_fft {
            buf[k] = row[n_fft - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop_len;
        for (i, w) in window.iter().enumerate() {
            acc[start + i] += buf[i].re / n_fft as f64 * w;
        }
    }
    let samples: Vec<f64> = (0..out_len.max(1))
        .map(|n| acc.get(pad + n).copied().unwrap_or(0.0))
        .collect();
    Waveform::new(samples, DEFAULT_SAMPLE_RATE)
}

/// Convenience: STFT of several channels with one config.
pub fn stft_all(waves: &[Waveform], cfg: &StftConfig) -> Result<Vec<ComplexSpectrogram>> {
    waves.iter().map(|w| stft(w, cfg)).collect()
}

/// `‖a − b‖ / ‖b‖`, or `‖a − b‖` when `b` is zero.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            16_000,
        )
        .unwrap()
    }

    #[test]
    fn zero_waveform_gives_zero_spectrogram() {
        let cfg = StftConfig::default();
        let spec = stft(&Waveform::zeros(16_000, 16_000), &cfg).unwrap();
        assert_eq!(spec.frame_count(), cfg.frame_count(16_000));
        assert_eq!(spec.bin_count(), 257);
        assert!(spec.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn sinusoid_at_bin_center_dominates() {
        let cfg = StftConfig::default();
        let k = 40;
        let n = 8000;
        let freq = k as f64 / cfg.dft_size as f64;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * freq * i as f64).cos()).collect();
        let spec = stft(&Waveform::new(x, 16_000).unwrap(), &cfg).unwrap();
        let per = cfg.window_len / cfg.hop_len;
        for t in per..spec.frame_count() - per {
            let row = spec.data().row(t);
            let peak = row[k].norm();
            for (b, z) in row.iter().enumerate() {
                if (b as isize - k as isize).abs() > 1 {
                    assert!(peak >= 10.0 * z.norm(), "frame {t} bin {b}");
                }
            }
        }
    }

    #[test]
    fn round_trip_white_noise() {
        let cfg = StftConfig::default();
        let x = noise(12_345, 7);
        let spec = stft(&x, &cfg).unwrap();
        let y = istft(&spec, &cfg, x.len()).unwrap();
        assert!(relative_l2(y.samples(), x.samples()) <= 1e-6);
    }

    #[test]
    fn round_trip_short_and_other_geometry() {
        let cfg = StftConfig {
            window_len: 64,
            hop_len: 32,
            dft_size: 128,
            window_kind: WindowKind::SqrtHann,
        };
        for len in [1, 5, 63, 64, 65, 1000] {
            let x = noise(len, len as u64);
            let y = istft(&stft(&x, &cfg).unwrap(), &cfg, len).unwrap();
            assert!(relative_l2(y.samples(), x.samples()) <= 1e-9, "len {len}");
        }
    }

    #[test]
    fn zero_spectrogram_gives_silence() {
        let cfg = StftConfig::default();
        let spec = ComplexSpectrogram::zeros(20, cfg);
        let y = istft(&spec, &cfg, 1000).unwrap();
        assert!(y.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn scaling_spectrogram_scales_waveform() {
        let cfg = StftConfig::default();
        let x = noise(3000, 3);
        let spec = stft(&x, &cfg).unwrap();
        let y1 = istft(&spec, &cfg, 3000).unwrap();
        let y2 = istft(&spec.scaled(Complex64::new(2.5, 0.0)), &cfg, 3000).unwrap();
        let expect: Vec<f64> = y1.samples().iter().map(|s| 2.5 * s).collect();
        assert!(relative_l2(y2.samples(), &expect) <= 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            StftConfig {
                hop_len: 600,
                ..Default::default()
            },
            StftConfig {
                dft_size: 0,
                ..Default::default()
            },
            StftConfig {
                hop_len: 100,
                ..Default::default()
            },
            StftConfig {
                dft_size: 256,
                ..Default::default()
            },
            StftConfig {
                hop_len: 512,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn istft_rejects_geometry_mismatch() {
        let cfg = StftConfig::default();
        let other = StftConfig {
            dft_size: 1024,
            ..cfg
        };
        let spec = ComplexSpectrogram::zeros(4, other);
        assert!(matches!(istft(&spec, &cfg, 100), Err(Error::Shape(_))));
    }

    #[test]
    fn window_squares_overlap_add_to_one() {
        let cfg = StftConfig::default();
        let w = cfg.window();
        for n in 0..cfg.hop_len {
            let s: f64 = (0..cfg.window_len / cfg.hop_len)
                .map(|m| w[n + m * cfg.hop_len].powi(2))
                .sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
