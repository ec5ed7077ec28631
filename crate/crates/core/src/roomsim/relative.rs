use num_complex::Complex64;
use rustfft::FftPlanner;

use super::convolve;
use crate::error::{Error, Result};
use crate::spectral::{stft, ComplexSpectrogram, StftConfig, Waveform};

/// Denominator magnitudes below this fraction of the peak are floored.
pub const DIVISION_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeRir {
    pub rir: Waveform,
    /// FFT bins where the direct-path spectrum fell under the floor.
    pub regularized_bins: usize,
}

/// Filter relating the direct-path RIR to the full RIR by spectral division
/// over `M_i + M_d - 1` points.
pub fn relative_rir(direct: &Waveform, full: &Waveform) -> Result<RelativeRir> {
    let m_r = direct.len() + full.len() - 1;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(m_r);
    let inv = planner.plan_fft_inverse(m_r);
    let spectrum = |x: &[f64]| {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(m_r, Complex64::new(0.0, 0.0));
        fwd.process(&mut buf);
        buf
    };
    let den = spectrum(direct.samples());
    let mut num = spectrum(full.samples());
    let peak = den.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::Degenerate("direct-path RIR has no energy".into()));
    }
    let floor = DIVISION_FLOOR * peak;
    let mut regularized_bins = 0;
    for (n, d) in num.iter_mut().zip(&den) {
        let mag = d.norm();
        let d = if mag < floor {
            regularized_bins += 1;
            if mag > 0.0 {
                d / mag * floor
            } else {
                Complex64::new(floor, 0.0)
            }
        } else {
            *d
        };
        *n /= d;
    }
    inv.process(&mut num);
    let samples = num.iter().map(|z| z.re / m_r as f64).collect();
    Ok(RelativeRir {
        rir: Waveform::new(samples, direct.sample_rate())?,
        regularized_bins,
    })
}

/// Keeps the first `tau` samples.
pub fn truncate_rir(rir: &Waveform, tau: usize) -> Result<Waveform> {
    if tau == 0 || tau > rir.len() {
        return Err(Error::Domain(format!(
            "truncation length {tau} outside [1, {}]",
            rir.len()
        )));
    }
    Waveform::new(rir.samples()[..tau].to_vec(), rir.sample_rate())
}

/// Spectrogram of the direct-path signal convolved with the relative RIR truncated to `tau`
/// (output kept at the direct-path length).
pub fn hypothesized_estimate(
    direct_signal: &Waveform,
    relative: &Waveform,
    tau: usize,
    cfg: &StftConfig,
) -> Result<ComplexSpectrogram> {
    let h = truncate_rir(relative, tau)?;
    let mut y = convolve(direct_signal.samples(), h.samples());
    y.truncate(direct_signal.len());
    stft(&Waveform::new(y, direct_signal.sample_rate())?, cfg)
}
