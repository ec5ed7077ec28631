use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use super::{stream_rng, RirSet, RoomScene, Stream};
use crate::error::{Error, Result};
use crate::spectral::{stft_all, ComplexSpectrogram, StftConfig, Waveform};

/// Linear convolution via FFT, full length `a.len() + b.len() - 1`.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 32 {
        let mut out = vec![0.0; out_len];
        for (i, x) in a.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            for (j, y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        return out;
    }
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut fa: Vec<Complex64> = a.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fa.resize(n, Complex64::new(0.0, 0.0));
    let mut fb: Vec<Complex64> = b.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fb.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa.truncate(out_len);
    fa.into_iter().map(|z| z.re / n as f64).collect()
}

/// Seeded low-pass filtered Gaussian noise, one independent channel per microphone.
pub fn colored_noise(
    channels: usize,
    len: usize,
    sample_rate: u32,
    seed: u64,
    index: u64,
) -> Vec<Waveform> {
    let mut rng = stream_rng(seed, Stream::Noise, index);
    // one-pole low-pass, roughly -3 dB at 1 kHz for 16 kHz audio
    let pole = (-2.0 * std::f64::consts::PI * 1000.0 / sample_rate as f64).exp();
    (0..channels)
        .map(|_| {
            let mut state = 0.0;
            let samples: Vec<f64> = (0..len.max(1))
                .map(|_| {
                    let w: f64 = rng.sample(StandardNormal);
                    state = pole * state + (1.0 - pole) * w;
                    state
                })
                .collect();
            Waveform::new(samples, sample_rate).expect("finite noise")
        })
        .collect()
}

/// One simulated utterance. Channel 0 is microphone 1; `reference_mic` is 0-based.
#[derive(Debug, Clone)]
pub struct MultichannelUtterance {
    pub id: String,
    pub mixture: Vec<Waveform>,
    pub direct_path: Vec<Waveform>,
    pub reverberant_image: Vec<Waveform>,
    pub noise: Vec<Waveform>,
    pub mixture_spec: Vec<ComplexSpectrogram>,
    pub direct_spec: Vec<ComplexSpectrogram>,
    pub reverberant_spec: Vec<ComplexSpectrogram>,
    pub stft: StftConfig,
    pub scene: Option<RoomScene>,
    pub rirs: Option<RirSet>,
    pub dry: Option<Waveform>,
    pub reference_mic: usize,
    pub snr_db: Option<f64>,
}

impl MultichannelUtterance {
    /// Builds an utterance from already-rendered channels (e.g. loaded from disk).
    pub fn from_waveforms(
        id: impl Into<String>,
        mixture: Vec<Waveform>,
        direct_path: Vec<Waveform>,
        reference_mic: usize,
        stft: StftConfig,
    ) -> Result<Self> {
        if mixture.is_empty() {
            return Err(Error::Domain("utterance needs at least one channel".into()));
        }
        let len = mixture[0].len();
        if mixture.iter().chain(&direct_path).any(|w| w.len() != len) {
            return Err(Error::Shape("all channels must have equal length".into()));
        }
        if reference_mic >= mixture.len() {
            return Err(Error::Domain(format!(
                "reference mic {reference_mic} out of range for {} channels",
                mixture.len()
            )));
        }
        let noise = vec![Waveform::zeros(len, mixture[0].sample_rate()); mixture.len()];
        let mixture_spec = stft_all(&mixture, &stft)?;
        let direct_spec = stft_all(&direct_path, &stft)?;
        Ok(Self {
            id: id.into(),
            reverberant_image: mixture.clone(),
            reverberant_spec: mixture_spec.clone(),
            mixture,
            direct_path,
            noise,
            mixture_spec,
            direct_spec,
            stft,
            scene: None,
            rirs: None,
            dry: None,
            reference_mic,
            snr_db: None,
        })
    }

    pub fn mic_count(&self) -> usize {
        self.mixture.len()
    }

    pub fn len(&self) -> usize {
        self.mixture[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.mixture[0].sample_rate()
    }

    /// Keeps only `mics` (0-based, in the given order); the reference mic must be kept and becomes index of its position.
    pub fn select_mics(&self, mics: &[usize]) -> Result<Self> {
        if mics.iter().any(|&m| m >= self.mic_count()) {
            return Err(Error::Domain(format!(
                "mic subset {mics:?} out of range for {} channels",
                self.mic_count()
            )));
        }
        let reference_mic = mics
            .iter()
            .position(|&m| m == self.reference_mic)
            .ok_or_else(|| Error::Domain("mic subset must include the reference mic".into()))?;
        let pick = |v: &Vec<Waveform>| mics.iter().map(|&m| v[m].clone()).collect::<Vec<_>>();
        let pick_s =
            |v: &Vec<ComplexSpectrogram>| mics.iter().map(|&m| v[m].clone()).collect::<Vec<_>>();
        let rirs = self.rirs.as_ref().map(|r| RirSet {
            full: pick(&r.full),
            direct: pick(&r.direct),
        });
        let scene = self.scene.as_ref().map(|s| RoomScene {
            mic_positions: mics.iter().map(|&m| s.mic_positions[m]).collect(),
            ..s.clone()
        });
        Ok(Self {
            id: self.id.clone(),
            mixture: pick(&self.mixture),
            direct_path: pick(&self.direct_path),
            reverberant_image: pick(&self.reverberant_image),
            noise: pick(&self.noise),
            mixture_spec: pick_s(&self.mixture_spec),
            direct_spec: pick_s(&self.direct_spec),
            reverberant_spec: pick_s(&self.reverberant_spec),
            stft: self.stft,
            scene,
            rirs,
            dry: self.dry.clone(),
            reference_mic,
            snr_db: self.snr_db,
        })
    }

    /// Mixture spectrogram of the reference mic.
    pub fn reference_spec(&self) -> &ComplexSpectrogram {
        &self.mixture_spec[self.reference_mic]
    }
}

fn fit_noise(noise: &Waveform, len: usize) -> Vec<f64> {
    let src = noise.samples();
    (0..len).map(|i| src[i % src.len()]).collect()
}

/// Convolves `dry` with every RIR, truncating to the dry length, and adds noise
/// scaled so that the direct-path-to-noise ratio at `reference_mic` equals `snr_db`.
/// `snr_db = None` (or +∞) renders a noise-free mixture.
pub fn render_mixture(
    dry: &Waveform,
    rirs: &RirSet,
    noise: &[Waveform],
    snr_db: Option<f64>,
    reference_mic: usize,
    stft: StftConfig,
) -> Result<MultichannelUtterance> {
    let mics = rirs.mic_count();
    if mics == 0 || rirs.direct.len() != mics {
        return Err(Error::Shape(
            "RIR set must have matching full/direct channels".into(),
        ));
    }
    if reference_mic >= mics {
        return Err(Error::Domain(format!(
            "reference mic {reference_mic} out of range"
        )));
    }
    if dry.energy() <= 0.0 {
        return Err(Error::Domain("dry source has zero energy".into()));
    }
    let len = dry.len();
    let sr = dry.sample_rate();
    let conv = |h: &Waveform| -> Result<Waveform> {
        let mut y = convolve(dry.samples(), h.samples());
        y.truncate(len);
        Waveform::new(y, sr)
    };
    let reverberant: Vec<Waveform> = rirs.full.iter().map(conv).collect::<Result<_>>()?;
    let direct: Vec<Waveform> = rirs.direct.iter().map(conv).collect::<Result<_>>()?;

    let snr = snr_db.filter(|s| s.is_finite());
    let noise_wav: Vec<Waveform> = match snr {
        None => vec![Waveform::zeros(len, sr); mics],
        Some(snr) => {
            if noise.len() != mics {
                return Err(Error::Shape(format!(
                    "{} noise channels for {mics} microphones",
                    noise.len()
                )));
            }
            let fitted: Vec<Vec<f64>> = noise.iter().map(|n| fit_noise(n, len)).collect();
            let noise_energy: f64 = fitted[reference_mic].iter().map(|x| x * x).sum();
            if noise_energy <= 0.0 {
                return Err(Error::Domain(
                    "noise has zero energy at the reference mic".into(),
                ));
            }
            let target = direct[reference_mic].energy() / 10f64.powf(snr / 10.0);
            let gain = (target / noise_energy).sqrt();
            fitted
                .into_iter()
                .map(|n| Waveform::new(n.into_iter().map(|x| x * gain).collect(), sr))
                .collect::<Result<_>>()?
        }
    };
    let mixture: Vec<Waveform> = reverberant
        .iter()
        .zip(&noise_wav)
        .map(|(x, e)| {
            Waveform::new(
                x.samples()
                    .iter()
                    .zip(e.samples())
                    .map(|(a, b)| a + b)
                    .collect(),
                sr,
            )
        })
        .collect::<Result<_>>()?;

    Ok(MultichannelUtterance {
        id: String::new(),
        mixture_spec: stft_all(&mixture, &stft)?,
        direct_spec: stft_all(&direct, &stft)?,
        reverberant_spec: stft_all(&reverberant, &stft)?,
        mixture,
        direct_path: direct,
        reverberant_image: reverberant,
        noise: noise_wav,
        stft,
        scene: None,
        rirs: Some(rirs.clone()),
        dry: Some(dry.clone()),
        reference_mic,
        snr_db: snr,
    })
}
