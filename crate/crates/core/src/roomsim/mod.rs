//! Shoebox-room simulation of reverberant multi-microphone speech.
//!
//! Scenes follow a desk-scale version of the usual simulated dereverberation
//! protocol: an 8-microphone circular array (20 cm diameter), speaker-to-array
//! distance in [0.75, 2.5] m, T60 in [0.2, 1.3] s, and additive noise at an SNR
//! measured between the direct-path signal and the noise at the reference mic.

mod ism;
mod relative;
mod render;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ism::{estimate_t60, simulate_rir, RirSet, SPEED_OF_SOUND};
pub use relative::{hypothesized_estimate, relative_rir, truncate_rir, RelativeRir};
pub use render::{colored_noise, convolve, render_mixture, MultichannelUtterance};

pub const T60_MIN: f64 = 0.05;
pub const T60_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomScene {
    pub room_dims: [f64; 3],
    pub t60: f64,
    pub source_pos: [f64; 3],
    pub mic_positions: Vec<[f64; 3]>,
    pub sample_rate: u32,
}

impl RoomScene {
    pub fn validate(&self) -> Result<()> {
        if self.room_dims.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Domain(format!(
                "room dimensions must be positive: {:?}",
                self.room_dims
            )));
        }
        if !(T60_MIN..=T60_MAX).contains(&self.t60) {
            return Err(Error::Domain(format!(
                "t60 {} s outside [{T60_MIN}, {T60_MAX}]",
                self.t60
            )));
        }
        if self.mic_positions.is_empty() {
            return Err(Error::Domain("scene needs at least one microphone".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        let inside = |p: &[f64; 3]| {
            p.iter()
                .zip(&self.room_dims)
                .all(|(x, d)| *x > 0.0 && x < d)
        };
        if !inside(&self.source_pos) {
            return Err(Error::Domain(format!(
                "source {:?} is not inside the room",
                self.source_pos
            )));
        }
        for (i, m) in self.mic_positions.iter().enumerate() {
            if !inside(m) {
                return Err(Error::Domain(format!(
                    "microphone {i} at {m:?} is not inside the room"
                )));
            }
        }
        Ok(())
    }

    pub fn mic_count(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn source_distance(&self, mic: usize) -> f64 {
        distance(&self.source_pos, &self.mic_positions[mic])
    }
}

pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Uniform circular array in the horizontal plane, microphone 0 at azimuth 0.
pub fn circular_array(center: [f64; 3], diameter: f64, count: usize) -> Vec<[f64; 3]> {
    let r = diameter / 2.0;
    (0..count)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / count as f64;
            [
                center[0] + r * phi.cos(),
                center[1] + r * phi.sin(),
                center[2],
            ]
        })
        .collect()
}

/// Named random sub-streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Scene = 1,
    Noise = 2,
    Source = 3,
    Optimizer = 4,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream as u64);
    rng
}

/// A sampled scene plus the SNR drawn for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledScene {
    pub scene: RoomScene,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSampler {
    pub t60_range: [f64; 2],
    pub dist_range: [f64; 2],
    pub array_diameter: f64,
    pub mic_count: usize,
    pub snr_range: [f64; 2],
    pub room_length_range: [f64; 2],
    pub room_width_range: [f64; 2],
    pub room_height_range: [f64; 2],
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            t60_range: [0.2, 1.3],
            dist_range: [0.75, 2.5],
            array_diameter: 0.20,
            mic_count: 8,
            snr_range: [5.0, 25.0],
            room_length_range: [5.0, 10.0],
            room_width_range: [5.0, 10.0],
            room_height_range: [2.5, 4.0],
            sample_rate: crate::spectral::DEFAULT_SAMPLE_RATE,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::Config(format!("{name} range {r:?} is empty")));
    }
    Ok(())
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

impl SceneSampler {
    pub fn validate(&self) -> Result<()> {
        check_range("t60", self.t60_range)?;
        check_range("distance", self.dist_range)?;
        check_range("snr", self.snr_range)?;
        check_range("room length", self.room_length_range)?;
        check_range("room width", self.room_width_range)?;
        check_range("room height", self.room_height_range)?;
        if self.t60_range[0] < T60_MIN || self.t60_range[1] > T60_MAX {
            return Err(Error::Config(format!(
                "t60 range {:?} must lie within [{T60_MIN}, {T60_MAX}]",
                self.t60_range
            )));
        }
        if self.mic_count == 0 {
            return Err(Error::Config("mic_count must be at least 1".into()));
        }
        if self.dist_range[0] <= 0.0 || self.array_diameter < 0.0 {
            return Err(Error::Config("distances must be positive".into()));
        }
        Ok(())
    }

    /// Deterministic scene number `index`.
    pub fn sample(&self, index: u64) -> Result<SampledScene> {
        self.validate()?;
        let mut rng = stream_rng(self.seed, Stream::Scene, index);
        let margin = 0.5;
        for _ in 0..1000 {
            let dims = [
                draw(&mut rng, self.room_length_range),
                draw(&mut rng, self.room_width_range),
                draw(&mut rng, self.room_height_range),
            ];
            let t60 = draw(&mut rng, self.t60_range);
            let dist = draw(&mut rng, self.dist_range);
            let snr_db = draw(&mut rng, self.snr_range);
            let r = self.array_diameter / 2.0;
            let center = [
                rng.random_range(margin + r..(dims[0] - margin - r).max(margin + r + 1e-3)),
                rng.random_range(margin + r..(dims[1] - margin - r).max(margin + r + 1e-3)),
                rng.random_range(0.8_f64..1.5_f64.min(dims[2] - margin)),
            ];
            let azimuth = rng.random_range(0.0..2.0 * PI);
            let dz = rng.random_range(-0.2..0.5) * (dist / 2.5);
            let height = center[2] + dz;
            let horizontal = (dist * dist - dz * dz).max(0.0).sqrt();
            let source = [
                center[0] + horizontal * azimuth.cos(),
                center[1] + horizontal * azimuth.sin(),
                height,
            ];
            let ok = source
                .iter()
                .zip(&dims)
                .all(|(x, d)| *x > margin.min(d / 4.0) && *x < d - margin.min(d / 4.0));
            if !ok {
                continue;
            }
            let scene = RoomScene {
                room_dims: dims,
                t60,
                source_pos: source,
                mic_positions: circular_array(center, self.array_diameter, self.mic_count),
                sample_rate: self.sample_rate,
            };
            if scene.validate().is_ok() {
                return Ok(SampledScene { scene, snr_db });
            }
        }
        Err(Error::Config(
            "could not place source and array inside the sampled rooms".into(),
        ))
    }
}

/// Renders one utterance of a sampled scene: RIRs for every microphone, `dry`
/// convolved and truncated to its own length, and seeded colored noise at the
/// sampled SNR. Microphone 0 is the reference.
pub fn simulate_utterance(
    id: impl Into<String>,
    sampled: &SampledScene,
    dry: &crate::spectral::Waveform,
    seed: u64,
    index: u64,
    stft: crate::spectral::StftConfig,
) -> Result<MultichannelUtterance> {
    let scene = &sampled.scene;
    if dry.sample_rate() != scene.sample_rate {
        return Err(Error::Config(format!(
            "dry source at {} Hz, scene at {} Hz",
            dry.sample_rate(),
            scene.sample_rate
        )));
    }
    let rirs = simulate_rir(scene, None)?;
    let noise = colored_noise(scene.mic_count(), dry.len(), scene.sample_rate, seed, index);
    let mut utt = render_mixture(dry, &rirs, &noise, Some(sampled.snr_db), 0, stft)?;
    utt.id = id.into();
    utt.scene = Some(scene.clone());
    Ok(utt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_is_deterministic_and_in_range() {
        let s = SceneSampler {
            seed: 42,
            ..Default::default()
        };
        for i in 0..20 {
            let a = s.sample(i).unwrap();
            let b = s.sample(i).unwrap();
            assert_eq!(a, b);
            a.scene.validate().unwrap();
            assert!((0.2..=1.3).contains(&a.scene.t60));
            assert!((5.0..=25.0).contains(&a.snr_db));
            assert_eq!(a.scene.mic_count(), 8);
            // array center to source distance within range
            let c = a.scene.mic_positions.iter().fold([0.0; 3], |acc, m| {
                [
                    acc[0] + m[0] / 8.0,
                    acc[1] + m[1] / 8.0,
                    acc[2] + m[2] / 8.0,
                ]
            });
            let d = distance(&c, &a.scene.source_pos);
            assert!((0.75 - 1e-9..=2.5 + 1e-9).contains(&d), "{d}");
        }
        assert_ne!(s.sample(0).unwrap(), s.sample(1).unwrap());
    }

    #[test]
    fn circular_array_geometry() {
        let mics = circular_array([2.0, 2.0, 1.0], 0.2, 8);
        for m in &mics {
            assert!((distance(m, &[2.0, 2.0, 1.0]) - 0.1).abs() < 1e-12);
        }
        assert!((distance(&mics[0], &mics[4]) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn scene_validation() {
        let mut scene = RoomScene {
            room_dims: [4.0, 4.0, 3.0],
            t60: 0.5,
            source_pos: [1.0, 1.0, 1.5],
            mic_positions: vec![[2.0, 2.0, 1.5]],
            sample_rate: 16_000,
        };
        scene.validate().unwrap();
        scene.t60 = 2.5;
        assert!(scene.validate().is_err());
        scene.t60 = 0.5;
        scene.source_pos = [5.0, 1.0, 1.0];
        assert!(scene.validate().is_err());
    }

    #[test]
    fn empty_ranges_rejected() {
        let s = SceneSampler {
            t60_range: [0.9, 0.3],
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }
}
