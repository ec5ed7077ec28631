//! Image-source room impulse responses.

use std::f64::consts::PI;

use super::{distance, RoomScene};
use crate::error::{Error, Result};
use crate::spectral::Waveform;

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Half-width of the band-limited fractional-delay interpolator (81 taps).
const FD_HALF: i64 = 40;

const HIGHPASS_HZ: f64 = 100.0;

/// Full and line-of-sight impulse responses for every microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct RirSet {
    pub full: Vec<Waveform>,
    pub direct: Vec<Waveform>,
}

impl RirSet {
    pub fn mic_count(&self) -> usize {
        self.full.len()
    }
}

/// First guess for `-ln β`: the image-source energy decay is a direction
/// average of exponentials, since an image in direction `u` at distance `r`
/// has about `r · Σ|u_i|/L_i` reflections. Its fitted slope scales linearly
/// with `-ln β`, so one evaluation at `-ln β = 1` gives the estimate.
fn absorption_guess(dims: &[f64; 3], t60: f64) -> f64 {
    const DIRS: usize = 4096;
    let golden = PI * (3.0 - 5f64.sqrt());
    let rates: Vec<f64> = (0..DIRS)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / DIRS as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let u = [rho * phi.cos(), rho * phi.sin(), z];
            u.iter().zip(dims).map(|(c, l)| c.abs() / l).sum::<f64>()
        })
        .collect();
    let horizon = 20.0 / SPEED_OF_SOUND / rates.iter().cloned().fold(f64::MAX, f64::min);
    let fs = 2000.0 / horizon;
    let len = 2000;
    let energy: Vec<f64> = (0..len)
        .map(|i| {
            let s = i as f64 / fs * SPEED_OF_SOUND;
            rates.iter().map(|w| (-2.0 * s * w).exp()).sum::<f64>()
        })
        .collect();
    let t_unit = decay_fit(&energy, fs).unwrap_or(1.0);
    t_unit / t60
}

/// Squared image gains accumulated per output sample at one microphone.
fn image_energy(scene: &RoomScene, beta: f64, len: usize) -> Vec<f64> {
    let fs = scene.sample_rate as f64;
    let mut out = vec![0.0; len];
    let max_dist = len as f64 / fs * SPEED_OF_SOUND;
    let mic = scene.mic_positions[0];
    for_each_image(scene, max_dist, usize::MAX, |image, order| {
        let r = distance(&image, &mic);
        let idx = (r / SPEED_OF_SOUND * fs) as usize;
        if idx < len {
            out[idx] += (beta.powi(order as i32) / (4.0 * PI * r)).powi(2);
        }
    });
    out
}

/// Wall reflection coefficient whose image-source energy decay at the first
/// microphone reaches the requested T60 under `estimate_t60`'s fit.
fn reflection_coefficient(scene: &RoomScene, len: usize) -> f64 {
    let t60 = scene.t60;
    let fs = scene.sample_rate as f64;
    let measure = |a: f64| decay_fit(&image_energy(scene, (-a).exp(), len), fs);
    let mut a = absorption_guess(&scene.room_dims, t60);
    for _ in 0..6 {
        let Ok(t) = measure(a) else { break };
        if ((t - t60) / t60).abs() < 0.01 {
            break;
        }
        // fitted decay time is close to inversely proportional to -ln β
        a *= t / t60;
    }
    (-a).exp()
}

/// Adds `gain · δ(n - delay)` through an 81-tap Hann-windowed sinc.
fn add_fractional_impulse(buf: &mut [f64], delay: f64, gain: f64) {
    let nearest = delay.round();
    let (n0, frac) = if (delay - nearest).abs() < 1e-9 {
        (nearest as i64, 0.0)
    } else {
        (delay.floor() as i64, delay - delay.floor())
    };
    if frac == 0.0 {
        if n0 >= 0 && (n0 as usize) < buf.len() {
            buf[n0 as usize] += gain;
        }
        return;
    }
    let width = (FD_HALF + 1) as f64;
    let sin_frac = (PI * frac).sin();
    // window phasor: angle π (i - frac) / width
    let step = (PI / width).cos();
    let step_s = (PI / width).sin();
    let start = PI * (-(FD_HALF as f64) - frac) / width;
    let (mut c, mut s) = (start.cos(), start.sin());
    for i in -FD_HALF..=FD_HALF {
        let n = n0 + i;
        if n >= 0 && (n as usize) < buf.len() {
            let x = i as f64 - frac;
            let sign = if i.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
            let sinc = -sign * sin_frac / (PI * x);
            let window = 0.5 * (1.0 + c);
            buf[n as usize] += gain * window * sinc;
        }
        let nc = c * step - s * step_s;
        s = s * step + c * step_s;
        c = nc;
    }
}

/// Second-order Butterworth high-pass at `HIGHPASS_HZ`, in place. Image gains are
/// all positive, so without it the reflections pile up a large low-frequency
/// component that decays far slower than the broadband energy.
fn highpass(x: &mut [f64], fs: f64) {
    let k = (PI * HIGHPASS_HZ / fs).tan();
    let norm = 1.0 / (1.0 + std::f64::consts::SQRT_2 * k + k * k);
    let (b0, b1, b2) = (norm, -2.0 * norm, norm);
    let a1 = 2.0 * (k * k - 1.0) * norm;
    let a2 = (1.0 - std::f64::consts::SQRT_2 * k + k * k) * norm;
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let y = b0 * *v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = *v;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Calls `f(position, reflection_order)` for every image within `max_dist` of the room.
fn for_each_image(
    scene: &RoomScene,
    max_dist: f64,
    order_limit: usize,
    mut f: impl FnMut([f64; 3], usize),
) {
    let dims = scene.room_dims;
    let src = scene.source_pos;
    let n: Vec<i64> = dims
        .iter()
        .map(|l| (max_dist / (2.0 * l)).ceil() as i64 + 1)
        .collect();
    for u in 0..2i64 {
        for v in 0..2i64 {
            for w in 0..2i64 {
                for nx in -n[0]..=n[0] {
                    let ox = (nx - u).unsigned_abs() + nx.unsigned_abs();
                    let x = (1 - 2 * u) as f64 * src[0] + 2.0 * nx as f64 * dims[0];
                    for ny in -n[1]..=n[1] {
                        let oy = (ny - v).unsigned_abs() + ny.unsigned_abs();
                        let y = (1 - 2 * v) as f64 * src[1] + 2.0 * ny as f64 * dims[1];
                        for nz in -n[2]..=n[2] {
                            let order =
                                (ox + oy + nz.unsigned_abs() + (nz - w).unsigned_abs()) as usize;
                            if order > order_limit {
                                continue;
                            }
                            let z = (1 - 2 * w) as f64 * src[2] + 2.0 * nz as f64 * dims[2];
                            f([x, y, z], order);
                        }
                    }
                }
            }
        }
    }
}

/// Image-source simulation. `max_order` bounds the total number of wall
/// reflections per image (`None` keeps every image arriving within the RIR length).
/// The full RIR spans `t60` seconds (or just the direct paths when `max_order == Some(0)`).
pub fn simulate_rir(scene: &RoomScene, max_order: Option<usize>) -> Result<RirSet> {
    scene.validate()?;
    let fs = scene.sample_rate as f64;
    let delays: Vec<f64> = (0..scene.mic_count())
        .map(|m| scene.source_distance(m) / SPEED_OF_SOUND * fs)
        .collect();
    let direct_end = delays
        .iter()
        .map(|d| d.floor() as usize + FD_HALF as usize + 1)
        .max()
        .unwrap_or(1);
    let len = if max_order == Some(0) {
        direct_end
    } else {
        ((scene.t60 * fs).ceil() as usize).max(direct_end)
    };
    let max_dist = (len as f64 + FD_HALF as f64) / fs * SPEED_OF_SOUND;
    let beta = if max_order == Some(0) {
        0.0
    } else {
        reflection_coefficient(scene, len)
    };

    let mut direct = vec![vec![0.0; len]; scene.mic_count()];
    for (m, d) in delays.iter().enumerate() {
        let r = scene.source_distance(m);
        add_fractional_impulse(&mut direct[m], *d, 1.0 / (4.0 * PI * r));
    }

    let mut full = vec![vec![0.0; len]; scene.mic_count()];
    for_each_image(
        scene,
        max_dist,
        max_order.unwrap_or(usize::MAX),
        |image, order| {
            let gain_num = beta.powi(order as i32);
            for (m, mic) in scene.mic_positions.iter().enumerate() {
                let r = distance(&image, mic);
                if r > max_dist {
                    continue;
                }
                add_fractional_impulse(
                    &mut full[m],
                    r / SPEED_OF_SOUND * fs,
                    gain_num / (4.0 * PI * r),
                );
            }
        },
    );
    if max_order != Some(0) {
        for (f, d) in full.iter_mut().zip(&direct) {
            let mut reflections: Vec<f64> = f.iter().zip(d).map(|(a, b)| a - b).collect();
            highpass(&mut reflections, fs);
            for ((out, r), b) in f.iter_mut().zip(&reflections).zip(d) {
                *out = b + r;
            }
        }
    }
    let wrap = |v: Vec<Vec<f64>>| -> Result<Vec<Waveform>> {
        v.into_iter()
            .map(|s| Waveform::new(s, scene.sample_rate))
            .collect()
    };
    Ok(RirSet {
        full: wrap(full)?,
        direct: wrap(direct)?,
    })
}

/// Reverberation time from the Schroeder backward-integrated energy decay,
/// extrapolated from a linear fit between -5 dB and -25 dB.
pub fn estimate_t60(rir: &Waveform) -> Result<f64> {
    let energy: Vec<f64> = rir.samples().iter().map(|x| x * x).collect();
    decay_fit(&energy, rir.sample_rate() as f64)
}

fn decay_fit(energy: &[f64], fs: f64) -> Result<f64> {
    let mut edc = vec![0.0; energy.len()];
    let mut acc = 0.0;
    for i in (0..energy.len()).rev() {
        acc += energy[i];
        edc[i] = acc;
    }
    if acc <= 0.0 {
        return Err(Error::Degenerate("impulse response has no energy".into()));
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / acc).log10()).collect();
    let start = db.iter().position(|&d| d <= -5.0);
    let end = db.iter().position(|&d| d <= -25.0);
    let (Some(start), Some(end)) = (start, end) else {
        return Err(Error::Degenerate(
            "energy decay does not reach -25 dB inside the response".into(),
        ));
    };
    let pts: Vec<(f64, f64)> = (start..=end).map(|i| (i as f64 / fs, db[i])).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return Err(Error::Degenerate("energy decay is not decreasing".into()));
    }
    Ok(-60.0 / slope)
}
