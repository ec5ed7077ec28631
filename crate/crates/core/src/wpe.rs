//! Iterative multi-channel weighted prediction error (WPE) dereverberation.

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcp::{
    by_bin, factor_bin, filter_bin, solve_bin, weights_by_bin, FilterBank, SolveDiagnostics,
};
use crate::spectral::ComplexSpectrogram;
use crate::stacking::{StackSpec, WeightMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WpeConfig {
    pub taps: usize,
    pub delay: usize,
    pub iterations: usize,
    pub psd_floor: f64,
}

impl Default for WpeConfig {
    fn default() -> Self {
        Self::for_channels(1)
    }
}

impl WpeConfig {
    /// 37 taps for one channel, 10 for up to four, 5 beyond; delay 3; 3 iterations.
    pub fn for_channels(channels: usize) -> Self {
        let taps = match channels {
            0 | 1 => 37,
            2..=4 => 10,
            _ => 5,
        };
        Self {
            taps,
            delay: 3,
            iterations: 3,
            psd_floor: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "WPE taps and iterations must be at least 1".into(),
            ));
        }
        if !(self.psd_floor > 0.0) {
            return Err(Error::Config("WPE psd_floor must be positive".into()));
        }
        Ok(())
    }

    /// The equivalent single-source delayed stack (`K = taps + delay`).
    pub fn stack_spec(&self) -> StackSpec {
        StackSpec::PastDelayed {
            k: self.taps + self.delay,
            delay: self.delay,
        }
    }
}

/// Joint prediction filters: for every target channel, `F × (P·taps)` coefficients
/// over the delayed past of all channels (channel-major, oldest lag first).
#[derive(Debug, Clone, PartialEq)]
pub struct WpeFilter {
    coeffs: Vec<Array2<Complex64>>,
    spec: StackSpec,
    channels: usize,
    diagnostics: SolveDiagnostics,
}

impl WpeFilter {
    pub fn coeffs(&self, target: usize) -> &Array2<Complex64> {
        &self.coeffs[target]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn diagnostics(&self) -> &SolveDiagnostics {
        &self.diagnostics
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs
            .iter()
            .all(|c| c.iter().all(|z| z.norm() == 0.0))
    }

    /// The single-channel filter as an FCP bank over `past_delayed(taps + delay, delay)`.
    pub fn as_filter_bank(&self) -> Option<FilterBank> {
        if self.channels != 1 {
            return None;
        }
        FilterBank::new(self.coeffs[0].clone(), self.spec).ok()
    }

    /// Predicted late reverberation in every channel.
    pub fn predict(&self, mixtures: &[ComplexSpectrogram]) -> Result<Vec<ComplexSpectrogram>> {
        check_mixtures(mixtures)?;
        if mixtures.len() != self.channels {
            return Err(Error::Shape(format!(
                "filter built for {} channels, got {}",
                self.channels,
                mixtures.len()
            )));
        }
        let (frames, bins) = mixtures[0].shape();
        if self.coeffs[0].nrows() != bins {
            return Err(Error::Shape(
                "filter bin count does not match mixtures".into(),
            ));
        }
        let lags = self.spec.lags();
        let taps = lags.len();
        let sources: Vec<Vec<Vec<Complex64>>> = mixtures.iter().map(by_bin).collect();
        self.coeffs
            .iter()
            .map(|coeffs| {
                let cols: Vec<Vec<Complex64>> = (0..bins)
                    .into_par_iter()
                    .map(|f| {
                        let row = coeffs.row(f);
                        let mut out = vec![Complex64::new(0.0, 0.0); frames];
                        for (s, src) in sources.iter().enumerate() {
                            let c = row.slice(ndarray::s![s * taps..(s + 1) * taps]).to_vec();
                            for (o, v) in out.iter_mut().zip(filter_bin(&src[f], &c, &lags)) {
                                *o += v;
                            }
                        }
                        out
                    })
                    .collect();
                let mut data = Array2::<Complex64>::zeros((frames, bins));
                for (f, col) in cols.iter().enumerate() {
                    data.column_mut(f).assign(&ndarray::ArrayView1::from(col));
                }
                Ok(ComplexSpectrogram::from_parts(data, *mixtures[0].config()))
            })
            .collect()
    }
}

fn check_mixtures(mixtures: &[ComplexSpectrogram]) -> Result<()> {
    let first = mixtures
        .first()
        .ok_or_else(|| Error::Domain("WPE needs at least one channel".into()))?;
    for m in &mixtures[1..] {
        first.ensure_same_shape(m, "WPE channels")?;
    }
    Ok(())
}

/// One weighted regression of every channel onto the joint delayed past of all channels.
pub fn wpe_filter_step(
    mixtures: &[ComplexSpectrogram],
    psd: &WeightMap,
    cfg: &WpeConfig,
) -> Result<WpeFilter> {
    cfg.validate()?;
    check_mixtures(mixtures)?;
    let (frames, bins) = mixtures[0].shape();
    if psd.shape() != (frames, bins) {
        return Err(Error::Shape(format!(
            "psd {:?} vs mixtures {:?}",
            psd.shape(),
            (frames, bins)
        )));
    }
    let spec = cfg.stack_spec();
    let lags = spec.lags();
    let channels = mixtures.len();
    let n = channels * lags.len();
    let sources: Vec<Vec<Vec<Complex64>>> = mixtures.iter().map(by_bin).collect();
    let weights = weights_by_bin(psd);
    let per_bin: Vec<(Vec<Vec<Complex64>>, bool, f64)> = (0..bins)
        .into_par_iter()
        .map(|f| {
            let src: Vec<&[Complex64]> = sources.iter().map(|s| s[f].as_slice()).collect();
            let system = factor_bin(&src, &weights[f], &lags);
            let sols = (0..channels)
                .map(|c| solve_bin(&system, &src, &sources[c][f], &weights[f], &lags))
                .collect();
            (sols, system.is_degenerate(), system.condition())
        })
        .collect();
    let mut diagnostics = SolveDiagnostics::default();
    for (_, degenerate, cond) in &per_bin {
        if *degenerate {
            diagnostics.degenerate_bins += 1;
        } else {
            diagnostics.max_condition = diagnostics.max_condition.max(*cond);
        }
    }
    let coeffs = (0..channels)
        .map(|c| {
            let mut a = Array2::<Complex64>::zeros((bins, n));
            for (f, (sols, _, _)) in per_bin.iter().enumerate() {
                a.row_mut(f).assign(&ndarray::ArrayView1::from(&sols[c]));
            }
            a
        })
        .collect();
    Ok(WpeFilter {
        coeffs,
        spec,
        channels,
        diagnostics,
    })
}

/// Channel-averaged power of `estimates`, floored at `floor · max`.
pub fn wpe_psd(estimates: &[ComplexSpectrogram], floor: f64) -> Result<WeightMap> {
    check_mixtures(estimates)?;
    let mut power = Array2::<f64>::zeros(estimates[0].shape());
    for e in estimates {
        power.zip_mut_with(e.data(), |acc, z| *acc += z.norm_sqr());
    }
    let p = estimates.len() as f64;
    power.mapv_inplace(|v| v / p);
    let max = power.iter().cloned().fold(0.0f64, f64::max);
    let min = if max > 0.0 { floor * max } else { f64::EPSILON };
    power.mapv_inplace(|v| v.max(min));
    WeightMap::from_values(power)
}

#[derive(Debug, Clone)]
pub struct WpeOutput {
    pub estimates: Vec<ComplexSpectrogram>,
    pub filter: WpeFilter,
}

/// Iterative WPE; returns the dereverberated spectrogram of every channel.
pub fn wpe_dereverb(
    mixtures: &[ComplexSpectrogram],
    cfg: &WpeConfig,
) -> Result<Vec<ComplexSpectrogram>> {
    Ok(wpe_run(mixtures, cfg)?.estimates)
}

/// As [`wpe_dereverb`], also returning the final filter.
pub fn wpe_run(mixtures: &[ComplexSpectrogram], cfg: &WpeConfig) -> Result<WpeOutput> {
    cfg.validate()?;
    check_mixtures(mixtures)?;
    let frames = mixtures[0].frame_count();
    if frames <= cfg.taps {
        return Err(Error::Domain(format!(
            "WPE needs more frames ({frames}) than taps ({})",
            cfg.taps
        )));
    }
    let mut estimates = mixtures.to_vec();
    let mut filter = None;
    for _ in 0..cfg.iterations {
        let psd = wpe_psd(&estimates, cfg.psd_floor)?;
        let step = wpe_filter_step(mixtures, &psd, cfg)?;
        let predicted = step.predict(mixtures)?;
        estimates = mixtures
            .iter()
            .zip(&predicted)
            .map(|(y, r)| ComplexSpectrogram::from_parts(y.data() - r.data(), *y.config()))
            .collect();
        filter = Some(step);
    }
    Ok(WpeOutput {
        estimates,
        filter: filter.expect("at least one iteration"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcp::{apply_filter, fcp_ref_full};
    use crate::spectral::StftConfig;
    use crate::stacking::{build_stack, lambda_weight};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg_tiny() -> StftConfig {
        StftConfig {
            window_len: 4,
            hop_len: 2,
            dft_size: 4,
            ..Default::default()
        }
    }

    fn random_spec(rng: &mut ChaCha8Rng, frames: usize) -> ComplexSpectrogram {
        let c = cfg_tiny();
        let data = Array2::from_shape_fn((frames, c.bin_count()), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        ComplexSpectrogram::new(data, c).unwrap()
    }

    #[test]
    fn defaults_follow_channel_count() {
        assert_eq!(WpeConfig::for_channels(1).taps, 37);
        assert_eq!(WpeConfig::for_channels(4).taps, 10);
        assert_eq!(WpeConfig::for_channels(8).taps, 5);
        assert_eq!(WpeConfig::default().delay, 3);
        assert_eq!(WpeConfig::default().iterations, 3);
    }

    #[test]
    fn single_channel_matches_fcp_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_spec(&mut rng, 30);
        let cfg = WpeConfig {
            taps: 4,
            delay: 2,
            iterations: 1,
            psd_floor: 1e-10,
        };
        let lambda = lambda_weight(std::slice::from_ref(&y), 1e-4).unwrap();
        let step = wpe_filter_step(std::slice::from_ref(&y), &lambda, &cfg).unwrap();
        let wpe_pred = step.predict(std::slice::from_ref(&y)).unwrap().remove(0);
        let bank = fcp_ref_full(&y, &y, cfg.stack_spec(), &lambda).unwrap();
        let fcp_pred = apply_filter(&bank, &build_stack(&y, cfg.stack_spec()).unwrap()).unwrap();
        let err = crate::spectral::relative_l2(
            &wpe_pred
                .data()
                .iter()
                .flat_map(|z| [z.re, z.im])
                .collect::<Vec<_>>(),
            &fcp_pred
                .data()
                .iter()
                .flat_map(|z| [z.re, z.im])
                .collect::<Vec<_>>(),
        );
        assert!(err <= 1e-12, "{err}");
        assert_eq!(step.as_filter_bank().unwrap().coeffs(), bank.coeffs());
    }

    #[test]
    fn delayed_copy_is_predicted() {
        // y(t) = 0.6 · y(t - 3) + innovation only at the first frames
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg_tiny();
        let frames = 40;
        let mut data = Array2::<Complex64>::zeros((frames, c.bin_count()));
        for f in 0..c.bin_count() {
            for t in 0..frames {
                data[[t, f]] = if t < 3 {
                    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                } else {
                    data[[t - 3, f]] * 0.6
                };
            }
        }
        let y = ComplexSpectrogram::new(data, c).unwrap();
        let cfg = WpeConfig {
            taps: 2,
            delay: 3,
            iterations: 1,
            psd_floor: 1e-10,
        };
        let step = wpe_filter_step(
            std::slice::from_ref(&y),
            &WeightMap::uniform(frames, 3),
            &cfg,
        )
        .unwrap();
        // newest lag is the delay itself: last tap
        for f in 0..3 {
            let row = step.coeffs(0).row(f);
            assert!((row[1] - Complex64::new(0.6, 0.0)).norm() < 1e-5, "{row}");
            assert!(row[0].norm() < 1e-5);
        }
        let pred = step.predict(std::slice::from_ref(&y)).unwrap().remove(0);
        let resid: f64 = (3..frames)
            .flat_map(|t| (0..3).map(move |f| (t, f)))
            .map(|(t, f)| (y.data()[[t, f]] - pred.data()[[t, f]]).norm_sqr())
            .sum();
        assert!(resid.sqrt() <= 1e-6 * y.energy().sqrt());
    }

    #[test]
    fn zero_mixture_gives_zero_filter() {
        let y = ComplexSpectrogram::zeros(20, cfg_tiny());
        let psd = wpe_psd(std::slice::from_ref(&y), 1e-10).unwrap();
        let step = wpe_filter_step(
            std::slice::from_ref(&y),
            &psd,
            &WpeConfig {
                taps: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(step.is_zero());
        assert_eq!(step.diagnostics().degenerate_bins, 3);
    }

    #[test]
    fn output_plus_prediction_is_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mix: Vec<_> = (0..2).map(|_| random_spec(&mut rng, 25)).collect();
        let cfg = WpeConfig {
            taps: 3,
            iterations: 2,
            ..Default::default()
        };
        let out = wpe_run(&mix, &cfg).unwrap();
        let pred = out.filter.predict(&mix).unwrap();
        for ((e, p), y) in out.estimates.iter().zip(&pred).zip(&mix) {
            // exact up to the rounding of one subtraction and one addition
            for ((a, b), c) in e.data().iter().zip(p.data()).zip(y.data()) {
                let bound = 2.0 * f64::EPSILON * (c.norm() + b.norm());
                assert!((a + b - c).norm() <= bound);
            }
        }
        assert_eq!(out.estimates, wpe_dereverb(&mix, &cfg).unwrap());
    }

    #[test]
    fn rejects_short_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random_spec(&mut rng, 5);
        assert!(wpe_dereverb(
            &[y],
            &WpeConfig {
                taps: 5,
                ..Default::default()
            }
        )
        .is_err());
    }
}
