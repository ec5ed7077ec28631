//! Mixture-constraint loss.
//!
//! A source estimate Ŝ_q at the reference microphone q is filtered forward onto
//! every microphone with closed-form FCP filters, and the reconstructions are
//! compared with the observed mixtures:
//!
//! ```text
//! Ŷ_q = Ŝ_q + ĝ_q^H S̃_q  [+ ŵ_q^H V̆_q]
//! Ŷ_p =       ĥ_p^H S̄_q  [+ ŵ_p^H V̆_q]
//! L   = F(Y_q, Ŷ_q) + α Σ_{p≠q} F(Y_p, Ŷ_p)
//! ```

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcp::{apply_filter, solve_wls_multi, FilterBank, SolveDiagnostics};
use crate::roomsim::{hypothesized_estimate, relative_rir, MultichannelUtterance};
use crate::spectral::ComplexSpectrogram;
use crate::stacking::{build_stack, lambda_weight, StackSpec, WeightMap, DEFAULT_XI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefVariant {
    /// Regress `Y_q - Ŝ_q` onto the delayed past of Ŝ_q.
    Subtracted,
    /// Regress the full `Y_q` onto the delayed past of Ŝ_q.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// Real, imaginary and magnitude L1 terms normalized by `Σ|Y|`.
    RiMag,
    /// Plain `Σ|Y - Ŷ|²`.
    SquaredL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingKind {
    /// Floored channel-averaged mixture power.
    MixturePower,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub k: usize,
    pub delta: usize,
    pub past: usize,
    pub future: usize,
    pub garbage_l: Option<usize>,
    pub alpha: f64,
    pub ref_variant: RefVariant,
    pub xi: f64,
    pub distance: DistanceKind,
    pub weighting: WeightingKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            k: 40,
            delta: 3,
            past: 40,
            future: 0,
            garbage_l: None,
            alpha: 1.0,
            ref_variant: RefVariant::Full,
            xi: DEFAULT_XI,
            distance: DistanceKind::RiMag,
            weighting: WeightingKind::MixturePower,
        }
    }
}

impl LossConfig {
    /// Microphone weight used for a `mics`-channel loss: 1 up to four channels, `3/(P-1)` above.
    pub fn alpha_for(mics: usize) -> f64 {
        if mics > 4 {
            3.0 / (mics - 1) as f64
        } else {
            1.0
        }
    }

    pub fn with_alpha_for(mut self, mics: usize) -> Self {
        self.alpha = Self::alpha_for(mics);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!(
                "xi must be positive, got {}",
                self.xi
            )));
        }
        self.ref_spec()?;
        self.nonref_spec()?;
        Ok(())
    }

    pub fn ref_spec(&self) -> Result<StackSpec> {
        StackSpec::past_delayed(self.k, self.delta)
    }

    pub fn nonref_spec(&self) -> Result<StackSpec> {
        StackSpec::context(self.past, self.future)
    }

    pub fn garbage_spec(&self) -> Option<StackSpec> {
        self.garbage_l.map(StackSpec::garbage)
    }

    pub fn weights(&self, mixtures: &[ComplexSpectrogram]) -> Result<WeightMap> {
        match self.weighting {
            WeightingKind::MixturePower => lambda_weight(mixtures, self.xi),
            WeightingKind::Uniform => {
                let first = mixtures
                    .first()
                    .ok_or_else(|| Error::Domain("no mixtures".into()))?;
                let (t, f) = first.shape();
                Ok(WeightMap::uniform(t, f))
            }
        }
    }
}

fn normalizer(y: &ComplexSpectrogram) -> Result<f64> {
    let norm: f64 = y.data().iter().map(|z| z.norm()).sum();
    if !(norm > 0.0) {
        return Err(Error::Degenerate(
            "distance normalizer Σ|Y| is zero (silent channel)".into(),
        ));
    }
    Ok(norm)
}

/// `Σ (|ΔRe| + |ΔIm| + ||Ŷ| - |Y||) / Σ|Y|`.
pub fn distance_f(y: &ComplexSpectrogram, y_hat: &ComplexSpectrogram) -> Result<f64> {
    distance(DistanceKind::RiMag, y, y_hat)
}

pub fn distance(
    kind: DistanceKind,
    y: &ComplexSpectrogram,
    y_hat: &ComplexSpectrogram,
) -> Result<f64> {
    y.ensure_same_shape(y_hat, "distance")?;
    match kind {
        DistanceKind::RiMag => {
            let norm = normalizer(y)?;
            let mut num = 0.0;
            Zip::from(y.data()).and(y_hat.data()).for_each(|a, b| {
                let d = b - a;
                num += d.re.abs() + d.im.abs() + (b.norm() - a.norm()).abs();
            });
            Ok(num / norm)
        }
        DistanceKind::SquaredL2 => Ok(y
            .data()
            .iter()
            .zip(y_hat.data())
            .map(|(a, b)| (b - a).norm_sqr())
            .sum()),
    }
}

/// `∂F/∂Re Ŷ + i ∂F/∂Im Ŷ` at every T-F unit; 0 is taken where `|·|` has a kink.
pub fn distance_gradient(
    kind: DistanceKind,
    y: &ComplexSpectrogram,
    y_hat: &ComplexSpectrogram,
) -> Result<Array2<Complex64>> {
    y.ensure_same_shape(y_hat, "distance_gradient")?;
    let mut out = Array2::<Complex64>::zeros(y.shape());
    match kind {
        DistanceKind::RiMag => {
            let inv = 1.0 / normalizer(y)?;
            Zip::from(&mut out)
                .and(y.data())
                .and(y_hat.data())
                .for_each(|g, a, b| {
                    let d = b - a;
                    let mag = b.norm();
                    let mut v = Complex64::new(sign(d.re), sign(d.im));
                    if mag > 0.0 {
                        v += b / mag * sign(mag - a.norm());
                    }
                    *g = v * inv;
                });
        }
        DistanceKind::SquaredL2 => {
            Zip::from(&mut out)
                .and(y.data())
                .and(y_hat.data())
                .for_each(|g, a, b| *g = (b - a) * 2.0);
        }
    }
    Ok(out)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Every filter a loss evaluation needs, solved from one source estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct LossFilters {
    pub reference: FilterBank,
    /// One bank per microphone; the entry at the reference index is unused (zero).
    pub nonref: Vec<FilterBank>,
    /// Garbage-source banks per microphone, when a garbage estimate is used.
    pub garbage: Option<Vec<FilterBank>>,
}

impl LossFilters {
    pub fn diagnostics(&self) -> SolveDiagnostics {
        let mut d = *self.reference.diagnostics();
        for b in self.nonref.iter().chain(self.garbage.iter().flatten()) {
            d = d.merge(b.diagnostics());
        }
        d
    }

    pub fn is_degenerate(&self) -> bool {
        self.reference.is_degenerate()
    }
}

#[derive(Debug, Clone)]
pub struct McLossReport {
    pub loss_ref: f64,
    /// Per-microphone terms; `None` at the reference index.
    pub loss_nonref: Vec<Option<f64>>,
    pub total: f64,
    pub alpha: f64,
    pub reference_mic: usize,
    pub reconstructions: Vec<ComplexSpectrogram>,
    pub filters: LossFilters,
    pub diagnostics: SolveDiagnostics,
    /// The source estimate (or weighting) carried no energy somewhere.
    pub degenerate: bool,
}

impl McLossReport {
    pub fn nonref_sum(&self) -> f64 {
        self.loss_nonref.iter().flatten().sum()
    }
}

fn check_inputs(
    mixtures: &[ComplexSpectrogram],
    reference_mic: usize,
    s_hat: &ComplexSpectrogram,
    v_hat: Option<&ComplexSpectrogram>,
    cfg: &LossConfig,
) -> Result<()> {
    cfg.validate()?;
    if mixtures.is_empty() {
        return Err(Error::Domain("loss needs at least one microphone".into()));
    }
    if reference_mic >= mixtures.len() {
        return Err(Error::Domain(format!(
            "reference mic {reference_mic} out of range for {} channels",
            mixtures.len()
        )));
    }
    for m in mixtures {
        m.ensure_same_shape(s_hat, "mixture vs source estimate")?;
    }
    if let Some(v) = v_hat {
        v.ensure_same_shape(s_hat, "garbage estimate")?;
        if cfg.garbage_l.is_none() {
            return Err(Error::Config(
                "garbage estimate given but garbage_l is unset".into(),
            ));
        }
    }
    Ok(())
}

/// Solves the reference, non-reference and garbage filters for one estimate.
pub fn solve_loss_filters(
    mixtures: &[ComplexSpectrogram],
    reference_mic: usize,
    s_hat: &ComplexSpectrogram,
    v_hat: Option<&ComplexSpectrogram>,
    cfg: &LossConfig,
    weights: &WeightMap,
) -> Result<LossFilters> {
    check_inputs(mixtures, reference_mic, s_hat, v_hat, cfg)?;
    let y_q = &mixtures[reference_mic];
    let ref_stack = build_stack(s_hat, cfg.ref_spec()?)?;
    let ref_target = match cfg.ref_variant {
        RefVariant::Full => y_q.clone(),
        RefVariant::Subtracted => {
            ComplexSpectrogram::new(y_q.data() - s_hat.data(), *y_q.config())?
        }
    };
    let reference = solve_wls_multi(&[&ref_target], &ref_stack, weights)?
        .remove(0)
        .with_target_mic(reference_mic);

    let nonref_spec = cfg.nonref_spec()?;
    let others: Vec<usize> = (0..mixtures.len())
        .filter(|&p| p != reference_mic)
        .collect();
    let mut nonref: Vec<FilterBank> = (0..mixtures.len())
        .map(|p| FilterBank::zeros(s_hat.bin_count(), nonref_spec).with_target_mic(p))
        .collect();
    if !others.is_empty() {
        let stack = build_stack(s_hat, nonref_spec)?;
        let targets: Vec<&ComplexSpectrogram> = others.iter().map(|&p| &mixtures[p]).collect();
        for (p, bank) in others
            .iter()
            .zip(solve_wls_multi(&targets, &stack, weights)?)
        {
            nonref[*p] = bank.with_target_mic(*p);
        }
    }

    let garbage = match (v_hat, cfg.garbage_spec()) {
        (Some(v), Some(spec)) => {
            let stack = build_stack(v, spec)?;
            let targets: Vec<&ComplexSpectrogram> = mixtures.iter().collect();
            Some(
                solve_wls_multi(&targets, &stack, weights)?
                    .into_iter()
                    .enumerate()
                    .map(|(a, b)| b.with_target_mic(a))
                    .collect(),
            )
        }
        _ => None,
    };
    Ok(LossFilters {
        reference,
        nonref,
        garbage,
    })
}

/// Reconstructions `Ŷ_a` for every microphone under fixed filters.
pub fn reconstruct(
    mixtures: &[ComplexSpectrogram],
    reference_mic: usize,
    s_hat: &ComplexSpectrogram,
    v_hat: Option<&ComplexSpectrogram>,
    filters: &LossFilters,
) -> Result<Vec<ComplexSpectrogram>> {
    let ref_stack = build_stack(s_hat, *filters.reference.spec())?;
    let nonref_stack = build_stack(s_hat, *filters.nonref[0].spec())?;
    let garbage_stack = match (v_hat, &filters.garbage) {
        (Some(v), Some(banks)) => Some(build_stack(v, *banks[0].spec())?),
        _ => None,
    };
    (0..mixtures.len())
        .map(|a| {
            let mut y_hat = if a == reference_mic {
                let mut y = apply_filter(&filters.reference, &ref_stack)?;
                *y.data_mut() += s_hat.data();
                y
            } else {
                apply_filter(&filters.nonref[a], &nonref_stack)?
            };
            if let (Some(stack), Some(banks)) = (&garbage_stack, &filters.garbage) {
                *y_hat.data_mut() += apply_filter(&banks[a], stack)?.data();
            }
            Ok(y_hat)
        })
        .collect()
}

/// Loss of an estimate under already-solved filters.
pub fn evaluate_with_filters(
    mixtures: &[ComplexSpectrogram],
    reference_mic: usize,
    s_hat: &ComplexSpectrogram,
    v_hat: Option<&ComplexSpectrogram>,
    filters: LossFilters,
    cfg: &LossConfig,
) -> Result<McLossReport> {
    check_inputs(mixtures, reference_mic, s_hat, v_hat, cfg)?;
    let reconstructions = reconstruct(mixtures, reference_mic, s_hat, v_hat, &filters)?;
    let loss_ref = distance(
        cfg.distance,
        &mixtures[reference_mic],
        &reconstructions[reference_mic],
    )?;
    let loss_nonref = (0..mixtures.len())
        .map(|p| {
            if p == reference_mic {
                Ok(None)
            } else {
                distance(cfg.distance, &mixtures[p], &reconstructions[p]).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let nonref_sum: f64 = loss_nonref.iter().flatten().sum();
    let diagnostics = filters.diagnostics();
    let degenerate = filters.is_degenerate() || s_hat.energy() == 0.0;
    Ok(McLossReport {
        loss_ref,
        total: loss_ref + cfg.alpha * nonref_sum,
        loss_nonref,
        alpha: cfg.alpha,
        reference_mic,
        reconstructions,
        filters,
        diagnostics,
        degenerate,
    })
}

/// Solves every filter for `s_hat` and evaluates the weighted multi-microphone loss.
pub fn mc_loss_specs(
    mixtures: &[ComplexSpectrogram],
    reference_mic: usize,
    s_hat: &ComplexSpectrogram,
    v_hat: Option<&ComplexSpectrogram>,
    cfg: &LossConfig,
) -> Result<McLossReport> {
    check_inputs(mixtures, reference_mic, s_hat, v_hat, cfg)?;
    let weights = cfg.weights(mixtures)?;
    let filters = solve_loss_filters(mixtures, reference_mic, s_hat, v_hat, cfg, &weights)?;
    let mut report = evaluate_with_filters(mixtures, reference_mic, s_hat, v_hat, filters, cfg)?;
    report.degenerate |= weights.is_degenerate();
    Ok(report)
}

pub fn mc_loss_total(
    utt: &MultichannelUtterance,
    s_hat: &ComplexSpectrogram,
    v_hat: Option<&ComplexSpectrogram>,
    cfg: &LossConfig,
) -> Result<McLossReport> {
    mc_loss_specs(&utt.mixture_spec, utt.reference_mic, s_hat, v_hat, cfg)
}

/// Reference-microphone term and its reconstruction.
pub fn mc_loss_ref(
    y_q: &ComplexSpectrogram,
    s_hat: &ComplexSpectrogram,
    v_hat: Option<&ComplexSpectrogram>,
    cfg: &LossConfig,
    weights: &WeightMap,
) -> Result<(f64, ComplexSpectrogram)> {
    let mixtures = std::slice::from_ref(y_q);
    let filters = solve_loss_filters(mixtures, 0, s_hat, v_hat, cfg, weights)?;
    let mut rec = reconstruct(mixtures, 0, s_hat, v_hat, &filters)?;
    let y_hat = rec.remove(0);
    Ok((distance(cfg.distance, y_q, &y_hat)?, y_hat))
}

/// Non-reference term for one microphone `y_p` and its reconstruction.
pub fn mc_loss_nonref(
    y_p: &ComplexSpectrogram,
    s_hat: &ComplexSpectrogram,
    v_hat: Option<&ComplexSpectrogram>,
    cfg: &LossConfig,
    weights: &WeightMap,
) -> Result<(f64, ComplexSpectrogram)> {
    check_inputs(std::slice::from_ref(y_p), 0, s_hat, v_hat, cfg)?;
    let stack = build_stack(s_hat, cfg.nonref_spec()?)?;
    let bank = solve_wls_multi(&[y_p], &stack, weights)?.remove(0);
    let mut y_hat = apply_filter(&bank, &stack)?;
    if let (Some(v), Some(spec)) = (v_hat, cfg.garbage_spec()) {
        let gstack = build_stack(v, spec)?;
        let w = solve_wls_multi(&[y_p], &gstack, weights)?.remove(0);
        *y_hat.data_mut() += apply_filter(&w, &gstack)?.data();
    }
    Ok((distance(cfg.distance, y_p, &y_hat)?, y_hat))
}

/// `Ŝ(t) = β · Y(t + Δ)`, zero over the last Δ frames.
pub fn construct_trivial_shifted_estimate(
    y_q: &ComplexSpectrogram,
    beta: Complex64,
    delta: usize,
) -> ComplexSpectrogram {
    let (frames, bins) = y_q.shape();
    let mut out = Array2::<Complex64>::zeros((frames, bins));
    for t in 0..frames.saturating_sub(delta) {
        for f in 0..bins {
            out[[t, f]] = beta * y_q.data()[[t + delta, f]];
        }
    }
    ComplexSpectrogram::from_parts(out, *y_q.config())
}

/// Fraction of T-F units (with both values nonzero) where `s_hat` is not a
/// real multiple of `y`, i.e. `|Im(Ŝ Y*)| > tol · |Ŝ||Y|`.
pub fn non_collinear_fraction(
    s_hat: &ComplexSpectrogram,
    y: &ComplexSpectrogram,
    tol: f64,
) -> Result<f64> {
    s_hat.ensure_same_shape(y, "collinearity check")?;
    let (mut checked, mut failed) = (0usize, 0usize);
    Zip::from(s_hat.data()).and(y.data()).for_each(|s, y| {
        let scale = s.norm() * y.norm();
        if scale > 0.0 {
            checked += 1;
            if (s * y.conj()).im.abs() > tol * scale {
                failed += 1;
            }
        }
    });
    if checked == 0 {
        return Err(Error::Degenerate(
            "no T-F unit where both signals are nonzero".into(),
        ));
    }
    Ok(failed as f64 / checked as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossCurvePoint {
    pub tau_samples: usize,
    pub loss_total: f64,
    pub loss_ref: f64,
}

/// Loss of hypothesized estimates built from the reference direct-path signal
/// and the relative RIR truncated to each `tau` in `tau_grid`.
pub fn loss_curve(
    utt: &MultichannelUtterance,
    tau_grid: &[usize],
    cfg: &LossConfig,
) -> Result<Vec<LossCurvePoint>> {
    let rirs = utt
        .rirs
        .as_ref()
        .ok_or_else(|| Error::Missing(format!("utterance {} has no ground-truth RIRs", utt.id)))?;
    let q = utt.reference_mic;
    let relative = relative_rir(&rirs.direct[q], &rirs.full[q])?;
    tau_grid
        .iter()
        .map(|&tau| {
            let s_hat = hypothesized_estimate(&utt.direct_path[q], &relative.rir, tau, &utt.stft)?;
            let report = mc_loss_total(utt, &s_hat, None, cfg)?;
            Ok(LossCurvePoint {
                tau_samples: tau,
                loss_total: report.total,
                loss_ref: report.loss_ref,
            })
        })
        .collect()
}

/// `1, 1 + step, 1 + 2·step, …` up to and including `max_tau`.
pub fn tau_grid(step: usize, max_tau: usize) -> Vec<usize> {
    let step = step.max(1);
    (0..)
        .map(|i| 1 + i * step)
        .take_while(|&t| t <= max_tau.max(1))
        .collect()
}

pub fn loss_curve_csv(points: &[LossCurvePoint]) -> String {
    let mut out = String::from("tau_samples,loss_total,loss_ref\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            p.tau_samples, p.loss_total, p.loss_ref
        ));
    }
    out
}
