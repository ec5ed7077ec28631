//! Unsupervised dereverberation by per-utterance optimization of a complex
//! mask against the mixture-constraint loss.
//!
//! Each outer iteration refreshes the closed-form filters from the current
//! estimate and then takes a few backtracking gradient steps on the mask with
//! the filters held fixed. An outer iteration is kept only if the loss with
//! refreshed filters does not increase, so the recorded trajectory is monotone.

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcp::{apply_filter, by_bin, filter_bin, FilterBank};
use crate::mcloss::{
    distance_gradient, evaluate_with_filters, mc_loss_specs, LossConfig, LossFilters, McLossReport,
    RefVariant,
};
use crate::roomsim::MultichannelUtterance;
use crate::spectral::{istft, ComplexSpectrogram, Waveform};
use crate::stacking::build_stack;

/// Limit on the real and imaginary parts of a mask.
pub const MASK_BOUND: f64 = 5.0;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// `Ŝ = M ⊙ Y_q` with a clamped complex mask.
    Masking,
    /// `Ŝ` is the free parameter itself.
    Mapping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    pub kind: EstimatorKind,
    pub values: Array2<Complex64>,
    pub bound: f64,
}

fn clamp(z: Complex64, bound: f64) -> Complex64 {
    Complex64::new(z.re.clamp(-bound, bound), z.im.clamp(-bound, bound))
}

impl EstimatorParams {
    pub fn unit_mask(frames: usize, bins: usize) -> Self {
        Self {
            kind: EstimatorKind::Masking,
            values: Array2::from_elem((frames, bins), Complex64::new(1.0, 0.0)),
            bound: MASK_BOUND,
        }
    }

    pub fn mask(values: Array2<Complex64>) -> Self {
        Self {
            kind: EstimatorKind::Masking,
            values,
            bound: MASK_BOUND,
        }
    }

    pub fn mapping(values: Array2<Complex64>) -> Self {
        Self {
            kind: EstimatorKind::Mapping,
            values,
            bound: MASK_BOUND,
        }
    }

    /// The mask actually applied (clamped), or the mapped values.
    pub fn effective(&self) -> Array2<Complex64> {
        match self.kind {
            EstimatorKind::Masking => self.values.mapv(|z| clamp(z, self.bound)),
            EstimatorKind::Mapping => self.values.clone(),
        }
    }

    fn clamp_in_place(&mut self) {
        if self.kind == EstimatorKind::Masking {
            let b = self.bound;
            self.values.mapv_inplace(|z| clamp(z, b));
        }
    }
}

pub fn forward(params: &EstimatorParams, y_q: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    if params.values.dim() != y_q.shape() {
        return Err(Error::Shape(format!(
            "parameters {:?} vs mixture {:?}",
            params.values.dim(),
            y_q.shape()
        )));
    }
    let data = match params.kind {
        EstimatorKind::Masking => {
            let mut out = params.effective();
            out.zip_mut_with(y_q.data(), |m, y| *m *= y);
            out
        }
        EstimatorKind::Mapping => params.values.clone(),
    };
    ComplexSpectrogram::new(data, *y_q.config())
}

/// Chain rule from `∂L/∂Ŝ` to the parameters; clamped mask components get 0.
fn to_param_gradient(
    params: &EstimatorParams,
    y_q: &ComplexSpectrogram,
    grad_s: Array2<Complex64>,
) -> Array2<Complex64> {
    match params.kind {
        EstimatorKind::Mapping => grad_s,
        EstimatorKind::Masking => {
            let mut g = grad_s;
            let b = params.bound;
            Zip::from(&mut g)
                .and(y_q.data())
                .and(&params.values)
                .for_each(|g, y, m| {
                    let v = y.conj() * *g;
                    *g = Complex64::new(
                        if m.re.abs() > b { 0.0 } else { v.re },
                        if m.im.abs() > b { 0.0 } else { v.im },
                    );
                });
            g
        }
    }
}

/// `out(τ) += Σ_k c_k · G(τ + lag_k)`, the adjoint of `filter_bin`.
fn adjoint_into(out: &mut [Complex64], grad: &[Complex64], bank: &FilterBank, f: usize) {
    let lags: Vec<isize> = bank.spec().lags().iter().map(|l| -l).collect();
    let coeffs: Vec<Complex64> = bank.coeffs().row(f).iter().map(|c| c.conj()).collect();
    for (o, v) in out.iter_mut().zip(filter_bin(grad, &coeffs, &lags)) {
        *o += v;
    }
}

/// Gradients of the fixed-filter loss with respect to Ŝ and (if used) V̂,
/// as `∂L/∂Re + i ∂L/∂Im`.
fn source_gradients(
    mixtures: &[ComplexSpectrogram],
    reference_mic: usize,
    report: &McLossReport,
    cfg: &LossConfig,
) -> Result<(Array2<Complex64>, Option<Array2<Complex64>>)> {
    let (frames, bins) = mixtures[0].shape();
    let per_mic: Vec<Vec<Vec<Complex64>>> = mixtures
        .iter()
        .zip(&report.reconstructions)
        .enumerate()
        .map(|(a, (y, y_hat))| {
            let w = if a == reference_mic { 1.0 } else { cfg.alpha };
            let g = distance_gradient(cfg.distance, y, y_hat)?.mapv(|z| z * w);
            Ok(by_bin(&ComplexSpectrogram::from_parts(g, *y.config())))
        })
        .collect::<Result<_>>()?;
    let filters = &report.filters;
    let mut grad_s = Array2::<Complex64>::zeros((frames, bins));
    let mut grad_v = filters
        .garbage
        .as_ref()
        .map(|_| Array2::<Complex64>::zeros((frames, bins)));
    let mut col = vec![ZERO; frames];
    for f in 0..bins {
        col.copy_from_slice(&per_mic[reference_mic][f]);
        adjoint_into(&mut col, &per_mic[reference_mic][f], &filters.reference, f);
        for (p, g) in per_mic.iter().enumerate() {
            if p != reference_mic {
                adjoint_into(&mut col, &g[f], &filters.nonref[p], f);
            }
        }
        grad_s
            .column_mut(f)
            .assign(&ndarray::ArrayView1::from(&col));
        if let (Some(gv), Some(banks)) = (grad_v.as_mut(), filters.garbage.as_ref()) {
            col.iter_mut().for_each(|z| *z = ZERO);
            for (a, g) in per_mic.iter().enumerate() {
                adjoint_into(&mut col, &g[f], &banks[a], f);
            }
            gv.column_mut(f).assign(&ndarray::ArrayView1::from(&col));
        }
    }
    Ok((grad_s, grad_v))
}

fn fixed_filter_report(
    utt: &MultichannelUtterance,
    params: &EstimatorParams,
    garbage: Option<&EstimatorParams>,
    filters: &LossFilters,
    cfg: &LossConfig,
) -> Result<McLossReport> {
    let y_q = utt.reference_spec();
    let s_hat = forward(params, y_q)?;
    let v_hat = garbage.map(|g| forward(g, y_q)).transpose()?;
    evaluate_with_filters(
        &utt.mixture_spec,
        utt.reference_mic,
        &s_hat,
        v_hat.as_ref(),
        filters.clone(),
        cfg,
    )
}

/// Subgradient of the loss with respect to the mask (or mapped values),
/// holding `filters` fixed. Kinks of `|·|` contribute 0.
pub fn mask_gradient(
    params: &EstimatorParams,
    utt: &MultichannelUtterance,
    filters: &LossFilters,
    cfg: &LossConfig,
) -> Result<Array2<Complex64>> {
    let report = fixed_filter_report(utt, params, None, filters, cfg)?;
    let (grad_s, _) = source_gradients(&utt.mixture_spec, utt.reference_mic, &report, cfg)?;
    Ok(to_param_gradient(params, utt.reference_spec(), grad_s))
}

/// Central differences of the loss over the real and imaginary part of every
/// parameter. With `filters` they stay fixed (the quantity [`mask_gradient`]
/// returns); with `None` they are re-solved at every evaluation, giving the
/// gradient through the closed-form filter estimate. Meant for tiny instances.
pub fn finite_difference_gradient(
    params: &EstimatorParams,
    utt: &MultichannelUtterance,
    filters: Option<&LossFilters>,
    cfg: &LossConfig,
    h: f64,
) -> Result<Array2<Complex64>> {
    let loss = |p: &EstimatorParams| -> Result<f64> {
        Ok(match filters {
            Some(f) => fixed_filter_report(utt, p, None, f, cfg)?.total,
            None => {
                mc_loss_specs(
                    &utt.mixture_spec,
                    utt.reference_mic,
                    &forward(p, utt.reference_spec())?,
                    None,
                    cfg,
                )?
                .total
            }
        })
    };
    let mut out = Array2::<Complex64>::zeros(params.values.dim());
    let mut probe = params.clone();
    for (idx, g) in out.indexed_iter_mut() {
        let base = params.values[idx];
        let mut part = |dir: Complex64| -> Result<f64> {
            probe.values[idx] = base + dir * h;
            let up = loss(&probe)?;
            probe.values[idx] = base - dir * h;
            let down = loss(&probe)?;
            probe.values[idx] = base;
            Ok((up - down) / (2.0 * h))
        };
        *g = Complex64::new(
            part(Complex64::new(1.0, 0.0))?,
            part(Complex64::new(0.0, 1.0))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Mask of ones (or the mixture itself when mapping).
    UnitMask,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub loss: LossConfig,
    pub kind: EstimatorKind,
    pub max_outer_iters: usize,
    pub mask_steps_per_outer: usize,
    /// Initial RMS change of the preconditioned parameter update.
    pub step_size: f64,
    /// Step multiplier applied at every outer iteration.
    pub step_decay: f64,
    pub init_kind: InitKind,
    /// Initial value of the garbage mask when `loss.garbage_l` is set.
    pub garbage_init: f64,
    pub seed: u64,
    /// Stop when the relative loss decrease of an accepted outer step falls below this.
    pub convergence_tol: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            kind: EstimatorKind::Masking,
            max_outer_iters: 20,
            mask_steps_per_outer: 4,
            step_size: 0.05,
            step_decay: 1.0,
            init_kind: InitKind::UnitMask,
            garbage_init: 0.1,
            seed: 0,
            convergence_tol: 1e-4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return Err(Error::Config("step_decay must lie in (0, 1]".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config("convergence_tol must be positive".into()));
        }
        if self.max_outer_iters == 0 || self.mask_steps_per_outer == 0 {
            return Err(Error::Config("iteration counts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Converged,
    /// No outer step could lower the loss for three consecutive iterations.
    Diverged,
}

/// Loss with the old filters and with the refreshed filters, per accepted outer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefreshRecord {
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone)]
pub struct DereverbResult {
    pub s_hat: ComplexSpectrogram,
    pub v_hat: Option<ComplexSpectrogram>,
    pub params: EstimatorParams,
    pub waveform: Waveform,
    /// True loss (filters solved from the estimate) after initialization and every accepted outer step.
    pub trajectory: Vec<f64>,
    pub refreshes: Vec<RefreshRecord>,
    pub filters: LossFilters,
    pub final_report: McLossReport,
    pub kind: EstimatorKind,
    pub ref_variant: RefVariant,
    pub outer_iterations: usize,
    pub stop_reason: StopReason,
    pub diverged: bool,
}

impl DereverbResult {
    pub fn initial_loss(&self) -> f64 {
        self.trajectory[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.trajectory.last().expect("trajectory is never empty")
    }
}

fn rms(a: &Array2<Complex64>) -> f64 {
    (a.iter().map(|z| z.norm_sqr()).sum::<f64>() / a.len().max(1) as f64).sqrt()
}

/// Direction scaled so that every T-F unit moves by a comparable relative amount.
fn preconditioned(
    grad: &Array2<Complex64>,
    kind: EstimatorKind,
    y_q: &ComplexSpectrogram,
) -> Option<Array2<Complex64>> {
    let mut d = grad.clone();
    Zip::from(&mut d).and(y_q.data()).for_each(|d, y| {
        let m = y.norm();
        *d = match kind {
            EstimatorKind::Masking if m > 0.0 => *d / m,
            EstimatorKind::Masking => ZERO,
            EstimatorKind::Mapping => *d * m,
        };
    });
    let scale = rms(&d);
    (scale > 0.0 && scale.is_finite()).then(|| d.mapv(|z| z / scale))
}

struct State {
    params: EstimatorParams,
    garbage: Option<EstimatorParams>,
}

impl State {
    fn step(&self, d: &Array2<Complex64>, dv: Option<&Array2<Complex64>>, eta: f64) -> Self {
        let mut params = self.params.clone();
        params.values.zip_mut_with(d, |m, g| *m -= g * eta);
        params.clamp_in_place();
        let garbage = self.garbage.as_ref().map(|g| {
            let mut g = g.clone();
            if let Some(dv) = dv {
                g.values.zip_mut_with(dv, |m, d| *m -= d * eta);
                g.clamp_in_place();
            }
            g
        });
        Self { params, garbage }
    }

    /// `self + t · (other - self)`.
    fn toward(&self, other: &Self, t: f64) -> Self {
        let lerp = |a: &EstimatorParams, b: &EstimatorParams| {
            let mut p = a.clone();
            Zip::from(&mut p.values)
                .and(&b.values)
                .for_each(|x, y| *x += (y - *x) * t);
            p
        };
        Self {
            params: lerp(&self.params, &other.params),
            garbage: match (&self.garbage, &other.garbage) {
                (Some(a), Some(b)) => Some(lerp(a, b)),
                _ => None,
            },
        }
    }
}

fn true_report(
    utt: &MultichannelUtterance,
    state: &State,
    cfg: &LossConfig,
) -> Result<McLossReport> {
    let y_q = utt.reference_spec();
    let s_hat = forward(&state.params, y_q)?;
    let v_hat = state
        .garbage
        .as_ref()
        .map(|g| forward(g, y_q))
        .transpose()?;
    mc_loss_specs(
        &utt.mixture_spec,
        utt.reference_mic,
        &s_hat,
        v_hat.as_ref(),
        cfg,
    )
}

/// Block-coordinate descent on the estimator parameters of one utterance.
pub fn optimize(utt: &MultichannelUtterance, cfg: &OptimConfig) -> Result<DereverbResult> {
    cfg.validate()?;
    if cfg.loss.ref_variant == RefVariant::Subtracted && utt.mic_count() == 1 {
        return Err(Error::Config(
            "single-microphone optimization with the subtracted reference filter is trivially \
             minimized by copying the mixture (the filter becomes all-zero); use ref_variant = full"
                .into(),
        ));
    }
    let loss = &cfg.loss;
    let y_q = utt.reference_spec().clone();
    let (frames, bins) = y_q.shape();
    let params = match (cfg.kind, cfg.init_kind) {
        (EstimatorKind::Masking, InitKind::UnitMask) => EstimatorParams::unit_mask(frames, bins),
        (EstimatorKind::Masking, InitKind::Zeros) => {
            EstimatorParams::mask(Array2::zeros((frames, bins)))
        }
        (EstimatorKind::Mapping, InitKind::UnitMask) => {
            EstimatorParams::mapping(y_q.data().clone())
        }
        (EstimatorKind::Mapping, InitKind::Zeros) => {
            EstimatorParams::mapping(Array2::zeros((frames, bins)))
        }
    };
    let garbage = loss.garbage_l.map(|_| {
        EstimatorParams::mask(Array2::from_elem(
            (frames, bins),
            Complex64::new(cfg.garbage_init, 0.0),
        ))
    });
    let mut state = State { params, garbage };
    let mut report = true_report(utt, &state, loss)?;
    let mut trajectory = vec![report.total];
    let mut refreshes = Vec::new();
    let mut eta = cfg.step_size;
    let mut rejected = 0;
    let mut stop_reason = StopReason::MaxIterations;
    let mut outer_iterations = 0;

    for _ in 0..cfg.max_outer_iters {
        outer_iterations += 1;
        let filters = report.filters.clone();
        let start_loss = report.total;
        let mut inner = State {
            params: state.params.clone(),
            garbage: state.garbage.clone(),
        };
        let mut inner_report = report.clone();
        for _ in 0..cfg.mask_steps_per_outer {
            let (gs, gv) =
                source_gradients(&utt.mixture_spec, utt.reference_mic, &inner_report, loss)?;
            let gp = to_param_gradient(&inner.params, &y_q, gs);
            let Some(d) = preconditioned(&gp, cfg.kind, &y_q) else {
                break;
            };
            let dv = match (&inner.garbage, gv) {
                (Some(g), Some(gv)) => preconditioned(
                    &to_param_gradient(g, &y_q, gv),
                    EstimatorKind::Masking,
                    &y_q,
                ),
                _ => None,
            };
            let mut accepted = None;
            let mut trial_eta = eta;
            for _ in 0..=10 {
                let cand = inner.step(&d, dv.as_ref(), trial_eta);
                let r =
                    fixed_filter_report(utt, &cand.params, cand.garbage.as_ref(), &filters, loss)?;
                if r.total < inner_report.total {
                    accepted = Some((cand, r));
                    break;
                }
                trial_eta *= 0.5;
            }
            match accepted {
                Some((cand, r)) => {
                    inner = cand;
                    inner_report = r;
                    eta = if trial_eta == eta {
                        eta * 1.5
                    } else {
                        trial_eta
                    };
                }
                None => {
                    eta = trial_eta;
                    break;
                }
            }
        }
        eta *= cfg.step_decay;
        let before = inner_report.total;
        let mut candidate = inner;
        let mut accepted = None;
        if before < start_loss {
            for _ in 0..6 {
                let r = true_report(utt, &candidate, loss)?;
                if r.total <= start_loss {
                    accepted = Some(r);
                    break;
                }
                candidate = state.toward(&candidate, 0.5);
            }
        }
        match accepted {
            Some(r) => {
                rejected = 0;
                refreshes.push(RefreshRecord {
                    before,
                    after: r.total,
                });
                let rel = (start_loss - r.total) / start_loss.abs().max(f64::MIN_POSITIVE);
                trajectory.push(r.total);
                state = candidate;
                report = r;
                if rel < cfg.convergence_tol {
                    stop_reason = StopReason::Converged;
                    break;
                }
            }
            None => {
                rejected += 1;
                eta *= 0.25;
                if rejected >= 3 {
                    stop_reason = StopReason::Diverged;
                    break;
                }
            }
        }
    }

    let s_hat = forward(&state.params, &y_q)?;
    let v_hat = state
        .garbage
        .as_ref()
        .map(|g| forward(g, &y_q))
        .transpose()?;
    let waveform = istft(&s_hat, &utt.stft, utt.len())?.with_sample_rate(utt.sample_rate());
    Ok(DereverbResult {
        s_hat,
        v_hat,
        params: state.params,
        waveform,
        trajectory,
        refreshes,
        filters: report.filters.clone(),
        final_report: report,
        kind: cfg.kind,
        ref_variant: loss.ref_variant,
        outer_iterations,
        stop_reason,
        diverged: stop_reason == StopReason::Diverged,
    })
}

/// The estimate Ŝ_q as a waveform of the input length.
pub fn infer_direct(result: &DereverbResult) -> Waveform {
    result.waveform.clone()
}

/// `Y_q - ĝ_q^H S̃_q` resynthesized, using the converged reference filter.
pub fn infer_subtractive(utt: &MultichannelUtterance, result: &DereverbResult) -> Result<Waveform> {
    let predicted = predicted_reverberation(&result.s_hat, &result.filters.reference)?;
    let y_q = utt.reference_spec();
    y_q.ensure_same_shape(&predicted, "subtractive inference")?;
    let est = ComplexSpectrogram::new(y_q.data() - predicted.data(), *y_q.config())?;
    Ok(istft(&est, &utt.stft, utt.len())?.with_sample_rate(utt.sample_rate()))
}

/// `ĝ_q^H S̃_q`, the late reverberation predicted from the estimate's delayed past.
pub fn predicted_reverberation(
    s_hat: &ComplexSpectrogram,
    reference: &FilterBank,
) -> Result<ComplexSpectrogram> {
    if reference.bin_count() != s_hat.bin_count() {
        return Err(Error::Missing(
            "result carries no reference filter for this estimate".into(),
        ));
    }
    apply_filter(reference, &build_stack(s_hat, *reference.spec())?)
}
