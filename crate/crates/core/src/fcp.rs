//! Closed-form forward convolutive prediction (FCP) filters.
//!
//! Every filter in the toolkit is the solution of one per-frequency weighted
//! least-squares problem
//!
//! ```text
//! c(f) = argmin_c  Σ_t |target(t,f) - c^H x(t,f)|² / λ(t,f)
//! ```
//!
//! where `x(t,f)` is a tap vector taken from a [`StackedTensor`]. The normal
//! equations `(Σ x x^H / λ) c = Σ x target* / λ` are solved by Cholesky after
//! adding a ridge of `1e-6 · trace / taps` to the Gram diagonal.

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::spectral::ComplexSpectrogram;
use crate::stacking::{build_stack, StackSpec, StackedTensor, WeightMap};

/// Relative ridge added to every Gram diagonal.
pub const RIDGE: f64 = 1e-6;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    /// Frequencies whose stack carried no energy; their filter is zero.
    pub degenerate_bins: usize,
    /// Largest condition estimate over the solved frequencies.
    pub max_condition: f64,
}

impl SolveDiagnostics {
    pub fn is_degenerate(&self) -> bool {
        self.degenerate_bins > 0
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            degenerate_bins: self.degenerate_bins + other.degenerate_bins,
            max_condition: self.max_condition.max(other.max_condition),
        }
    }
}

/// One filter vector per frequency, applied as `c(f)^H x(t,f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    coeffs: Array2<Complex64>,
    spec: StackSpec,
    target_mic: usize,
    diagnostics: SolveDiagnostics,
}

impl FilterBank {
    pub fn new(coeffs: Array2<Complex64>, spec: StackSpec) -> Result<Self> {
        if coeffs.ncols() != spec.taps() {
            return Err(Error::Shape(format!(
                "filter has {} taps, stack spec expects {}",
                coeffs.ncols(),
                spec.taps()
            )));
        }
        if coeffs
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(Error::Domain("filter coefficients must be finite".into()));
        }
        Ok(Self {
            coeffs,
            spec,
            target_mic: 0,
            diagnostics: SolveDiagnostics::default(),
        })
    }

    pub fn zeros(bins: usize, spec: StackSpec) -> Self {
        Self {
            coeffs: Array2::zeros((bins, spec.taps())),
            spec,
            target_mic: 0,
            diagnostics: SolveDiagnostics::default(),
        }
    }

    pub fn with_target_mic(mut self, mic: usize) -> Self {
        self.target_mic = mic;
        self
    }

    /// F×taps coefficients.
    pub fn coeffs(&self) -> &Array2<Complex64> {
        &self.coeffs
    }

    pub fn spec(&self) -> &StackSpec {
        &self.spec
    }

    pub fn target_mic(&self) -> usize {
        self.target_mic
    }

    pub fn diagnostics(&self) -> &SolveDiagnostics {
        &self.diagnostics
    }

    pub fn is_degenerate(&self) -> bool {
        self.diagnostics.is_degenerate()
    }

    pub fn bin_count(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|z| z.norm() == 0.0)
    }
}

/// Frequency-major copy of a spectrogram: `out[f][t]`.
pub(crate) fn by_bin(spec: &ComplexSpectrogram) -> Vec<Vec<Complex64>> {
    let data = spec.data();
    (0..spec.bin_count())
        .map(|f| data.column(f).to_vec())
        .collect()
}

pub(crate) fn weights_by_bin(weights: &WeightMap) -> Vec<Vec<f64>> {
    let v = weights.values();
    (0..v.ncols()).map(|f| v.column(f).to_vec()).collect()
}

#[inline]
pub(crate) fn lagged(series: &[Complex64], t: usize, lag: isize) -> Complex64 {
    let src = t as isize - lag;
    if src < 0 || src as usize >= series.len() {
        ZERO
    } else {
        series[src as usize]
    }
}

/// Per-frequency factored Gram matrix of one stack under one weighting.
pub(crate) struct BinSystem {
    chol: Option<Cholesky>,
    condition: f64,
}

impl BinSystem {
    pub(crate) fn is_degenerate(&self) -> bool {
        self.chol.is_none()
    }

    pub(crate) fn condition(&self) -> f64 {
        self.condition
    }
}

/// Fills `x` with the regressors at frame `t`: every lag of every source, source-major.
#[inline]
fn regressors(sources: &[&[Complex64]], t: usize, lags: &[isize], x: &mut [Complex64]) -> bool {
    let taps = lags.len();
    let mut any = false;
    for (s, src) in sources.iter().enumerate() {
        for (k, &lag) in lags.iter().enumerate() {
            let v = lagged(src, t, lag);
            x[s * taps + k] = v;
            any |= v != ZERO;
        }
    }
    any
}

/// Accumulates `Σ_t x x^H / λ` (plus ridge) over the joint regressors of
/// `sources` and factors it.
pub(crate) fn factor_bin(sources: &[&[Complex64]], weights: &[f64], lags: &[isize]) -> BinSystem {
    let n = lags.len() * sources.len();
    let frames = sources.first().map_or(0, |s| s.len());
    let mut gram = vec![ZERO; n * n];
    let mut x = vec![ZERO; n];
    for t in 0..frames {
        if !regressors(sources, t, lags, &mut x) {
            continue;
        }
        let inv = 1.0 / weights[t];
        for i in 0..n {
            let xi = x[i] * inv;
            if xi == ZERO {
                continue;
            }
            let row = &mut gram[i * n..i * n + i + 1];
            for (j, g) in row.iter_mut().enumerate() {
                *g += xi * x[j].conj();
            }
        }
    }
    let trace: f64 = (0..n).map(|i| gram[i * n + i].re).sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return BinSystem {
            chol: None,
            condition: 0.0,
        };
    }
    let ridge = RIDGE * trace / n as f64;
    for i in 0..n {
        gram[i * n + i] += ridge;
    }
    match Cholesky::factor(&gram, n) {
        Some(chol) => {
            let condition = chol.condition_estimate();
            BinSystem {
                chol: Some(chol),
                condition,
            }
        }
        None => BinSystem {
            chol: None,
            condition: f64::INFINITY,
        },
    }
}

/// Right-hand side `Σ_t x target* / λ` solved against a factored Gram.
pub(crate) fn solve_bin(
    system: &BinSystem,
    sources: &[&[Complex64]],
    target: &[Complex64],
    weights: &[f64],
    lags: &[isize],
) -> Vec<Complex64> {
    let n = lags.len() * sources.len();
    let mut rhs = vec![ZERO; n];
    let Some(chol) = &system.chol else {
        return rhs;
    };
    let mut x = vec![ZERO; n];
    for (t, y) in target.iter().enumerate() {
        if *y == ZERO {
            continue;
        }
        if !regressors(sources, t, lags, &mut x) {
            continue;
        }
        let yc = y.conj() / weights[t];
        for (r, v) in rhs.iter_mut().zip(&x) {
            *r += v * yc;
        }
    }
    chol.solve_in_place(&mut rhs);
    rhs
}

/// Solves several regressions that share one stack and one weighting, factoring each Gram once.
pub fn solve_wls_multi(
    targets: &[&ComplexSpectrogram],
    stack: &StackedTensor,
    weights: &WeightMap,
) -> Result<Vec<FilterBank>> {
    let (frames, bins) = stack.source().shape();
    for target in targets {
        if target.shape() != (frames, bins) {
            return Err(Error::Shape(format!(
                "target {:?} vs stack {:?}",
                target.shape(),
                (frames, bins)
            )));
        }
    }
    if weights.shape() != (frames, bins) {
        return Err(Error::Shape(format!(
            "weights {:?} vs stack {:?}",
            weights.shape(),
            (frames, bins)
        )));
    }
    let lags = stack.spec().lags();
    let taps = lags.len();
    let source = by_bin(stack.source());
    let target_bins: Vec<Vec<Vec<Complex64>>> = targets.iter().map(|t| by_bin(t)).collect();
    let weight_bins = weights_by_bin(weights);

    let per_bin: Vec<(Vec<Vec<Complex64>>, bool, f64)> = (0..bins)
        .into_par_iter()
        .map(|f| {
            let src = [source[f].as_slice()];
            let system = factor_bin(&src, &weight_bins[f], &lags);
            let sols = target_bins
                .iter()
                .map(|tb| solve_bin(&system, &src, &tb[f], &weight_bins[f], &lags))
                .collect();
            (sols, system.chol.is_none(), system.condition)
        })
        .collect();

    let mut diag = SolveDiagnostics::default();
    for (_, degenerate, cond) in &per_bin {
        if *degenerate {
            diag.degenerate_bins += 1;
        } else {
            diag.max_condition = diag.max_condition.max(*cond);
        }
    }
    let banks = (0..targets.len())
        .map(|i| {
            let mut coeffs = Array2::<Complex64>::zeros((bins, taps));
            for (f, (sols, _, _)) in per_bin.iter().enumerate() {
                for (k, c) in sols[i].iter().enumerate() {
                    coeffs[[f, k]] = *c;
                }
            }
            FilterBank {
                coeffs,
                spec: *stack.spec(),
                target_mic: 0,
                diagnostics: diag,
            }
        })
        .collect();
    Ok(banks)
}

pub fn solve_wls(
    target: &ComplexSpectrogram,
    stack: &StackedTensor,
    weights: &WeightMap,
) -> Result<FilterBank> {
    Ok(solve_wls_multi(&[target], stack, weights)?.remove(0))
}

fn expect_kind(spec: &StackSpec, want: &str) -> Result<()> {
    let ok = matches!(
        (spec, want),
        (StackSpec::PastDelayed { .. }, "past_delayed")
            | (StackSpec::Context { .. }, "context")
            | (StackSpec::Garbage { .. }, "garbage")
    );
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "expected a {want} stack, got {spec:?}"
        )))
    }
}

fn subtract(a: &ComplexSpectrogram, b: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    a.ensure_same_shape(b, "subtract")?;
    Ok(ComplexSpectrogram::from_parts(
        a.data() - b.data(),
        *a.config(),
    ))
}

/// Reference-mic filter regressing the residual `Y_q - Ŝ_q` onto Ŝ_q's delayed past.
pub fn fcp_ref_subtracted(
    y_q: &ComplexSpectrogram,
    s_hat: &ComplexSpectrogram,
    spec: StackSpec,
    weights: &WeightMap,
) -> Result<FilterBank> {
    expect_kind(&spec, "past_delayed")?;
    let target = subtract(y_q, s_hat)?;
    solve_wls(&target, &build_stack(s_hat, spec)?, weights)
}

/// Reference-mic filter regressing the full mixture `Y_q` onto Ŝ_q's delayed past.
pub fn fcp_ref_full(
    y_q: &ComplexSpectrogram,
    s_hat: &ComplexSpectrogram,
    spec: StackSpec,
    weights: &WeightMap,
) -> Result<FilterBank> {
    expect_kind(&spec, "past_delayed")?;
    y_q.ensure_same_shape(s_hat, "fcp_ref_full")?;
    solve_wls(y_q, &build_stack(s_hat, spec)?, weights)
}

/// Non-reference filter mapping Ŝ_q's context window onto `Y_p`.
pub fn fcp_nonref(
    y_p: &ComplexSpectrogram,
    s_hat: &ComplexSpectrogram,
    spec: StackSpec,
    weights: &WeightMap,
) -> Result<FilterBank> {
    expect_kind(&spec, "context")?;
    y_p.ensure_same_shape(s_hat, "fcp_nonref")?;
    solve_wls(y_p, &build_stack(s_hat, spec)?, weights)
}

/// Garbage-source filter; the target is the full mixture `Y_a`, not a residual.
pub fn fcp_garbage(
    y_a: &ComplexSpectrogram,
    v_hat: &ComplexSpectrogram,
    spec: StackSpec,
    weights: &WeightMap,
) -> Result<FilterBank> {
    expect_kind(&spec, "garbage")?;
    y_a.ensure_same_shape(v_hat, "fcp_garbage")?;
    solve_wls(y_a, &build_stack(v_hat, spec)?, weights)
}

/// `c(f)^H x(t,f)` for every T-F unit.
pub fn apply_filter(bank: &FilterBank, stack: &StackedTensor) -> Result<ComplexSpectrogram> {
    if bank.spec() != stack.spec() || bank.bin_count() != stack.bin_count() {
        return Err(Error::Shape(format!(
            "filter ({:?}, {} bins) does not match stack ({:?}, {} bins)",
            bank.spec(),
            bank.bin_count(),
            stack.spec(),
            stack.bin_count()
        )));
    }
    let (frames, bins) = stack.source().shape();
    let source = by_bin(stack.source());
    let lags = stack.spec().lags();
    let cols: Vec<Vec<Complex64>> = (0..bins)
        .into_par_iter()
        .map(|f| filter_bin(&source[f], bank.coeffs().row(f).as_slice().unwrap(), &lags))
        .collect();
    let mut out = Array2::<Complex64>::zeros((frames, bins));
    for (f, col) in cols.iter().enumerate() {
        for (t, z) in col.iter().enumerate() {
            out[[t, f]] = *z;
        }
    }
    Ok(ComplexSpectrogram::from_parts(
        out,
        *stack.source().config(),
    ))
}

/// `out[t] = Σ_k conj(c_k) · source[t - lag_k]`.
pub(crate) fn filter_bin(
    source: &[Complex64],
    coeffs: &[Complex64],
    lags: &[isize],
) -> Vec<Complex64> {
    let frames = source.len();
    let mut out = vec![ZERO; frames];
    for (c, &lag) in coeffs.iter().zip(lags) {
        let c = c.conj();
        if c == ZERO {
            continue;
        }
        let (t0, s0) = if lag >= 0 {
            (lag as usize, 0)
        } else {
            (0, (-lag) as usize)
        };
        if t0 >= frames || s0 >= frames {
            continue;
        }
        let n = frames - t0.max(s0);
        for i in 0..n {
            out[t0 + i] += c * source[s0 + i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::StftConfig;
    use crate::stacking::lambda_weight;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> StftConfig {
        StftConfig {
            window_len: 8,
            hop_len: 4,
            dft_size: 8,
            ..Default::default()
        }
    }

    fn random_spec(frames: usize, rng: &mut ChaCha8Rng) -> ComplexSpectrogram {
        let c = cfg();
        let data = Array2::from_shape_fn((frames, c.bin_count()), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        ComplexSpectrogram::new(data, c).unwrap()
    }

    #[test]
    fn proportional_target_gives_real_positive_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_spec(12, &mut rng);
        let stack = build_stack(&s, StackSpec::context(1, 0).unwrap()).unwrap();
        let target = s.scaled(Complex64::new(2.0, 0.0));
        let w = lambda_weight(&[target.clone()], 1e-4).unwrap();
        let bank = solve_wls(&target, &stack, &w).unwrap();
        for z in bank.coeffs().iter() {
            assert!((z - Complex64::new(2.0, 0.0)).norm() < 1e-5, "{z}");
        }
    }

    #[test]
    fn uniform_weight_scaling_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_spec(16, &mut rng);
        let y = random_spec(16, &mut rng);
        let stack = build_stack(&s, StackSpec::context(3, 1).unwrap()).unwrap();
        let w = lambda_weight(&[y.clone()], 1e-4).unwrap();
        let a = solve_wls(&y, &stack, &w).unwrap();
        let b = solve_wls(&y, &stack, &w.scaled(2.0)).unwrap();
        for (x, z) in a.coeffs().iter().zip(b.coeffs().iter()) {
            assert!((x - z).norm() <= 1e-12 * (1.0 + x.norm()));
        }
    }

    #[test]
    fn subtracted_with_perfect_estimate_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = random_spec(10, &mut rng);
        let w = lambda_weight(&[y.clone()], 1e-4).unwrap();
        let bank = fcp_ref_subtracted(&y, &y, StackSpec::past_delayed(4, 1).unwrap(), &w).unwrap();
        assert!(bank.is_zero());
        assert!(!bank.is_degenerate());
    }

    #[test]
    fn zero_estimate_is_degenerate_zero_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random_spec(10, &mut rng);
        let zero = ComplexSpectrogram::zeros(10, cfg());
        let w = lambda_weight(&[y.clone()], 1e-4).unwrap();
        let banks = [
            fcp_ref_subtracted(&y, &zero, StackSpec::past_delayed(4, 1).unwrap(), &w).unwrap(),
            fcp_ref_full(&y, &zero, StackSpec::past_delayed(4, 1).unwrap(), &w).unwrap(),
            fcp_garbage(&y, &zero, StackSpec::garbage(1), &w).unwrap(),
        ];
        for b in banks {
            assert!(b.is_zero());
            assert_eq!(b.diagnostics().degenerate_bins, cfg().bin_count());
        }
    }

    #[test]
    fn nonref_identity_and_delay() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_spec(14, &mut rng);
        let w = lambda_weight(&[s.clone()], 1e-4).unwrap();
        let unit = fcp_nonref(&s, &s, StackSpec::context(1, 0).unwrap(), &w).unwrap();
        assert!(unit.coeffs().iter().all(|z| (z - 1.0).norm() < 1e-5));

        let g = fcp_garbage(&s, &s, StackSpec::garbage(0), &w).unwrap();
        assert!(g.coeffs().iter().all(|z| (z - 1.0).norm() < 1e-5));

        // Y_p(t) = Ŝ(t-1): taps are (t-2, t-1, t) for I=3, so tap 1 carries it.
        let mut delayed = Array2::zeros(s.shape());
        for t in 1..14 {
            delayed.row_mut(t).assign(&s.data().row(t - 1));
        }
        let y = ComplexSpectrogram::new(delayed, cfg()).unwrap();
        let bank = fcp_nonref(&y, &s, StackSpec::context(3, 0).unwrap(), &w).unwrap();
        for f in 0..bank.bin_count() {
            let row = bank.coeffs().row(f);
            assert!((row[1] - 1.0).norm() < 1e-5, "{row}");
            assert!(row[0].norm() < 1e-5 && row[2].norm() < 1e-5, "{row}");
        }
    }

    #[test]
    fn apply_filter_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_spec(9, &mut rng);
        let spec = StackSpec::context(1, 0).unwrap();
        let stack = build_stack(&s, spec).unwrap();
        let zero = FilterBank::zeros(s.bin_count(), spec);
        assert!(apply_filter(&zero, &stack)
            .unwrap()
            .data()
            .iter()
            .all(|z| z.norm() == 0.0));
        let unit = FilterBank::new(
            Array2::from_elem((s.bin_count(), 1), Complex64::new(1.0, 0.0)),
            spec,
        )
        .unwrap();
        assert_eq!(apply_filter(&unit, &stack).unwrap(), s);
        let other = build_stack(&s, StackSpec::context(2, 0).unwrap()).unwrap();
        assert!(apply_filter(&unit, &other).is_err());
    }

    #[test]
    fn residual_is_orthogonal_to_stack() {
        // Normal-equation optimality: Σ_t x r* / λ vanishes up to the ridge term δ·c.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_spec(16, &mut rng);
        let y = random_spec(16, &mut rng);
        let w = lambda_weight(&[y.clone(), s.clone()], 1e-4).unwrap();
        let stack = build_stack(&s, StackSpec::past_delayed(4, 1).unwrap()).unwrap();
        let bank = solve_wls(&y, &stack, &w).unwrap();
        let pred = apply_filter(&bank, &stack).unwrap();
        for f in 0..y.bin_count() {
            let mut trace = 0.0;
            for k in 0..stack.taps() {
                for t in 0..16 {
                    trace += stack.get(t, f, k).norm_sqr() / w.values()[[t, f]];
                }
            }
            let c_norm: f64 = bank
                .coeffs()
                .row(f)
                .iter()
                .map(|z| z.norm_sqr())
                .sum::<f64>()
                .sqrt();
            let bound = RIDGE * trace / stack.taps() as f64 * c_norm;
            for k in 0..stack.taps() {
                let mut acc = Complex64::new(0.0, 0.0);
                for t in 0..16 {
                    let r = y.data()[[t, f]] - pred.data()[[t, f]];
                    acc += stack.get(t, f, k) * r.conj() / w.values()[[t, f]];
                }
                assert!(acc.norm() <= bound * (1.0 + 1e-6) + 1e-12, "f={f} k={k}");
            }
        }
    }

    #[test]
    fn kind_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = random_spec(6, &mut rng);
        let w = WeightMap::uniform(6, y.bin_count());
        assert!(matches!(
            fcp_nonref(&y, &y, StackSpec::garbage(1), &w),
            Err(Error::Config(_))
        ));
    }
}
