//! Scale-invariant SDR and corpus-level evaluation.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectral::Waveform;

/// Residual-to-reference energy ratio below which SI-SDR is reported as `+∞`.
pub const PERFECT_RESIDUAL: f64 = 1e-30;

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_slices(estimate.samples(), reference.samples())
}

pub fn si_sdr_slices(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|x| x * x).sum();
    if !(ref_energy > 0.0) {
        return Err(Error::Domain("SI-SDR reference has zero energy".into()));
    }
    let alpha = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| e * r)
        .sum::<f64>()
        / ref_energy;
    let target: f64 = alpha * alpha * ref_energy;
    let residual: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    if residual < PERFECT_RESIDUAL * ref_energy {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / residual).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub utt_id: String,
    pub system: String,
    pub si_sdr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissingOutput {
    pub utt_id: String,
    pub system: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Arithmetic mean per system over the utterances it produced.
    pub mean_si_sdr_db: BTreeMap<String, f64>,
    /// Converged mixture-constraint loss per `(system, utterance)`, when known.
    pub mc_loss: BTreeMap<String, BTreeMap<String, f64>>,
    pub missing: Vec<MissingOutput>,
}

impl EvalReport {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("utt_id,system,si_sdr_db\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.utt_id, r.system, r.si_sdr_db));
        }
        out
    }
}

/// One system's outputs keyed by utterance id.
pub struct SystemOutputs {
    pub name: String,
    pub outputs: HashMap<String, Waveform>,
    pub mc_loss: HashMap<String, f64>,
}

impl SystemOutputs {
    pub fn new(name: impl Into<String>, outputs: HashMap<String, Waveform>) -> Self {
        Self {
            name: name.into(),
            outputs,
            mc_loss: HashMap::new(),
        }
    }
}

/// SI-SDR of every system output against the reference direct-path signals.
/// A `"mixture"` system can be supplied by the caller as a baseline row.
/// Outputs longer or shorter than the reference are trimmed or zero-padded.
pub fn evaluate_corpus(
    references: &[(String, Waveform)],
    systems: &[SystemOutputs],
) -> Result<EvalReport> {
    if references.is_empty() {
        return Err(Error::Domain(
            "nothing to evaluate: the manifest is empty".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut mc_loss: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (utt_id, reference) in references {
        for sys in systems {
            let Some(est) = sys.outputs.get(utt_id) else {
                missing.push(MissingOutput {
                    utt_id: utt_id.clone(),
                    system: sys.name.clone(),
                });
                continue;
            };
            let value = si_sdr(&est.fit_to(reference.len()), reference)?;
            let entry = sums.entry(sys.name.clone()).or_insert((0.0, 0));
            entry.0 += value;
            entry.1 += 1;
            if let Some(l) = sys.mc_loss.get(utt_id) {
                mc_loss
                    .entry(sys.name.clone())
                    .or_default()
                    .insert(utt_id.clone(), *l);
            }
            rows.push(EvalRow {
                utt_id: utt_id.clone(),
                system: sys.name.clone(),
                si_sdr_db: value,
            });
        }
    }
    let mean_si_sdr_db = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect();
    Ok(EvalReport {
        rows,
        mean_si_sdr_db,
        mc_loss,
        missing,
    })
}
