use std::path::{Path, PathBuf};

use dereverb_core::audio_io::load_manifest;
use dereverb_core::mcloss::{loss_curve, loss_curve_csv, tau_grid, LossConfig, LossCurvePoint};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{corpus, write_json, write_text, CliError, CliResult};

pub struct Args {
    pub manifest: PathBuf,
    pub utt_id: String,
    pub tau_step: usize,
    pub max_tau: Option<usize>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub sparkline: bool,
}

#[derive(Serialize)]
struct Echo<'a> {
    manifest: &'a Path,
    utt_id: &'a str,
    tau_step: usize,
    max_tau: usize,
    mics: usize,
    loss: &'a LossConfig,
}

const BARS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];

pub fn sparkline(values: &[f64]) -> String {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| {
            let x = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            BARS[((x * 7.0).round() as usize).min(7)]
        })
        .collect()
}

pub fn run(args: Args) -> CliResult<()> {
    if args.tau_step == 0 {
        return Err(CliError::Usage("--tau-step must be at least 1".into()));
    }
    let cfg = RunConfig::load(args.config.as_deref())?;
    let manifest = load_manifest(&args.manifest)?;
    let entry = manifest
        .entry(&args.utt_id)
        .ok_or_else(|| CliError::Usage(format!("unknown utterance id {}", args.utt_id)))?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let utt = corpus::load_utterance(base, entry, cfg.stft)?;
    let rir_len = utt
        .rirs
        .as_ref()
        .map(|r| r.full[utt.reference_mic].len())
        .ok_or_else(|| {
            CliError::Usage(format!(
                "utterance {} has no ground-truth RIRs",
                args.utt_id
            ))
        })?;
    let max_tau = args.max_tau.unwrap_or(rir_len).clamp(1, rir_len);
    let loss = cfg.loss_for(utt.mic_count());
    loss.validate()?;

    let grid = tau_grid(args.tau_step, max_tau);
    let chunk = grid
        .len()
        .div_ceil(rayon::current_num_threads().max(1))
        .max(1);
    let points: Vec<LossCurvePoint> = grid
        .par_chunks(chunk)
        .map(|taus| loss_curve(&utt, taus, &loss))
        .collect::<dereverb_core::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    write_text(&args.out, &loss_curve_csv(&points))?;
    write_json(
        &args.out.with_extension("json"),
        &Echo {
            manifest: &args.manifest,
            utt_id: &args.utt_id,
            tau_step: args.tau_step,
            max_tau,
            mics: utt.mic_count(),
            loss: &loss,
        },
    )?;
    if args.sparkline {
        let totals: Vec<f64> = points.iter().map(|p| p.loss_total).collect();
        println!("{}", sparkline(&totals));
    }
    Ok(())
}
