use std::path::{Path, PathBuf};

use dereverb_core::audio_io::{load_manifest, write_wav, BitDepth, ManifestEntry};
use dereverb_core::fcp::SolveDiagnostics;
use dereverb_core::mcloss::RefVariant;
use dereverb_core::spectral::{istft, Waveform};
use dereverb_core::usd::{self, OptimConfig, RefreshRecord, StopReason};
use dereverb_core::wpe::{wpe_run, WpeConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{mic_subset, RunConfig};
use crate::{corpus, write_json, CliError, CliResult, Inference, System};

pub const SINGLE_MIC_SUBTRACTED_RATIONALE: &str = "\
the subtracted reference variant cannot be used with a single microphone: \
with only the reference mixture the loss reduces to its reference term, which the \
estimate Y_q itself drives to zero (the filter target Y_q - S_q vanishes), so the \
optimizer would settle on the unprocessed mixture. Use ref_variant \"full\" for \
single-channel runs, or add microphones";

pub struct Args {
    pub manifest: PathBuf,
    pub system: System,
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub mics: Option<usize>,
    pub inference: Inference,
    pub seed: Option<u64>,
}

/// Settings actually used for this run, echoed into every sidecar.
#[derive(Debug, Clone, Serialize)]
struct Resolved {
    system: System,
    mics: usize,
    mic_subset: Vec<usize>,
    inference: Inference,
    stft: dereverb_core::spectral::StftConfig,
    bit_depth: BitDepth,
    #[serde(skip_serializing_if = "Option::is_none")]
    wpe: Option<WpeConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    optim: Option<OptimConfig>,
}

#[derive(Serialize)]
struct UsdSidecar<'a> {
    utt_id: &'a str,
    config: &'a Resolved,
    trajectory: &'a [f64],
    initial_loss: f64,
    final_loss: f64,
    refreshes: &'a [RefreshRecord],
    outer_iterations: usize,
    stop_reason: StopReason,
    diverged: bool,
    filter_diagnostics: SolveDiagnostics,
}

#[derive(Serialize)]
struct WpeSidecar<'a> {
    utt_id: &'a str,
    config: &'a Resolved,
    filter_diagnostics: SolveDiagnostics,
}

fn resolve(cfg: &RunConfig, args: &Args, recorded: usize) -> CliResult<Resolved> {
    let mics = args.mics.unwrap_or(cfg.mics.min(recorded));
    let subset = mic_subset(mics, recorded)?;
    cfg.stft.validate()?;
    let (wpe, optim) = match args.system {
        System::Wpe => {
            let w = cfg.wpe_for(mics);
            w.validate()?;
            (Some(w), None)
        }
        System::Usd => {
            let mut o = cfg.optim_for(mics);
            if let Some(seed) = args.seed {
                o.seed = seed;
            }
            if mics == 1 && o.loss.ref_variant == RefVariant::Subtracted {
                return Err(CliError::Usage(SINGLE_MIC_SUBTRACTED_RATIONALE.into()));
            }
            o.validate()?;
            (None, Some(o))
        }
    };
    Ok(Resolved {
        system: args.system,
        mics,
        mic_subset: subset,
        inference: args.inference,
        stft: cfg.stft,
        bit_depth: cfg.bit_depth,
        wpe,
        optim,
    })
}

fn process(base: &Path, entry: &ManifestEntry, r: &Resolved, out_dir: &Path) -> CliResult<()> {
    let full = corpus::load_utterance(base, entry, r.stft)?;
    let utt = full.select_mics(&r.mic_subset)?;
    let sidecar = out_dir.join(format!("{}.json", entry.utt_id));
    let wave: Waveform = match r.system {
        System::Wpe => {
            let cfg = r.wpe.as_ref().expect("resolved WPE config");
            let out = wpe_run(&utt.mixture_spec, cfg)?;
            let spec = &out.estimates[utt.reference_mic];
            write_json(
                &sidecar,
                &WpeSidecar {
                    utt_id: &entry.utt_id,
                    config: r,
                    filter_diagnostics: *out.filter.diagnostics(),
                },
            )?;
            istft(spec, &utt.stft, utt.len())?.with_sample_rate(utt.sample_rate())
        }
        System::Usd => {
            let cfg = r.optim.as_ref().expect("resolved USD config");
            let result = usd::optimize(&utt, cfg)?;
            write_json(
                &sidecar,
                &UsdSidecar {
                    utt_id: &entry.utt_id,
                    config: r,
                    trajectory: &result.trajectory,
                    initial_loss: result.initial_loss(),
                    final_loss: result.final_loss(),
                    refreshes: &result.refreshes,
                    outer_iterations: result.outer_iterations,
                    stop_reason: result.stop_reason,
                    diverged: result.diverged,
                    filter_diagnostics: result.filters.diagnostics(),
                },
            )?;
            match r.inference {
                Inference::Direct => usd::infer_direct(&result),
                Inference::Subtractive => usd::infer_subtractive(&utt, &result)?,
            }
        }
    };
    write_wav(
        out_dir.join(format!("{}.wav", entry.utt_id)),
        &[wave],
        r.bit_depth,
    )?;
    Ok(())
}

pub fn run(args: Args) -> CliResult<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let manifest = load_manifest(&args.manifest)?;
    let base = args
        .manifest
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let recorded = manifest
        .entries
        .iter()
        .map(ManifestEntry::mic_count)
        .min()
        .ok_or_else(|| CliError::Usage("manifest has no entries".into()))?;
    let resolved = resolve(&cfg, &args, recorded)?;
    if resolved.mics == 1 && args.system == System::Usd {
        eprintln!("single-channel USD: using the full reference variant");
    }
    write_json(&args.out_dir.join("dereverb_config.json"), &resolved)?;
    manifest
        .entries
        .par_iter()
        .map(|e| process(&base, e, &resolved, &args.out_dir))
        .collect::<CliResult<Vec<()>>>()?;
    eprintln!(
        "{} {}-channel: {} utterances written to {}",
        match args.system {
            System::Wpe => "WPE",
            System::Usd => "USD",
        },
        resolved.mics,
        manifest.entries.len(),
        args.out_dir.display()
    );
    Ok(())
}
