use std::fs;
use std::path::PathBuf;

use dereverb_core::audio_io::{read_wav_mono, save_manifest, Manifest, MANIFEST_SCHEMA};
use dereverb_core::roomsim::simulate_utterance;
use dereverb_core::source::speech_like;
use dereverb_core::spectral::Waveform;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::{corpus, write_json, CliError, CliResult};

pub struct Args {
    pub config: Option<PathBuf>,
    pub dry_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub count: usize,
    pub seed: Option<u64>,
    pub t60: Option<f64>,
}

#[derive(Serialize)]
struct Echo<'a> {
    command: &'static str,
    count: usize,
    dry_dir: Option<&'a PathBuf>,
    dry_files: &'a [PathBuf],
    config: &'a RunConfig,
}

fn dry_files(dir: &PathBuf) -> CliResult<Vec<PathBuf>> {
    let listing = fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read dry dir {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!(
            "dry dir {} contains no WAV files",
            dir.display()
        )));
    }
    Ok(files)
}

pub fn run(args: Args) -> CliResult<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.sampler.seed = seed;
    }
    if let Some(t60) = args.t60 {
        cfg.sampler.t60_range = [t60, t60];
    }
    cfg.sampler.validate()?;
    cfg.stft.validate()?;
    if args.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    if args.dry_dir.is_none() && !(cfg.utterance_secs > 0.0) {
        return Err(CliError::Usage("utterance_secs must be positive".into()));
    }
    let files = match &args.dry_dir {
        Some(dir) => dry_files(dir)?,
        None => Vec::new(),
    };

    let seed = cfg.sampler.seed;
    let fs_hz = cfg.sampler.sample_rate;
    let entries = (0..args.count)
        .into_par_iter()
        .map(|i| {
            let index = i as u64;
            let dry: Waveform = if files.is_empty() {
                speech_like(
                    seed,
                    index,
                    (cfg.utterance_secs * fs_hz as f64).round() as usize,
                    fs_hz,
                )
            } else {
                read_wav_mono(&files[i % files.len()])?
            };
            let sampled = cfg.sampler.sample(index)?;
            let utt =
                simulate_utterance(format!("utt{i:04}"), &sampled, &dry, seed, index, cfg.stft)?;
            let mut entry = corpus::save_utterance(&args.out_dir, &utt, seed, cfg.bit_depth)?;
            if let Some(path) = files.get(i % files.len().max(1)) {
                entry
                    .extra
                    .insert("dry_source".into(), Value::from(path.display().to_string()));
            }
            Ok(entry)
        })
        .collect::<dereverb_core::Result<Vec<_>>>()?;

    let mut extra = Map::new();
    extra.insert("generator".into(), Value::from("dereverb simulate"));
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA,
        entries,
        extra,
    };
    save_manifest(args.out_dir.join("manifest.json"), &manifest)?;
    write_json(
        &args.out_dir.join("simulate_config.json"),
        &Echo {
            command: "simulate",
            count: args.count,
            dry_dir: args.dry_dir.as_ref(),
            dry_files: &files,
            config: &cfg,
        },
    )?;
    eprintln!(
        "wrote {} utterances to {}",
        args.count,
        args.out_dir.display()
    );
    Ok(())
}
