use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use dereverb_core::audio_io::{load_manifest, read_wav_mono, resolve};
use dereverb_core::metrics::{evaluate_corpus, EvalReport, SystemOutputs};
use serde::Serialize;

use crate::{write_json, write_text, CliError, CliResult};

/// Name of the unprocessed reference-mic baseline row.
pub const MIXTURE_SYSTEM: &str = "mixture";

#[derive(Serialize)]
struct SystemSource {
    name: String,
    dir: PathBuf,
}

#[derive(Serialize)]
struct Summary<'a> {
    manifest: &'a Path,
    systems: &'a [SystemSource],
    report: &'a EvalReport,
}

fn parse_dir(arg: &str) -> CliResult<SystemSource> {
    let (name, dir) = match arg.split_once('=') {
        Some((n, d)) => (n.to_string(), PathBuf::from(d)),
        None => {
            let dir = PathBuf::from(arg);
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| {
                    CliError::Usage(format!("cannot name system for {arg}; use name=dir"))
                })?;
            (name, dir)
        }
    };
    if name.is_empty() || name == MIXTURE_SYSTEM {
        return Err(CliError::Usage(format!("invalid system name {name:?}")));
    }
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "enhanced dir {} does not exist",
            dir.display()
        )));
    }
    Ok(SystemSource { name, dir })
}

fn final_loss(sidecar: &Path) -> Option<f64> {
    let text = fs::read_to_string(sidecar).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    value.get("final_loss")?.as_f64()
}

pub fn run(manifest_path: &Path, dirs: &[String], out: &Path) -> CliResult<()> {
    let manifest = load_manifest(manifest_path)?;
    if manifest.entries.is_empty() {
        return Err(CliError::Usage(
            "manifest has no entries to evaluate".into(),
        ));
    }
    let sources = dirs
        .iter()
        .map(|d| parse_dir(d))
        .collect::<CliResult<Vec<_>>>()?;
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = sources.iter().find(|s| !seen.insert(&s.name)) {
        return Err(CliError::Usage(format!(
            "system name {} given twice",
            dup.name
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut references = Vec::new();
    let mut mixture = HashMap::new();
    for e in &manifest.entries {
        let direct = e.direct_paths.first().ok_or_else(|| {
            CliError::Usage(format!("entry {} has no direct-path reference", e.utt_id))
        })?;
        references.push((e.utt_id.clone(), read_wav_mono(resolve(base, direct))?));
        mixture.insert(
            e.utt_id.clone(),
            read_wav_mono(resolve(base, &e.mixture_paths[0]))?,
        );
    }
    let mut systems = vec![SystemOutputs::new(MIXTURE_SYSTEM, mixture)];
    for src in &sources {
        let mut outputs = HashMap::new();
        let mut losses = HashMap::new();
        for e in &manifest.entries {
            let wav = src.dir.join(format!("{}.wav", e.utt_id));
            if wav.is_file() {
                outputs.insert(e.utt_id.clone(), read_wav_mono(&wav)?);
            }
            if let Some(l) = final_loss(&src.dir.join(format!("{}.json", e.utt_id))) {
                losses.insert(e.utt_id.clone(), l);
            }
        }
        let mut sys = SystemOutputs::new(src.name.clone(), outputs);
        sys.mc_loss = losses;
        systems.push(sys);
    }

    let report = evaluate_corpus(&references, &systems)?;
    write_text(out, &report.to_csv())?;
    write_json(
        &out.with_extension("json"),
        &Summary {
            manifest: manifest_path,
            systems: &sources,
            report: &report,
        },
    )?;
    for (name, mean) in &report.mean_si_sdr_db {
        eprintln!("{name:>12}: mean SI-SDR {mean:.2} dB");
    }
    if !report.is_complete() {
        let list: Vec<String> = report
            .missing
            .iter()
            .map(|m| format!("{}/{}", m.system, m.utt_id))
            .collect();
        return Err(CliError::Runtime(format!(
            "missing outputs: {}",
            list.join(", ")
        )));
    }
    Ok(())
}
