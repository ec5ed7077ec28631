use std::path::{Path, PathBuf};

use dereverb_core::audio_io::{read_wav_mono, resolve, write_wav, BitDepth, ManifestEntry};
use dereverb_core::roomsim::{MultichannelUtterance, RirSet};
use dereverb_core::spectral::{StftConfig, Waveform};
use dereverb_core::Result;
use serde_json::{Map, Value};

fn read_all(base: &Path, paths: &[PathBuf]) -> Result<Vec<Waveform>> {
    paths
        .iter()
        .map(|p| read_wav_mono(resolve(base, p)))
        .collect()
}

/// Rebuilds an utterance from the per-channel files of a manifest entry.
/// Ground-truth RIRs are attached when the entry lists them.
pub fn load_utterance(
    base: &Path,
    entry: &ManifestEntry,
    stft: StftConfig,
) -> Result<MultichannelUtterance> {
    let mixture = read_all(base, &entry.mixture_paths)?;
    let direct = read_all(base, &entry.direct_paths)?;
    let mut utt =
        MultichannelUtterance::from_waveforms(entry.utt_id.clone(), mixture, direct, 0, stft)?;
    if !entry.noise_paths.is_empty() {
        utt.noise = read_all(base, &entry.noise_paths)?;
    }
    if !entry.rir_full_paths.is_empty() && !entry.rir_direct_paths.is_empty() {
        utt.rirs = Some(RirSet {
            full: read_all(base, &entry.rir_full_paths)?,
            direct: read_all(base, &entry.rir_direct_paths)?,
        });
    }
    utt.scene = entry.scene.clone();
    utt.snr_db = entry.snr_db;
    Ok(utt)
}

fn write_channels(
    dir: &Path,
    rel: &str,
    prefix: &str,
    chans: &[Waveform],
    depth: BitDepth,
) -> Result<Vec<PathBuf>> {
    chans
        .iter()
        .enumerate()
        .map(|(m, w)| {
            let rel = PathBuf::from(rel).join(format!("{prefix}_ch{m}.wav"));
            write_wav(dir.join(&rel), std::slice::from_ref(w), depth)?;
            Ok(rel)
        })
        .collect()
}

/// Writes every signal of `utt` below `out_dir/<utt id>/` and returns its manifest entry.
pub fn save_utterance(
    out_dir: &Path,
    utt: &MultichannelUtterance,
    seed: u64,
    depth: BitDepth,
) -> Result<ManifestEntry> {
    let rel = utt.id.as_str();
    let rirs = utt.rirs.as_ref();
    let mut extra = Map::new();
    if let Some(scene) = &utt.scene {
        extra.insert("t60".into(), Value::from(scene.t60));
    }
    let dry_path = match &utt.dry {
        Some(d) => {
            let p = PathBuf::from(rel).join("dry.wav");
            write_wav(out_dir.join(&p), std::slice::from_ref(d), depth)?;
            Some(p)
        }
        None => None,
    };
    // RIRs keep full precision whatever the audio bit depth.
    let rir_paths = |set: Option<&Vec<Waveform>>, prefix| match set {
        Some(chans) => write_channels(out_dir, rel, prefix, chans, BitDepth::Float32),
        None => Ok(Vec::new()),
    };
    Ok(ManifestEntry {
        utt_id: utt.id.clone(),
        mixture_paths: write_channels(out_dir, rel, "mixture", &utt.mixture, depth)?,
        direct_paths: write_channels(out_dir, rel, "direct", &utt.direct_path, depth)?,
        noise_paths: write_channels(out_dir, rel, "noise", &utt.noise, depth)?,
        scene: utt.scene.clone(),
        seed,
        snr_db: utt.snr_db,
        rir_full_paths: rir_paths(rirs.map(|r| &r.full), "rir_full")?,
        rir_direct_paths: rir_paths(rirs.map(|r| &r.direct), "rir_direct")?,
        dry_path,
        extra,
    })
}
