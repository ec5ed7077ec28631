//! WAV files and the corpus manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::roomsim::RoomScene;
use crate::spectral::Waveform;

pub const MANIFEST_SCHEMA: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitDepth {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// All channels of a PCM16 or float32 WAV file, de-interleaved.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<Waveform>> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wav_err(path))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(wav_err(path))?,
        (fmt, bits) => {
            let kind = if fmt == hound::SampleFormat::Int {
                "pcm"
            } else {
                "float"
            };
            return Err(Error::UnsupportedEncoding {
                path: path.to_path_buf(),
                encoding: format!("{kind}{bits}"),
            });
        }
    };
    if channels == 0 || interleaved.is_empty() || interleaved.len() % channels != 0 {
        return Err(Error::Domain(format!(
            "{} holds no complete frames",
            path.display()
        )));
    }
    let frames = interleaved.len() / channels;
    (0..channels)
        .map(|c| {
            let samples = (0..frames).map(|i| interleaved[i * channels + c]).collect();
            Waveform::new(samples, spec.sample_rate)
        })
        .collect()
}

/// First channel of a WAV file.
pub fn read_wav_mono(path: impl AsRef<Path>) -> Result<Waveform> {
    Ok(read_wav(path)?.swap_remove(0))
}

/// Writes equal-length channels interleaved. PCM16 clips to full scale.
pub fn write_wav(path: impl AsRef<Path>, channels: &[Waveform], depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let first = channels
        .first()
        .ok_or_else(|| Error::Domain("cannot write a WAV file with no channels".into()))?;
    if channels
        .iter()
        .any(|c| c.len() != first.len() || c.sample_rate() != first.sample_rate())
    {
        return Err(Error::Shape(
            "WAV channels must share length and sample rate".into(),
        ));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate: first.sample_rate(),
        bits_per_sample: match depth {
            BitDepth::Pcm16 => 16,
            BitDepth::Float32 => 32,
        },
        sample_format: match depth {
            BitDepth::Pcm16 => hound::SampleFormat::Int,
            BitDepth::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err(path))?;
    for i in 0..first.len() {
        for c in channels {
            let x = c.samples()[i];
            match depth {
                BitDepth::Pcm16 => {
                    let v = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(v).map_err(wav_err(path))?;
                }
                BitDepth::Float32 => writer.write_sample(x as f32).map_err(wav_err(path))?,
            }
        }
    }
    writer.finalize().map_err(wav_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub mixture_paths: Vec<PathBuf>,
    pub direct_paths: Vec<PathBuf>,
    pub noise_paths: Vec<PathBuf>,
    pub scene: Option<RoomScene>,
    pub seed: u64,
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rir_full_paths: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rir_direct_paths: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dry_path: Option<PathBuf>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

const ENTRY_KEYS: [&str; 7] = [
    "utt_id",
    "mixture_paths",
    "direct_paths",
    "noise_paths",
    "scene",
    "seed",
    "snr_db",
];

impl ManifestEntry {
    pub fn mic_count(&self) -> usize {
        self.mixture_paths.len()
    }

    fn check(&self, base: &Path) -> Result<()> {
        let fail = |reason: String| Error::ManifestEntry {
            entry: self.utt_id.clone(),
            reason,
        };
        let p = self.mixture_paths.len();
        if p == 0 {
            return Err(fail("no mixture channels".into()));
        }
        for (name, list) in [
            ("direct_paths", &self.direct_paths),
            ("noise_paths", &self.noise_paths),
            ("rir_full_paths", &self.rir_full_paths),
            ("rir_direct_paths", &self.rir_direct_paths),
        ] {
            if !list.is_empty() && list.len() != p {
                return Err(fail(format!(
                    "{name} has {} channels, mixture has {p}",
                    list.len()
                )));
            }
        }
        if let Some(scene) = &self.scene {
            if scene.mic_count() != p {
                return Err(fail(format!(
                    "scene has {} microphones, mixture has {p}",
                    scene.mic_count()
                )));
            }
        }
        for path in self.all_paths() {
            let full = resolve(base, path);
            if !full.is_file() {
                return Err(fail(format!("file {} does not exist", full.display())));
            }
        }
        Ok(())
    }

    fn all_paths(&self) -> impl Iterator<Item = &PathBuf> {
        self.mixture_paths
            .iter()
            .chain(&self.direct_paths)
            .chain(&self.noise_paths)
            .chain(&self.rir_full_paths)
            .chain(&self.rir_direct_paths)
            .chain(&self.dry_path)
    }
}

/// Relative paths are taken relative to the manifest's directory.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u64,
    pub entries: Vec<ManifestEntry>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            schema: MANIFEST_SCHEMA,
            entries: Vec::new(),
            extra: Map::new(),
        }
    }
}

impl Manifest {
    pub fn entry(&self, utt_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utt_id == utt_id)
    }
}

/// Parses a manifest without touching the referenced files.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let value: Value = serde_json::from_str(text)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Domain("manifest must be a JSON object".into()))?;
    let schema = obj
        .get("schema")
        .ok_or_else(|| Error::MissingKey("schema".into()))?
        .as_u64()
        .ok_or_else(|| Error::Domain("manifest `schema` must be an integer".into()))?;
    if schema != MANIFEST_SCHEMA {
        return Err(Error::SchemaVersion {
            found: schema,
            expected: MANIFEST_SCHEMA,
        });
    }
    let entries = obj
        .get("entries")
        .ok_or_else(|| Error::MissingKey("entries".into()))?
        .as_array()
        .ok_or_else(|| Error::Domain("manifest `entries` must be an array".into()))?;
    for (i, e) in entries.iter().enumerate() {
        let eo = e
            .as_object()
            .ok_or_else(|| Error::Domain(format!("manifest entry {i} is not an object")))?;
        if let Some(key) = ENTRY_KEYS.iter().find(|k| !eo.contains_key(**k)) {
            let name = eo
                .get("utt_id")
                .and_then(Value::as_str)
                .map_or(format!("#{i}"), String::from);
            return Err(Error::MissingKey(format!("entries[{name}].{key}")));
        }
    }
    Ok(serde_json::from_value(value)?)
}

/// Loads a manifest and checks that every referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &manifest.entries {
        e.check(base)?;
    }
    Ok(manifest)
}

pub fn manifest_to_string(manifest: &Manifest) -> Result<String> {
    let mut s = serde_json::to_string_pretty(manifest)?;
    s.push('\n');
    Ok(s)
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(Error::SchemaVersion {
            found: manifest.schema,
            expected: MANIFEST_SCHEMA,
        });
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, manifest_to_string(manifest)?).map_err(|e| Error::io(path, e))
}
