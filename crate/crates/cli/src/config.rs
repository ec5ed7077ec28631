use std::fs;
use std::path::Path;

use dereverb_core::audio_io::BitDepth;
use dereverb_core::mcloss::LossConfig;
use dereverb_core::roomsim::SceneSampler;
use dereverb_core::spectral::StftConfig;
use dereverb_core::usd::OptimConfig;
use dereverb_core::wpe::WpeConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run needs, read from one JSON file. Missing fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sampler: SceneSampler,
    pub stft: StftConfig,
    /// Length of synthetic dry utterances when no dry directory is given.
    pub utterance_secs: f64,
    pub bit_depth: BitDepth,
    pub loss: LossConfig,
    /// Replace `loss.alpha` by the channel-count default.
    pub auto_alpha: bool,
    pub optim: OptimConfig,
    /// `None` picks the channel-count defaults.
    pub wpe: Option<WpeConfig>,
    pub mics: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sampler: SceneSampler::default(),
            stft: StftConfig::default(),
            utterance_secs: 4.0,
            bit_depth: BitDepth::Float32,
            loss: LossConfig::default(),
            auto_alpha: true,
            optim: OptimConfig::default(),
            wpe: None,
            mics: 8,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Loss settings for a `mics`-channel run.
    pub fn loss_for(&self, mics: usize) -> LossConfig {
        if self.auto_alpha {
            self.loss.clone().with_alpha_for(mics)
        } else {
            self.loss.clone()
        }
    }

    pub fn optim_for(&self, mics: usize) -> OptimConfig {
        OptimConfig {
            loss: self.loss_for(mics),
            ..self.optim.clone()
        }
    }

    pub fn wpe_for(&self, mics: usize) -> WpeConfig {
        self.wpe
            .clone()
            .unwrap_or_else(|| WpeConfig::for_channels(mics))
    }
}

/// Microphone subset for an `n`-channel run out of `available`: 1 -> {0}, 2 -> {0,3},
/// 4 -> {0,2,4,6}, `available` -> all.
pub fn mic_subset(n: usize, available: usize) -> Result<Vec<usize>, CliError> {
    let subset = match n {
        _ if n == available => (0..available).collect(),
        1 => vec![0],
        2 => vec![0, 3],
        4 => vec![0, 2, 4, 6],
        _ => {
            return Err(CliError::Usage(format!(
                "unsupported microphone count {n}; use 1, 2, 4 or all {available}"
            )))
        }
    };
    if subset.iter().any(|&m: &usize| m >= available) {
        return Err(CliError::Usage(format!(
            "{n}-channel subset {subset:?} needs more than the {available} recorded channels"
        )));
    }
    Ok(subset)
}
