use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{F0Config, MelConfig};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, LrSchedule};
use crate::ser::{SerConfig, SerTrainConfig, StyleLevel};
use crate::tts::{TrainingMode, TtsConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-size networks and schedules.
    Full,
    /// Reduced sizes that train on a laptop CPU in minutes.
    Desk,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Full => "full",
            Profile::Desk => "desk",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::invalid(format!(
                "unknown profile {s:?} (expected full or desk)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtsTrainConfig {
    pub steps: u64,
    /// Utterances per update.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Checkpoint interval in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    pub batch_norm_momentum: f64,
}

impl TtsTrainConfig {
    pub fn full() -> Self {
        let mut optimizer = AdamConfig::new(1e-3);
        optimizer.weight_decay = 1e-6;
        optimizer.schedule = LrSchedule {
            base: 1e-3,
            floor: 1e-5,
            decay_start: 50_000,
            decay_end: 150_000,
        };
        TtsTrainConfig {
            steps: 150_000,
            batch_size: 32,
            optimizer,
            checkpoint_every: 5_000,
            batch_norm_momentum: 0.9,
        }
    }

    pub fn desk() -> Self {
        let mut cfg = Self::full();
        cfg.steps = 1_000;
        cfg.batch_size = 4;
        cfg.checkpoint_every = 100;
        cfg.optimizer.schedule.decay_start = 333;
        cfg.optimizer.schedule.decay_end = 1_000;
        cfg
    }
}

/// Everything that determines the output of a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    pub mode: TrainingMode,
    pub style_level: StyleLevel,
    pub mel: MelConfig,
    pub f0: F0Config,
    pub ser: SerConfig,
    pub ser_train: SerTrainConfig,
    pub tts: TtsConfig,
    pub tts_train: TtsTrainConfig,
    pub griffin_lim_iters: usize,
    /// Fraction of each synthetic corpus held out.
    pub holdout_fraction: f64,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (ser, ser_train, tts, tts_train) = match profile {
            Profile::Full => (
                SerConfig::full(),
                SerTrainConfig::full(),
                TtsConfig::full(),
                TtsTrainConfig::full(),
            ),
            Profile::Desk => (
                SerConfig::desk(),
                SerTrainConfig::desk(),
                TtsConfig::desk(),
                TtsTrainConfig::desk(),
            ),
        };
        RunConfig {
            seed: 0,
            profile,
            mode: TrainingMode::Baseline,
            style_level: StyleLevel::Low,
            mel: MelConfig::default(),
            f0: F0Config::default(),
            ser,
            ser_train,
            tts,
            tts_train,
            griffin_lim_iters: 60,
            holdout_fraction: 0.2,
        }
    }

    /// Profile defaults overlaid with the keys present in a JSON file.
    pub fn load(profile: Profile, path: Option<&Path>) -> Result<Self> {
        let mut base = serde_json::to_value(Self::for_profile(profile))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let overrides: serde_json::Value = serde_json::from_str(&text)?;
            merge(&mut base, overrides);
        }
        let cfg: RunConfig = serde_json::from_value(base)?;
        Ok(cfg.resolved())
    }

    /// Copies the top-level mode and level into the model config.
    pub fn resolved(mut self) -> Self {
        self.tts.mode = self.mode;
        self.tts.style_level = self.style_level;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.ser.validate()?;
        self.tts.validate()?;
        if self.ser.n_mels != self.mel.n_mels || self.tts.mel_channels != self.mel.n_mels {
            return Err(Error::invalid(
                "mel channel counts disagree between configs",
            ));
        }
        if self.tts_train.batch_size == 0 || self.ser_train.batch_size == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::invalid("holdout_fraction must be in [0, 1)"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

fn merge(base: &mut serde_json::Value, overrides: serde_json::Value) {
    match (base, overrides) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
