//! Run configuration: one TOML document covering corpus generation, feature
//! extraction, both model branches, training and evaluation.
//!
//! Two built-in profiles exist. `paper` keeps the full-scale training
//! constants (200k iterations, batch 12, lr 1e-4 decayed by 0.9 every 10k
//! steps, seed 13, 256 hidden units). `desk` shrinks the models and the run
//! so an experiment finishes in minutes on one CPU core. A config file picks
//! a base profile with `profile = "..."` and overrides any field below it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::MelConfig;
use crate::eval::MatchConfig;
use crate::models::{AcousticConfig, CorrectionConfig};
use crate::nn::AdamConfig;
use crate::pianoroll::SegmentSpec;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown profile {0:?} (expected \"paper\" or \"desk\")")]
    Profile(String),
    #[error("config parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    #[default]
    Desk,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

impl FromStr for Profile {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(ConfigError::Profile(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub profile: Profile,
    pub synth: SynthConfig,
    /// Segment grid used by every command; overrides `synth.segment`.
    pub segment: SegmentSpec,
    pub mel: MelConfig,
    pub correction: CorrectionConfig,
    pub acoustic: AcousticConfig,
    pub train: TrainConfig,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
}

impl Config {
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            synth: SynthConfig::default(),
            segment: SegmentSpec::default(),
            mel: MelConfig::default(),
            correction: CorrectionConfig::default(),
            acoustic: AcousticConfig::default(),
            train: TrainConfig::default(),
            matching: MatchConfig::default(),
        }
    }

    /// Small models and short runs; iterations stay within 5000.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.profile = Profile::Desk;
        c.correction.hidden = 32;
        c.acoustic.hidden = 32;
        c.train = TrainConfig {
            iterations: 2000,
            batch_size: 4,
            validate_every: 500,
            adam: AdamConfig {
                base_lr: 3e-3,
                decay_steps: 1000,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        c
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Parses a config document. The base profile comes from `profile`
    /// (overriding the document's own `profile` key when given), and every
    /// field present in the document replaces the base value.
    pub fn from_toml(text: &str, profile: Option<Profile>) -> Result<Self, ConfigError> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let base_profile = match (profile, doc.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .as_str()
                .ok_or_else(|| ConfigError::Parse("profile must be a string".into()))?
                .parse()?,
            (None, None) => Profile::default(),
        };
        let mut merged = toml::Table::try_from(Self::for_profile(base_profile))
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        overlay(&mut merged, doc);
        merged.insert("profile".into(), toml::Value::String(base_profile.to_string()));
        merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    /// Corpus settings with the shared segment grid, velocity scale and
    /// sample rate applied.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            segment: self.segment,
            scale: self.train.scale,
            sample_rate: self.mel.sample_rate,
            ..self.synth.clone()
        }
    }

    /// Sets the seed of both corpus generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
