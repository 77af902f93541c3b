//! `velocorr`: generate synthetic corpora, extract features, train, refine
//! and evaluate MIDI velocities.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 training
//! failure, 4 checkpoint does not match the configured architecture.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use velocorr::config::{Config, Profile};
use velocorr::formats::Split;
use velocorr::FeatureConfig;

#[derive(Parser)]
#[command(name = "velocorr", version, about = "Score-informed MIDI velocity correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile: paper or desk.
    #[arg(long)]
    profile: Option<Profile>,
    /// Seed for corpus generation and training.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    pub fn load(&self) -> Result<Config, Failure> {
        let cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
                Config::from_toml(&text, self.profile).map_err(|e| Failure::usage(e.to_string()))?
            }
            None => Config::for_profile(self.profile.unwrap_or_default()),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Correction,
    Acoustic,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum Source {
    Preliminary,
    Refined,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus (MIDI, grids or audio, manifest).
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cache score features and log-mel spectrograms for every item.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model branch; writes best.ckpt, last.ckpt and train.log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "correction")]
        model: ModelKind,
        /// Score features fed to the correction model, e.g. `onset,frame_ex`.
        #[arg(long)]
        features: Option<FeatureConfig>,
        /// Acoustic checkpoint producing preliminary grids for audio items.
        #[arg(long)]
        acoustic: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine preliminary grids and write corrected MIDI.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Only this item; all items otherwise.
        #[arg(long)]
        id: Option<String>,
        /// Correction checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: Option<FeatureConfig>,
        #[arg(long)]
        acoustic: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report MAE, STD and recall of preliminary or refined velocities.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_enum, default_value = "preliminary")]
        source: Source,
        /// Correction checkpoint, required for `--source refined`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        features: Option<FeatureConfig>,
        #[arg(long)]
        acoustic: Option<PathBuf>,
        /// Match on onsets only.
        #[arg(long)]
        no_offset: bool,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn training(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth { common, out } => commands::gen_synth(&common, &out),
        Command::Extract { common, manifest, out } => commands::extract(&common, &manifest, &out),
        Command::Train {
            common,
            manifest,
            model,
            features,
            acoustic,
            out,
        } => commands::train(&common, &manifest, model, features, acoustic.as_deref(), &out),
        Command::Infer {
            common,
            manifest,
            id,
            checkpoint,
            features,
            acoustic,
            out,
        } => commands::infer(
            &common,
            &manifest,
            id.as_deref(),
            &checkpoint,
            features,
            acoustic.as_deref(),
            &out,
        ),
        Command::Eval {
            common,
            manifest,
            split,
            source,
            checkpoint,
            features,
            acoustic,
            no_offset,
            out,
        } => commands::eval(
            &common,
            &manifest,
            split,
            source,
            checkpoint.as_deref(),
            features,
            acoustic.as_deref(),
            no_offset,
            out.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
