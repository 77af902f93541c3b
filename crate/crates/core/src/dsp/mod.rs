//! Audio decoding and the log-mel front end of the acoustic branch.

mod mel;
mod wav;

pub use mel::{hz_to_mel, log_mel, mel_to_hz, MelConfig, MelFilterbank, MelSpectrogram};
pub use wav::{read_wav, read_wav_any_rate, write_wav, SampleFormat};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("WAV parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("unsupported audio: {0}")]
    Unsupported(String),
    #[error("sample rate {found} Hz does not match the configured {expected} Hz")]
    SampleRate { expected: u32, found: u32 },
    #[error("clip of {samples} samples is shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("invalid mel configuration: {0}")]
    Config(String),
}

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}
