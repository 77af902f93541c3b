//! Score-informed MIDI velocity correction.
//!
//! The pipeline reads a time-aligned MIDI score and either audio or an
//! externally produced preliminary velocity roll, rasterizes the score into
//! piano-roll features, refines the preliminary velocities with a
//! bidirectional LSTM, and maps the refined roll back onto the score's notes.
//!
//! Numerical code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks). Concrete aliases for both precisions live at the crate
//! root.

pub mod config;
pub mod dsp;
pub mod eval;
pub mod formats;
pub mod midi;
pub mod models;
pub mod nn;
pub mod pianoroll;
pub mod pipeline;
pub mod synth;
pub mod trainer;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Real scalar type the numerical core is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + rustfft::FftNum
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; used for constants.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to any Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub use dsp::{AudioClip, MelConfig, MelSpectrogram};
pub use eval::{EvalReport, MatchConfig};
pub use midi::{MidiPerformance, NoteEvent};
pub use models::{FeatureConfig, GridRole, VelocityGrid};
pub use pianoroll::{ScoreFeatures, SegmentSpec, VelocityScale};

pub type Tensor2<T> = ndarray::Array2<T>;

pub type AcousticModel32 = models::AcousticModel<f32>;
pub type AcousticModel64 = models::AcousticModel<f64>;
pub type CorrectionModel32 = models::CorrectionModel<f32>;
pub type CorrectionModel64 = models::CorrectionModel<f64>;
pub type VelocityGrid32 = models::VelocityGrid<f32>;
pub type VelocityGrid64 = models::VelocityGrid<f64>;
pub type MelSpectrogram32 = dsp::MelSpectrogram<f32>;
pub type MelSpectrogram64 = dsp::MelSpectrogram<f64>;
pub type Adam32 = nn::Adam<f32>;
pub type Adam64 = nn::Adam<f64>;
