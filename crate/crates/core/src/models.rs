//! The two model branches: an acoustic branch producing preliminary
//! velocities from log-mel frames, and the score-informed BiLSTM correction
//! that refines them.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    masked_bce, push_prefixed, relu, relu_backward, sigmoid, sigmoid_backward, AvgPoolFreq, BiLstm, Conv2d,
    Linear, NnError, Parameterized, Reduction,
};
use crate::pianoroll::{ScoreFeatures, VelocityScale};
use crate::Scalar;

pub const KEYS: usize = 88;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected {expected:?}, got {actual:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid velocity grid: {0}")]
    Grid(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn shape(what: &str, expected: &[usize], actual: &[usize]) -> ModelError {
    ModelError::Shape {
        what: what.into(),
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

/// Which score features are concatenated after the preliminary velocities.
/// Column order is always prelim, onset, frame, frame_ex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub use_onset: bool,
    pub use_frame: bool,
    pub use_frame_ex: bool,
}

impl FeatureConfig {
    pub const AUDIO: Self = Self::new(false, false, false);

    /// The six score-informed input configurations compared in the
    /// evaluation table, in its order.
    pub const TABLE_ROWS: [Self; 6] = [
        Self::new(true, false, false),
        Self::new(false, true, false),
        Self::new(false, false, true),
        Self::new(true, true, false),
        Self::new(true, false, true),
        Self::new(false, true, true),
    ];

    pub const fn new(use_onset: bool, use_frame: bool, use_frame_ex: bool) -> Self {
        Self {
            use_onset,
            use_frame,
            use_frame_ex,
        }
    }

    pub fn enabled(&self) -> usize {
        usize::from(self.use_onset) + usize::from(self.use_frame) + usize::from(self.use_frame_ex)
    }

    /// Input width: one block of `keys` columns per channel.
    pub fn width(&self, keys: usize) -> usize {
        keys * (1 + self.enabled())
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.use_onset {
            out.push("onset");
        }
        if self.use_frame {
            out.push("frame");
        }
        if self.use_frame_ex {
            out.push("frame_ex");
        }
        out
    }
}

impl fmt::Display for FeatureConfig {
    /// `audio`, `audio+onset`, `audio+onset+frame_ex`, ...
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("audio")?;
        for n in self.names() {
            write!(f, "+{n}")?;
        }
        Ok(())
    }
}

impl FromStr for FeatureConfig {
    type Err = ModelError;

    /// Accepts `audio+onset+frame_ex` or a comma list such as `onset,frame_ex`.
    /// An empty string or `audio` means no score features.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut cfg = Self::AUDIO;
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "audio" => {}
                "onset" => cfg.use_onset = true,
                "frame" => cfg.use_frame = true,
                "frame_ex" => cfg.use_frame_ex = true,
                other => return Err(ModelError::Config(format!("unknown feature {other:?}"))),
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridRole {
    Preliminary,
    Refined,
}

/// Frames by keys matrix of normalized velocities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid<T> {
    pub values: Array2<T>,
    pub role: GridRole,
}

impl<T: Scalar> VelocityGrid<T> {
    pub fn new(values: Array2<T>, role: GridRole) -> Result<Self, ModelError> {
        if let Some(((t, p), v)) = values
            .indexed_iter()
            .find(|(_, v)| !(v.is_finite() && **v >= T::zero() && **v <= T::one()))
        {
            return Err(ModelError::Grid(format!("value {v} at ({t}, {p}) outside [0, 1]")));
        }
        Ok(Self { values, role })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn keys(&self) -> usize {
        self.values.ncols()
    }
}

/// Concatenates, per frame, the preliminary grid with the enabled score
/// features: `[prelim | onset | frame | frame_ex]`.
pub fn build_correction_input<T: Scalar>(
    prelim: &VelocityGrid<T>,
    sf: &ScoreFeatures,
    cfg: &FeatureConfig,
) -> Result<Array2<T>, ModelError> {
    if prelim.values.dim() != sf.onset.dim() {
        return Err(shape("correction input", sf.onset.shape(), prelim.values.shape()));
    }
    let (frames, keys) = prelim.values.dim();
    let mut out = Array2::zeros((frames, cfg.width(keys)));
    out.slice_mut(s![.., ..keys]).assign(&prelim.values);
    let mut block = 1;
    for (on, m) in [
        (cfg.use_onset, &sf.onset),
        (cfg.use_frame, &sf.frame),
        (cfg.use_frame_ex, &sf.frame_ex),
    ] {
        if on {
            out.slice_mut(s![.., block * keys..(block + 1) * keys])
                .assign(&m.mapv(|v| T::lit(f64::from(v))));
            block += 1;
        }
    }
    Ok(out)
}

/// How a note's velocity is read from the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnsetRead {
    /// The value at the onset cell.
    #[default]
    Exact,
    /// The largest value within one frame of the onset, same key.
    MaxNeighbor,
}

/// Assigns each note whose onset is owned by `sf` the denormalized grid value
/// at its onset cell. Returns `(note index, velocity)` in onset-cell order.
pub fn map_onset_velocities<T: Scalar>(
    grid: &VelocityGrid<T>,
    sf: &ScoreFeatures,
    scale: VelocityScale,
    read: OnsetRead,
) -> Result<Vec<(usize, u8)>, ModelError> {
    if grid.values.dim() != sf.onset.dim() {
        return Err(shape("velocity grid", sf.onset.shape(), grid.values.shape()));
    }
    let last = grid.frames() - 1;
    Ok(sf
        .onset_notes
        .iter()
        .map(|cell| {
            let v = match read {
                OnsetRead::Exact => grid.values[[cell.row, cell.key]],
                OnsetRead::MaxNeighbor => (cell.row.saturating_sub(1)..=(cell.row + 1).min(last))
                    .map(|r| grid.values[[r, cell.key]])
                    .fold(T::zero(), T::max),
            };
            (cell.note, scale.denormalize(v.to_f64_lossy()))
        })
        .collect())
}

/// A trainable branch mapping a frames-by-features input to a
/// frames-by-keys grid in `(0, 1)`.
pub trait VelocityModel<T: Scalar>: Parameterized<T> + Clone {
    /// Text pinning everything that determines parameter layout and input
    /// semantics; its digest guards checkpoints.
    fn arch(&self) -> String;

    fn input_width(&self) -> usize;

    fn zeros_like(&self) -> Self;

    fn predict(&self, input: &Array2<T>) -> Result<Array2<T>, ModelError>;

    /// Masked BCE against `target` on `mask` cells and its parameter
    /// gradient.
    fn loss_and_grad(
        &self,
        input: &Array2<T>,
        target: &Array2<T>,
        mask: &Array2<u8>,
        reduction: Reduction,
    ) -> Result<(T, Self), ModelError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    pub features: FeatureConfig,
    /// Hidden units per direction.
    pub hidden: usize,
    pub keys: usize,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::new(true, false, false),
            hidden: 256,
            keys: KEYS,
        }
    }
}

/// BiLSTM over `[prelim | features]` frames, then a linear map to one
/// sigmoid output per key.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionModel<T> {
    pub config: CorrectionConfig,
    pub lstm: BiLstm<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> CorrectionModel<T> {
    pub fn init<R: Rng + ?Sized>(config: CorrectionConfig, rng: &mut R) -> Self {
        let w = config.features.width(config.keys);
        let lstm = BiLstm::init(w, config.hidden, rng);
        let output = Linear::init(2 * config.hidden, config.keys, rng);
        Self { config, lstm, output }
    }

    pub fn zeros(config: CorrectionConfig) -> Self {
        let w = config.features.width(config.keys);
        Self {
            lstm: BiLstm::zeros(w, config.hidden),
            output: Linear::zeros(2 * config.hidden, config.keys),
            config,
        }
    }

    fn check_input(&self, input: &Array2<T>) -> Result<(), ModelError> {
        let w = self.input_width();
        if input.ncols() != w {
            return Err(ModelError::Config(format!(
                "correction input width {} does not match the configured {w} ({})",
                input.ncols(),
                self.config.features
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Array2<T>) -> Result<VelocityGrid<T>, ModelError> {
        Ok(VelocityGrid {
            values: self.predict(input)?,
            role: GridRole::Refined,
        })
    }
}

impl<T: Scalar> VelocityModel<T> for CorrectionModel<T> {
    fn arch(&self) -> String {
        let c = &self.config;
        format!(
            "correction v1\nfeatures={}\ninput_width={}\nlstm_hidden={}\nkeys={}\n",
            c.features,
            self.input_width(),
            c.hidden,
            c.keys
        )
    }

    fn input_width(&self) -> usize {
        self.config.features.width(self.config.keys)
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone())
    }

    fn predict(&self, input: &Array2<T>) -> Result<Array2<T>, ModelError> {
        self.check_input(input)?;
        let (h, _) = self.lstm.forward(input)?;
        let (z, _) = self.output.forward(&h)?;
        Ok(sigmoid(&z))
    }

    fn loss_and_grad(
        &self,
        input: &Array2<T>,
        target: &Array2<T>,
        mask: &Array2<u8>,
        reduction: Reduction,
    ) -> Result<(T, Self), ModelError> {
        self.check_input(input)?;
        let (h, lstm_cache) = self.lstm.forward(input)?;
        let (z, out_cache) = self.output.forward(&h)?;
        let p = sigmoid(&z);
        let (loss, dp) = masked_bce(&p, target, mask, reduction)?;
        let dz = sigmoid_backward(&p, &dp)?;
        let (dh, output) = self.output.backward(&out_cache, &dz)?;
        let lstm = self.lstm.backward_params(&lstm_cache, &dh)?;
        Ok((
            loss,
            Self {
                config: self.config.clone(),
                lstm,
                output,
            },
        ))
    }
}

impl<T: Scalar> Parameterized<T> for CorrectionModel<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        push_prefixed(&mut out, "lstm", self.lstm.params());
        push_prefixed(&mut out, "output", self.output.params());
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        push_prefixed(&mut out, "lstm", self.lstm.params_mut());
        push_prefixed(&mut out, "output", self.output.params_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcousticConfig {
    pub mel_bins: usize,
    /// Output channels of each conv block; every block halves the
    /// frequency axis.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Hidden units per direction of the recurrent layer.
    pub hidden: usize,
    pub keys: usize,
    /// Fixed input standardization: `(mel - offset) * scale`.
    pub input_offset: f64,
    pub input_scale: f64,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            mel_bins: 229,
            channels: vec![16, 32],
            kernel: 3,
            hidden: 64,
            keys: KEYS,
            input_offset: -11.5,
            input_scale: 0.1,
        }
    }
}

impl AcousticConfig {
    /// Frequency bins left after all pooling stages.
    pub fn pooled_bins(&self) -> usize {
        self.channels.iter().fold(self.mel_bins, |w, _| w / 2)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(ModelError::Config("acoustic branch needs nonzero conv channels".into()));
        }
        if self.kernel % 2 == 0 || self.hidden == 0 || self.keys == 0 || self.pooled_bins() == 0 {
            return Err(ModelError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Conv blocks (3x3 conv, ReLU, 2x frequency average pooling), then a
/// BiLSTM over the flattened per-frame maps and a sigmoid linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModel<T> {
    pub config: AcousticConfig,
    pub convs: Vec<Conv2d<T>>,
    pub lstm: BiLstm<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> AcousticModel<T> {
    pub fn init<R: Rng + ?Sized>(config: AcousticConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut c_in = 1;
        for &c in &config.channels {
            convs.push(Conv2d::init(c_in, c, config.kernel, rng));
            c_in = c;
        }
        let lstm = BiLstm::init(c_in * config.pooled_bins(), config.hidden, rng);
        let output = Linear::init(2 * config.hidden, config.keys, rng);
        Ok(Self {
            config,
            convs,
            lstm,
            output,
        })
    }

    pub fn zeros(config: AcousticConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut c_in = 1;
        for &c in &config.channels {
            convs.push(Conv2d::zeros(c_in, c, config.kernel));
            c_in = c;
        }
        Ok(Self {
            lstm: BiLstm::zeros(c_in * config.pooled_bins(), config.hidden),
            output: Linear::zeros(2 * config.hidden, config.keys),
            convs,
            config,
        })
    }

    pub fn forward(&self, mel: &Array2<T>) -> Result<VelocityGrid<T>, ModelError> {
        Ok(VelocityGrid {
            values: self.predict(mel)?,
            role: GridRole::Preliminary,
        })
    }

    fn check_input(&self, mel: &Array2<T>) -> Result<(), ModelError> {
        if mel.ncols() != self.config.mel_bins || mel.nrows() == 0 {
            return Err(shape("acoustic input", &[mel.nrows().max(1), self.config.mel_bins], mel.shape()));
        }
        Ok(())
    }

    fn standardize(&self, mel: &Array2<T>) -> Array3<T> {
        let (off, sc) = (T::lit(self.config.input_offset), T::lit(self.config.input_scale));
        mel.mapv(|v| (v - off) * sc).insert_axis(Axis(0))
    }
}

/// `channels x frames x bins` to `frames x (channels * bins)`.
fn flatten_frames<T: Scalar>(x: &Array3<T>) -> Array2<T> {
    let (c, t, f) = x.dim();
    x.view()
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_shape_with_order((t, c * f))
        .expect("standard layout")
        .into_owned()
}

fn unflatten_frames<T: Scalar>(x: &Array2<T>, channels: usize) -> Array3<T> {
    let (t, w) = x.dim();
    x.view()
        .into_shape_with_order((t, channels, w / channels))
        .expect("contiguous gradient")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
}

struct BlockCache<T> {
    conv: crate::nn::Conv2dCache<T>,
    pre_relu: Array3<T>,
}

impl<T: Scalar> VelocityModel<T> for AcousticModel<T> {
    fn arch(&self) -> String {
        let c = &self.config;
        format!(
            "acoustic v1\nmel_bins={}\nchannels={:?}\nkernel={}\npool=freq2\nlstm_hidden={}\nkeys={}\ninput_offset={}\ninput_scale={}\n",
            c.mel_bins, c.channels, c.kernel, c.hidden, c.keys, c.input_offset, c.input_scale
        )
    }

    fn input_width(&self) -> usize {
        self.config.mel_bins
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("validated at construction")
    }

    fn predict(&self, mel: &Array2<T>) -> Result<Array2<T>, ModelError> {
        self.check_input(mel)?;
        let mut x = self.standardize(mel);
        for conv in &self.convs {
            let (y, _) = conv.forward(&x)?;
            x = AvgPoolFreq::forward(&relu(&y));
        }
        let (h, _) = self.lstm.forward(&flatten_frames(&x))?;
        let (z, _) = self.output.forward(&h)?;
        Ok(sigmoid(&z))
    }

    fn loss_and_grad(
        &self,
        mel: &Array2<T>,
        target: &Array2<T>,
        mask: &Array2<u8>,
        reduction: Reduction,
    ) -> Result<(T, Self), ModelError> {
        self.check_input(mel)?;
        let mut x = self.standardize(mel);
        let mut caches = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (y, conv_cache) = conv.forward(&x)?;
            x = AvgPoolFreq::forward(&relu(&y));
            caches.push(BlockCache {
                conv: conv_cache,
                pre_relu: y,
            });
        }
        let channels = x.dim().0;
        let (h, lstm_cache) = self.lstm.forward(&flatten_frames(&x))?;
        let (z, out_cache) = self.output.forward(&h)?;
        let p = sigmoid(&z);
        let (loss, dp) = masked_bce(&p, target, mask, reduction)?;
        let dz = sigmoid_backward(&p, &dp)?;
        let (dh, output) = self.output.backward(&out_cache, &dz)?;
        let (dflat, lstm) = self.lstm.backward(&lstm_cache, &dh)?;
        let mut g = unflatten_frames(&dflat, channels);
        let mut convs = Vec::with_capacity(self.convs.len());
        for (conv, cache) in self.convs.iter().zip(&caches).rev() {
            let dy = relu_backward(&cache.pre_relu, &AvgPoolFreq::backward(cache.pre_relu.dim().2, &g)?)?;
            let (dx, gc) = conv.backward(&cache.conv, &dy)?;
            convs.push(gc);
            g = dx;
        }
        convs.reverse();
        Ok((
            loss,
            Self {
                config: self.config.clone(),
                convs,
                lstm,
                output,
            },
        ))
    }
}

impl<T: Scalar> Parameterized<T> for AcousticModel<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            push_prefixed(&mut out, &format!("conv{i}"), c.params());
        }
        push_prefixed(&mut out, "lstm", self.lstm.params());
        push_prefixed(&mut out, "output", self.output.params());
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            push_prefixed(&mut out, &format!("conv{i}"), c.params_mut());
        }
        push_prefixed(&mut out, "lstm", self.lstm.params_mut());
        push_prefixed(&mut out, "output", self.output.params_mut());
        out
    }
}

/// Row-wise concatenation of grids along time, e.g. to stitch segments.
pub fn stack_frames<T: Scalar>(parts: &[Array2<T>]) -> Option<Array2<T>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).ok()
}
