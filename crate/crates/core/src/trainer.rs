//! Seeded training loop: uniform batch sampling with replacement, masked BCE
//! averaged over the batch, Adam with step decay, periodic validation by
//! per-note MAE and best-checkpoint selection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{write_file, FormatError};
use crate::models::{
    build_correction_input, map_onset_velocities, ModelError, OnsetRead, VelocityGrid, VelocityModel,
};
use crate::nn::{
    accumulate, bce_entropy_floor, global_norm, masked_bce, save_checkpoint, scale_params, Adam, AdamConfig,
    NnError, Reduction,
};
use crate::pianoroll::{OnsetCell, ScoreFeatures, VelocityScale};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no usable training examples")]
    NoData,
    #[error("iteration {iteration}: {source}")]
    Step {
        iteration: u64,
        #[source]
        source: NnError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] FormatError),
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub reduction: Reduction,
    /// Validate (and possibly checkpoint) every this many iterations and
    /// after the last one.
    pub validate_every: u64,
    /// Rescale the batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    pub scale: VelocityScale,
    pub onset_read: OnsetRead,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200_000,
            batch_size: 12,
            seed: 13,
            adam: AdamConfig::default(),
            reduction: Reduction::Sum,
            validate_every: 5_000,
            clip_norm: None,
            scale: VelocityScale::Div127,
            onset_read: OnsetRead::Exact,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 || self.batch_size == 0 || self.validate_every == 0 {
            return Err(TrainError::Config("iterations, batch size and validation interval must be positive".into()));
        }
        if !(self.adam.base_lr > 0.0) || self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(TrainError::Config("learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// One training or validation segment: model input, normalized target roll,
/// onset mask and the onset cell of every note the segment owns.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub id: String,
    pub input: Array2<T>,
    pub target: Array2<T>,
    pub mask: Array2<u8>,
    pub notes: Vec<OnsetCell>,
}

impl<T: Scalar> Example<T> {
    /// Correction-branch example from a preliminary grid and score features.
    pub fn correction(
        id: impl Into<String>,
        prelim: &VelocityGrid<T>,
        sf: &ScoreFeatures,
        features: &crate::models::FeatureConfig,
    ) -> Result<Self, ModelError> {
        Ok(Self::from_input(id, build_correction_input(prelim, sf, features)?, sf))
    }

    /// Example with an arbitrary input (e.g. log-mel frames) and the
    /// targets of `sf`.
    pub fn from_input(id: impl Into<String>, input: Array2<T>, sf: &ScoreFeatures) -> Self {
        Self {
            id: id.into(),
            input,
            target: sf.target_vel.mapv(T::lit),
            mask: sf.onset.clone(),
            notes: sf.onset_notes.clone(),
        }
    }

    fn usable<M: VelocityModel<T>>(&self, model: &M) -> Result<(), String> {
        if self.input.ncols() != model.input_width() {
            return Err(format!("input width {} != {}", self.input.ncols(), model.input_width()));
        }
        if self.target.dim() != self.mask.dim() || self.target.nrows() != self.input.nrows() {
            return Err("target, mask and input disagree on shape".into());
        }
        Ok(())
    }
}

/// Per-note absolute errors after denormalizing prediction and target at
/// each note's onset cell.
pub fn note_errors<T: Scalar>(
    pred: &Array2<T>,
    ex: &Example<T>,
    scale: VelocityScale,
    read: OnsetRead,
) -> Result<Vec<f64>, ModelError> {
    let grid = VelocityGrid {
        values: pred.clone(),
        role: crate::models::GridRole::Refined,
    };
    let sf = ScoreFeatures {
        onset: ex.mask.clone(),
        frame: Array2::zeros(ex.mask.raw_dim()),
        frame_ex: Array2::zeros(ex.mask.raw_dim()),
        target_vel: Array2::zeros(ex.mask.raw_dim()),
        onset_notes: ex.notes.clone(),
    };
    let got = map_onset_velocities(&grid, &sf, scale, read)?;
    Ok(got
        .iter()
        .zip(&ex.notes)
        .map(|(&(_, v), cell)| {
            let truth = scale.denormalize(ex.target[[cell.row, cell.key]].to_f64_lossy());
            (f64::from(v) - f64::from(truth)).abs()
        })
        .collect())
}

/// Mean per-note MAE over `examples`, pooled over notes, in velocity units.
/// `None` when the examples hold no notes.
pub fn validate<T: Scalar, M: VelocityModel<T>>(
    model: &M,
    examples: &[Example<T>],
    scale: VelocityScale,
    read: OnsetRead,
) -> Result<Option<f64>, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let pred = model.predict(&ex.input)?;
        for e in note_errors(&pred, ex, scale, read)? {
            total += e;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Summed masked BCE over `examples` and the entropy floor no model can go
/// below for these targets.
pub fn dataset_loss<T: Scalar, M: VelocityModel<T>>(
    model: &M,
    examples: &[Example<T>],
) -> Result<(f64, f64), ModelError> {
    let mut loss = 0.0;
    let mut floor = 0.0;
    for ex in examples {
        let pred = model.predict(&ex.input)?;
        let (l, _) = masked_bce(&pred, &ex.target, &ex.mask, Reduction::Sum)?;
        loss += l.to_f64_lossy();
        floor += bce_entropy_floor(&ex.target, &ex.mask);
    }
    Ok((loss, floor))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// One-based iteration number.
    pub iteration: u64,
    pub lr: f64,
    /// Mean over the batch of per-segment losses.
    pub loss: f64,
    pub val_mae: Option<f64>,
}

impl LogRecord {
    pub const HEADER: &'static str = "iteration\tlr\tloss\tval_mae";

    /// Tab-separated line; `val_mae` is `-` when not validated.
    pub fn to_line(&self) -> String {
        let val = self.val_mae.map_or("-".to_string(), |v| format!("{v:.6}"));
        format!("{}\t{:e}\t{:.9}\t{}", self.iteration, self.lr, self.loss, val)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: u64,
    pub log: Vec<LogRecord>,
    /// `(iteration, validation MAE)` of the retained checkpoint.
    pub best: Option<(u64, f64)>,
    pub skipped: Vec<String>,
}

impl TrainState {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }

    pub fn validations(&self) -> Vec<(u64, f64)> {
        self.log
            .iter()
            .filter_map(|r| r.val_mae.map(|v| (r.iteration, v)))
            .collect()
    }

    pub fn log_text(&self) -> String {
        let mut s = String::from(LogRecord::HEADER);
        s.push('\n');
        for r in &self.log {
            let _ = writeln!(s, "{}", r.to_line());
        }
        s
    }
}

pub struct TrainOutcome<M> {
    pub state: TrainState,
    /// Parameters with the lowest validation MAE (the final ones when there
    /// is no validation data).
    pub best: M,
    pub last: M,
    pub best_checkpoint: Vec<u8>,
    pub last_checkpoint: Vec<u8>,
}

/// Where [`train`] writes `best.ckpt`, `last.ckpt` and `train.log`.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub dir: Option<PathBuf>,
}

impl Outputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dir: Some(dir.to_path_buf()),
        }
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), FormatError> {
        match &self.dir {
            Some(d) => write_file(&d.join(name), bytes),
            None => Ok(()),
        }
    }
}

fn checkpoint_meta(cfg: &TrainConfig, iteration: u64, val: Option<f64>, kind: &str) -> serde_json::Value {
    serde_json::json!({
        "kind": kind,
        "iteration": iteration,
        "seed": cfg.seed,
        "batch_size": cfg.batch_size,
        "val_mae": val,
    })
}

/// Trains `model` in place of a copy and returns the best and last
/// parameters. Deterministic given the seed, data and configuration.
pub fn train<T: Scalar, M: VelocityModel<T>>(
    model: M,
    train_set: &[Example<T>],
    val_set: &[Example<T>],
    cfg: &TrainConfig,
    out: &Outputs,
) -> Result<TrainOutcome<M>, TrainError> {
    cfg.validate()?;
    let mut skipped = Vec::new();
    let mut usable = Vec::new();
    for ex in train_set {
        match ex.usable(&model) {
            Ok(()) => usable.push(ex),
            Err(reason) => {
                warn!("skipping training example {}: {reason}", ex.id);
                skipped.push(ex.id.clone());
            }
        }
    }
    if usable.is_empty() {
        return Err(TrainError::NoData);
    }
    let val: Vec<Example<T>> = val_set
        .iter()
        .filter(|ex| match ex.usable(&model) {
            Ok(()) => true,
            Err(reason) => {
                warn!("skipping validation example {}: {reason}", ex.id);
                false
            }
        })
        .cloned()
        .collect();
    let arch = model.arch();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::<T>::new(cfg.adam.clone());
    let mut model = model;
    let mut best_model = model.clone();
    let mut best: Option<(u64, f64)> = None;
    let mut best_checkpoint = Vec::new();
    let mut log = Vec::with_capacity(cfg.iterations as usize);
    let inv_batch = T::lit(1.0 / cfg.batch_size as f64);
    let mut log_text = String::from(LogRecord::HEADER);
    log_text.push('\n');

    for it in 0..cfg.iterations {
        let lr = adam.current_lr();
        let mut grads = model.zeros_like();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let ex = usable[rng.random_range(0..usable.len())];
            let (l, g) = model.loss_and_grad(&ex.input, &ex.target, &ex.mask, cfg.reduction)?;
            loss_sum += l.to_f64_lossy();
            accumulate(&mut grads, &g);
        }
        scale_params(&mut grads, inv_batch);
        if let Some(max) = cfg.clip_norm {
            let norm = global_norm(&grads);
            if norm > max {
                scale_params(&mut grads, T::lit(max / norm));
            }
        }
        adam.step(&mut model, &grads).map_err(|source| TrainError::Step {
            iteration: it + 1,
            source,
        })?;
        let iteration = it + 1;
        let mut record = LogRecord {
            iteration,
            lr,
            loss: loss_sum / cfg.batch_size as f64,
            val_mae: None,
        };
        if iteration % cfg.validate_every == 0 || iteration == cfg.iterations {
            if let Some(mae) = validate(&model, &val, cfg.scale, cfg.onset_read)? {
                record.val_mae = Some(mae);
                info!("iteration {iteration}: loss {:.4}, validation MAE {mae:.3}", record.loss);
                if best.is_none_or(|(_, b)| mae < b) {
                    best = Some((iteration, mae));
                    best_model = model.clone();
                    best_checkpoint = save_checkpoint(
                        &arch,
                        &model,
                        Some(&adam),
                        &checkpoint_meta(cfg, iteration, Some(mae), "best"),
                    );
                    out.write("best.ckpt", &best_checkpoint)?;
                }
            }
        }
        let _ = writeln!(log_text, "{}", record.to_line());
        log.push(record);
    }
    out.write("train.log", log_text.as_bytes())?;
    let last_checkpoint = save_checkpoint(
        &arch,
        &model,
        Some(&adam),
        &checkpoint_meta(cfg, cfg.iterations, None, "last"),
    );
    out.write("last.ckpt", &last_checkpoint)?;
    if best.is_none() {
        best_model = model.clone();
        best_checkpoint = last_checkpoint.clone();
        out.write("best.ckpt", &best_checkpoint)?;
    }
    Ok(TrainOutcome {
        state: TrainState {
            iteration: cfg.iterations,
            log,
            best,
            skipped,
        },
        best: best_model,
        last: model,
        best_checkpoint,
        last_checkpoint,
    })
}
