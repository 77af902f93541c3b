//! Layers with explicit forward/backward passes, the onset-masked BCE loss,
//! Adam with step decay, and checkpoint files.
//!
//! Every layer's gradient has the same type as the layer itself, so a
//! gradient is just another parameter set and optimizers can zip the two.

mod activation;
mod adam;
pub mod checkpoint;
mod conv;
mod linear;
mod loss;
mod lstm;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar};
pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use conv::{AvgPoolFreq, Conv2d, Conv2dCache};
pub use linear::{Linear, LinearCache};
pub use loss::{bce_entropy_floor, masked_bce, Reduction, BCE_CLAMP};
pub use lstm::{BiLstm, BiLstmCache, Lstm, LstmCache};

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Dimension, IxDyn};
use rand::Rng;
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{layer}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{layer}: cache does not match this call ({reason})")]
    Cache { layer: String, reason: String },
    #[error("non-finite gradient in parameter {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint architecture mismatch: expected digest {expected}, found {found}")]
    Architecture { expected: String, found: String },
}

pub(crate) fn shape_err(layer: &str, expected: &[usize], actual: &[usize]) -> NnError {
    NnError::Shape {
        layer: layer.to_string(),
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

/// Named parameter tensors enumerable in a stable order.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)>;
    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Copies all parameter values out, in order.
    fn to_owned_params(&self) -> Vec<(String, ArrayD<T>)> {
        self.params()
            .into_iter()
            .map(|(n, p)| (n, p.to_owned()))
            .collect()
    }

    /// Overwrites parameters from `(name, values)` pairs; names and shapes
    /// must match exactly.
    fn assign_params(&mut self, values: &[(String, ArrayD<T>)]) -> Result<(), NnError> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                slots.len(),
                values.len()
            )));
        }
        for ((name, slot), (vname, v)) in slots.iter().zip(values) {
            if name != vname || slot.shape() != v.shape() {
                return Err(NnError::Checkpoint(format!(
                    "parameter {name}{:?} does not match {vname}{:?}",
                    slot.shape(),
                    v.shape()
                )));
            }
        }
        for ((_, slot), (_, v)) in slots.iter_mut().zip(values) {
            slot.assign(v);
        }
        Ok(())
    }
}

pub(crate) fn push_prefixed<'a, T>(
    out: &mut Vec<(String, T)>,
    prefix: &str,
    inner: Vec<(String, T)>,
) {
    out.extend(inner.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)));
}

pub(crate) fn view_d<'a, T, D: Dimension>(a: &'a ndarray::Array<T, D>) -> ArrayViewD<'a, T> {
    a.view().into_dyn()
}

pub(crate) fn view_mut_d<'a, T, D: Dimension>(a: &'a mut ndarray::Array<T, D>) -> ArrayViewMutD<'a, T> {
    a.view_mut().into_dyn()
}

/// Uniform initialization in `(-bound, bound)`.
pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(rng.random_range(-bound..bound)))
}

/// Adds `src` into `dst` parameter by parameter (gradient accumulation).
pub fn accumulate<T: Scalar, P: Parameterized<T>>(dst: &mut P, src: &P) {
    for ((_, mut d), (_, s)) in dst.params_mut().into_iter().zip(src.params()) {
        d += &s;
    }
}

/// Multiplies every parameter by `k`.
pub fn scale_params<T: Scalar, P: Parameterized<T>>(p: &mut P, k: T) {
    for (_, mut d) in p.params_mut() {
        d.mapv_inplace(|v| v * k);
    }
}

pub fn global_norm<T: Scalar, P: Parameterized<T>>(p: &P) -> f64 {
    p.params()
        .iter()
        .flat_map(|(_, a)| a.iter().map(|v| v.to_f64_lossy().powi(2)))
        .sum::<f64>()
        .sqrt()
}
