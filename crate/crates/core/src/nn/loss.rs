use log::warn;
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{shape_err, NnError};
use crate::Scalar;

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over the masked cells.
    #[default]
    Sum,
    /// Mean over the masked cells; 0 for an empty mask.
    Mean,
}

/// Binary cross-entropy over the cells where `mask == 1`.
///
/// Returns the loss and its gradient with respect to `pred`. The gradient is
/// exactly zero wherever the mask is zero. At clamped cells the gradient is
/// evaluated at the clamped prediction so saturated outputs still get a
/// signal.
pub fn masked_bce<T: Scalar>(
    pred: &Array2<T>,
    target: &Array2<T>,
    mask: &Array2<u8>,
    reduction: Reduction,
) -> Result<(T, Array2<T>), NnError> {
    if pred.shape() != target.shape() {
        return Err(shape_err("masked_bce target", pred.shape(), target.shape()));
    }
    if pred.shape() != mask.shape() {
        return Err(shape_err("masked_bce mask", pred.shape(), mask.shape()));
    }
    let lo = T::lit(BCE_CLAMP);
    let hi = T::one() - lo;
    let one = T::one();
    let mut loss = T::zero();
    let mut count = 0usize;
    let mut grad = Array2::<T>::zeros(pred.raw_dim());
    Zip::from(&mut grad)
        .and(pred)
        .and(target)
        .and(mask)
        .for_each(|g, &p, &y, &m| {
            if m == 0 {
                return;
            }
            count += 1;
            let p = p.max(lo).min(hi);
            loss -= y * p.ln() + (one - y) * (one - p).ln();
            *g = (p - y) / (p * (one - p));
        });
    match reduction {
        Reduction::Sum => Ok((loss, grad)),
        Reduction::Mean if count == 0 => {
            warn!("mean-reduced BCE over an empty mask is defined as 0");
            Ok((T::zero(), grad))
        }
        Reduction::Mean => {
            let n = T::lit(count as f64);
            grad.mapv_inplace(|g| g / n);
            Ok((loss / n, grad))
        }
    }
}

/// The smallest value [`masked_bce`] (sum reduction) can take for these
/// targets: the summed binary entropy of the masked targets.
pub fn bce_entropy_floor<T: Scalar>(target: &Array2<T>, mask: &Array2<u8>) -> f64 {
    Zip::from(target)
        .and(mask)
        .fold(0.0, |acc, &y, &m| {
            if m == 0 {
                return acc;
            }
            let y = y.to_f64_lossy().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            acc - (y * y.ln() + (1.0 - y) * (1.0 - y).ln())
        })
}
