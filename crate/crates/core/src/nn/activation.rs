use ndarray::{Array, Dimension, Zip};

use super::{shape_err, NnError};
use crate::Scalar;

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar, D: Dimension>(x: &Array<T, D>) -> Array<T, D> {
    x.mapv(sigmoid_scalar)
}

/// Backward through a sigmoid given its output `y`.
pub fn sigmoid_backward<T: Scalar, D: Dimension>(
    y: &Array<T, D>,
    grad_out: &Array<T, D>,
) -> Result<Array<T, D>, NnError> {
    if y.shape() != grad_out.shape() {
        return Err(shape_err("sigmoid", y.shape(), grad_out.shape()));
    }
    Ok(Zip::from(y)
        .and(grad_out)
        .map_collect(|&y, &g| g * y * (T::one() - y)))
}

pub fn relu<T: Scalar, D: Dimension>(x: &Array<T, D>) -> Array<T, D> {
    x.mapv(|v| v.max(T::zero()))
}

/// Backward through a ReLU given its input `x`.
pub fn relu_backward<T: Scalar, D: Dimension>(
    x: &Array<T, D>,
    grad_out: &Array<T, D>,
) -> Result<Array<T, D>, NnError> {
    if x.shape() != grad_out.shape() {
        return Err(shape_err("relu", x.shape(), grad_out.shape()));
    }
    Ok(Zip::from(x)
        .and(grad_out)
        .map_collect(|&x, &g| if x > T::zero() { g } else { T::zero() }))
}
