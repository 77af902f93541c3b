use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{shape_err, uniform, view_d, view_mut_d, NnError, Parameterized};
use crate::Scalar;

/// Fully connected layer, `y = x W^T + b`, applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `out x in`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LinearCache<T> {
    input: Array2<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = uniform(rng, &[outputs, inputs], bound)
            .into_dimensionality()
            .expect("2-d");
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.outputs())
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<(Array2<T>, LinearCache<T>), NnError> {
        if x.ncols() != self.inputs() {
            return Err(shape_err("linear", &[x.nrows(), self.inputs()], x.shape()));
        }
        let y = x.dot(&self.weight.t()) + &self.bias;
        Ok((y, LinearCache { input: x.clone() }))
    }

    pub fn backward(&self, cache: &LinearCache<T>, grad_out: &Array2<T>) -> Result<(Array2<T>, Self), NnError> {
        if cache.input.ncols() != self.inputs() {
            return Err(NnError::Cache {
                layer: "linear".into(),
                reason: format!("cached input width {} vs layer {}", cache.input.ncols(), self.inputs()),
            });
        }
        let expected = [cache.input.nrows(), self.outputs()];
        if grad_out.shape() != expected {
            return Err(shape_err("linear", &expected, grad_out.shape()));
        }
        let grad_in = grad_out.dot(&self.weight);
        let grads = Self {
            weight: grad_out.t().dot(&cache.input),
            bias: grad_out.sum_axis(Axis(0)),
        };
        Ok((grad_in, grads))
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            ("weight".into(), view_d(&self.weight)),
            ("bias".into(), view_d(&self.bias)),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            ("weight".into(), view_mut_d(&mut self.weight)),
            ("bias".into(), view_mut_d(&mut self.bias)),
        ]
    }
}
