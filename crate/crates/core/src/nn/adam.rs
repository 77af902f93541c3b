use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{NnError, Parameterized};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate is multiplied by `decay_rate` every `decay_steps` steps.
    pub decay_rate: f64,
    pub decay_steps: u64,
    /// L2 penalty added to the gradient; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_rate: 0.9,
            decay_steps: 10_000,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction and a step-decay learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    names: Vec<String>,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate used by the update with zero-based index `iteration`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let intervals = iteration / self.config.decay_steps.max(1);
        self.config.base_lr * self.config.decay_rate.powi(intervals.min(i32::MAX as u64) as i32)
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &ArrayD<T>, &ArrayD<T>)> {
        self.names
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|(n, (m, v))| (n.as_str(), m, v))
    }

    /// Restores accumulated state, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, moments: Vec<(String, ArrayD<T>, ArrayD<T>)>) {
        self.step = step;
        self.names.clear();
        self.m.clear();
        self.v.clear();
        for (n, m, v) in moments {
            self.names.push(n);
            self.m.push(m);
            self.v.push(v);
        }
    }

    /// Applies one update. Gradients are checked for finiteness before any
    /// parameter changes.
    pub fn step<P: Parameterized<T>>(&mut self, params: &mut P, grads: &P) -> Result<(), NnError> {
        let grads = grads.params();
        for (name, g) in &grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite(name.clone()));
            }
        }
        let mut slots = params.params_mut();
        if self.names.is_empty() {
            self.names = slots.iter().map(|(n, _)| n.clone()).collect();
            self.m = slots.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
            self.v = self.m.clone();
        }
        let layout_ok = slots.len() == self.names.len()
            && slots
                .iter()
                .zip(&self.names)
                .zip(&self.m)
                .all(|(((n, p), name), m)| n == name && p.shape() == m.shape());
        if !layout_ok {
            return Err(NnError::Checkpoint("optimizer state does not match the parameters".into()));
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(lr);
        let eps = T::lit(c.eps);
        let wd = T::lit(c.weight_decay);
        for (((_, p), (_, g)), (m, v)) in slots
            .iter_mut()
            .zip(&grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(p.view_mut())
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + wd * *p;
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::array;

    #[test]
    fn schedule() {
        let adam = Adam::<f64>::new(AdamConfig::default());
        assert_eq!(adam.lr_at(0), 1e-4);
        assert!((adam.lr_at(15_000) - 9e-5).abs() < 1e-18);
        assert!((adam.lr_at(25_000) - 8.1e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_first_step_is_noop() {
        let mut p = Linear::<f64>::zeros(2, 2);
        p.weight = array![[1.0, 2.0], [3.0, 4.0]];
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default());
        let zeros = p.zeros_like();
        adam.step(&mut p, &zeros).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Linear::<f64>::zeros(2, 1);
        let mut g = p.zeros_like();
        g.bias[0] = f64::NAN;
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default());
        assert_eq!(adam.step(&mut p, &g), Err(NnError::NonFinite("bias".into())));
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 0);
    }
}
