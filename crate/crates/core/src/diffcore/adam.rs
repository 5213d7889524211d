use serde::{Deserialize, Serialize};

use super::real::Real;
use super::tensor::ParamSet;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        AdamState { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Applies one bias-corrected Adam update.
    pub fn step<G: AsRef<[T]>>(&mut self, params: &mut ParamSet<T>, grads: &[G]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return shape_err("adam: gradient list does not match parameters");
        }
        for (g, m) in grads.iter().zip(&self.m) {
            if g.as_ref().len() != m.len() {
                return shape_err("adam: gradient length mismatch");
            }
        }
        let c = self.config;
        let mut clip = T::one();
        if let Some(max_norm) = c.clip_norm {
            let norm: f64 = grads.iter().flat_map(|g| g.as_ref().iter()).map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
            if norm > max_norm {
                clip = T::of(max_norm / norm);
            }
        }
        self.step += 1;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step.min(i32::MAX as u64) as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step.min(i32::MAX as u64) as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i].as_ref());
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Tensor::new(vec![3], vec![0.1, -2.5, 1e-9]).unwrap());
        let before = ps.clone();
        let mut adam = AdamState::new(&ps, AdamConfig::with_lr(0.0));
        adam.step(&mut ps, &[vec![1.0, -3.0, 0.5]]).unwrap();
        adam.step(&mut ps, &[vec![7.0, 0.0, -1e6]]).unwrap();
        for (a, b) in ps.tensors()[0].data().iter().zip(before.tensors()[0].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(adam.step, 2);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut adam = AdamState::new(&ps, AdamConfig::with_lr(0.1));
        adam.step(&mut ps, &[vec![4.0, -0.01]]).unwrap();
        let d = ps.tensors()[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 1.1).abs() < 1e-4);
    }
}
