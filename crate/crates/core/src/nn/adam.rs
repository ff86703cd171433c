//! Adam with classical L2-style weight decay added to the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 5e-4, weight_decay: 1e-8, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(cfg: AdamConfig, param_lens: &[usize]) -> Self {
        AdamState {
            cfg,
            step: 0,
            m: param_lens.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: param_lens.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    /// One bias-corrected update over all parameters, reading each tensor's
    /// gradient buffer.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let lr = S::of(self.cfg.learning_rate);
        let wd = S::of(self.cfg.weight_decay);
        let b1 = S::of(self.cfg.beta1);
        let b2 = S::of(self.cfg.beta2);
        let eps = S::of(self.cfg.epsilon);
        let corr1 = S::one() - S::of(self.cfg.beta1.powi(self.step as i32));
        let corr2 = S::one() - S::of(self.cfg.beta2.powi(self.step as i32));
        for (pi, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            if m.len() != p.len() {
                return Err(Error::Shape(format!(
                    "adam moment buffer {pi} has length {}, parameter has {}",
                    m.len(),
                    p.len()
                )));
            }
            let grad = p.grad.as_ref().ok_or_else(|| {
                Error::Shape(format!("parameter {pi} has no gradient buffer"))
            })?;
            for i in 0..grad.len() {
                let g = grad[i] + wd * p.data[i];
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                let mhat = m[i] / corr1;
                let vhat = v[i] / corr2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_leaves_params() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![1.0, -2.0]).unwrap().with_grad();
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut state = AdamState::new(cfg, &[2]);
        state.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_size_is_learning_rate() {
        // bias-corrected Adam at t=1 with constant gradient g:
        // mhat = g, vhat = g^2, step = lr * g / (|g| + eps) ~ lr * sign(g)
        let mut p = Tensor::<f64>::from_vec(&[1], vec![0.0]).unwrap().with_grad();
        p.grad_mut()[0] = 0.3;
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut state = AdamState::new(cfg, &[1]);
        state.step(&mut [&mut p]).unwrap();
        assert!((p.data[0] + cfg.learning_rate).abs() < 1e-7);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut p = Tensor::<f64>::from_vec(&[3], vec![0.5, -0.5, 1.0]).unwrap().with_grad();
            let mut state = AdamState::new(AdamConfig::default(), &[3]);
            for step in 0..10 {
                for (i, g) in p.grad_mut().iter_mut().enumerate() {
                    *g = (step as f64 * 0.1 + i as f64).sin();
                }
                state.step(&mut [&mut p]).unwrap();
            }
            p.data
        };
        assert_eq!(run(), run());
    }
}
