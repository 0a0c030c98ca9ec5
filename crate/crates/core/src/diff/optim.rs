//! Named parameter tensors and Adam with global-norm clipping and decoupled
//! weight decay.

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
    pub step_count: u64,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let (r, c) = (value.rows, value.cols);
        ParamTensor {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
            step_count: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub accumulation_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 10.0,
            accumulation_steps: 32,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::config("clip_norm must be > 0"));
        }
        if self.accumulation_steps < 1 {
            return Err(Error::config("accumulation_steps must be >= 1"));
        }
        Ok(())
    }
}

/// An ordered, name-addressable set of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.tensors.push(ParamTensor::new(name, value));
        self.tensors.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn value(&self, idx: usize) -> &Matrix {
        &self.tensors[idx].value
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.grad.scale_assign(s);
        }
    }
}

/// One Adam update over the listed tensors.
///
/// Gradients are assumed to already be averaged over the accumulation window.
/// Order of operations: global-norm clip, decoupled weight decay on the value,
/// bias-corrected moment update, gradient reset.
pub fn adam_step(set: &mut ParamSet, indices: &[usize], cfg: &AdamConfig) -> Result<()> {
    for &i in indices {
        let t = &set.tensors[i];
        if !t.grad.is_finite() {
            return Err(Error::NonFinite(t.name.clone()));
        }
    }

    let total_sq: f64 = indices
        .iter()
        .map(|&i| set.tensors[i].grad.frobenius_sq())
        .sum();
    let norm = total_sq.sqrt();
    let clip_scale = if norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };

    for &i in indices {
        let t = &mut set.tensors[i];
        t.step_count += 1;
        let step = t.step_count as i32;
        let bias1 = 1.0 - cfg.beta1.powi(step);
        let bias2 = 1.0 - cfg.beta2.powi(step);

        if cfg.weight_decay != 0.0 {
            t.value
                .scale_assign(1.0 - cfg.learning_rate * cfg.weight_decay);
        }
        for j in 0..t.value.data.len() {
            let g = t.grad.data[j] * clip_scale;
            t.adam_m.data[j] = cfg.beta1 * t.adam_m.data[j] + (1.0 - cfg.beta1) * g;
            t.adam_v.data[j] = cfg.beta2 * t.adam_v.data[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = t.adam_m.data[j] / bias1;
            let v_hat = t.adam_v.data[j] / bias2;
            t.value.data[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    set.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_with(grad: &[f64]) -> (ParamSet, usize) {
        let mut s = ParamSet::new();
        let idx = s.add("w", Matrix::row_vec(&[1.0, -2.0, 0.5]));
        s.tensors[idx].grad = Matrix::row_vec(grad);
        (s, idx)
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let (mut s, idx) = set_with(&[0.0, 0.0, 0.0]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let before = s.tensors[idx].value.clone();
        adam_step(&mut s, &[idx], &cfg).unwrap();
        assert_eq!(before, s.tensors[idx].value);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        // At t=1 with bias correction, update ≈ -lr·sign(g) when |g| >> eps.
        let (mut s, idx) = set_with(&[3.0, -0.7, 0.2]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            learning_rate: 1e-3,
            ..AdamConfig::default()
        };
        let before = s.tensors[idx].value.clone();
        adam_step(&mut s, &[idx], &cfg).unwrap();
        for j in 0..3 {
            let delta = s.tensors[idx].value.data[j] - before.data[j];
            let sign = [3.0f64, -0.7, 0.2][j].signum();
            assert!((delta + cfg.learning_rate * sign).abs() < 1e-6 * cfg.learning_rate + 1e-9);
        }
    }

    #[test]
    fn clipping_halves_gradient_at_double_norm() {
        // global norm 20 with clip 10 → effective gradient halved
        let (mut s, idx) = set_with(&[20.0, 0.0, 0.0]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut s, &[idx], &cfg).unwrap();
        // first moment holds (1-beta1)·clipped gradient
        assert!((s.tensors[idx].adam_m.data[0] - 0.1 * 10.0).abs() < 1e-12);
    }

    #[test]
    fn grads_zeroed_after_step() {
        let (mut s, idx) = set_with(&[1.0, 1.0, 1.0]);
        adam_step(&mut s, &[idx], &AdamConfig::default()).unwrap();
        assert!(s.tensors[idx].grad.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let (mut s, idx) = set_with(&[f64::NAN, 0.0, 0.0]);
        let err = adam_step(&mut s, &[idx], &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("'w'"));
    }
}
