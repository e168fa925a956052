//! Optimizers: SGD with momentum for weights, Adam for architecture logits.
//!
//! Both read the gradient accumulators held by the tensors they update and
//! keep their state in the iteration order of the tensors passed in, which
//! callers keep stable.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tensor::Tensor;

/// Cosine annealing from `base` to 0 over `total` steps, no restarts.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (PI * t).cos())
}

/// Global L2 norm over all present gradients.
pub fn grad_norm<'a, T: Real>(tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> f64 {
    tensors
        .into_iter()
        .filter_map(|t| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, clip_norm: Option<f64>) -> Self {
        Self {
            momentum,
            clip_norm,
            velocity: Vec::new(),
        }
    }

    /// One update `v ← m·v + g; p ← p − lr·v`. Gradients are rescaled first
    /// when their global norm exceeds `clip_norm`. Returns the pre-clip norm.
    pub fn step<T: Real>(&mut self, params: &mut [&mut Tensor<T>], lr: f64) -> f64 {
        let norm = grad_norm(params.iter().map(|t| &**t));
        let scale = match self.clip_norm {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        for (t, v) in params.iter_mut().zip(&mut self.velocity) {
            let Some(g) = t.take_grad() else { continue };
            for ((p, vel), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vel = self.momentum * *vel + gi.as_f64() * scale;
                *p = T::of(p.as_f64() - lr * *vel);
            }
        }
        norm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<T: Real>(&mut self, params: &mut [&mut Tensor<T>]) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((t, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = t.take_grad() else { continue };
            for (((p, mi), vi), gi) in t.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g) {
                let g = gi.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *p = T::of(p.as_f64() - self.lr * mh / (vh.sqrt() + self.eps));
            }
        }
    }

    /// Drops column `col` from the state of row-major matrix `slot` with
    /// `cols` columns, mirroring a column removal in the parameters.
    pub fn remove_column(&mut self, slot: usize, cols: usize, col: usize) {
        for state in [&mut self.m, &mut self.v] {
            if let Some(s) = state.get_mut(slot) {
                *s = s
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i % cols != col)
                    .map(|(_, &x)| x)
                    .collect();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.04, 0, 10), 0.04);
        assert!(cosine_lr(0.04, 10, 10).abs() < 1e-15);
        assert!((cosine_lr(0.04, 5, 10) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn sgd_clips_to_norm() {
        let mut t = Tensor::<f64>::zeros(vec![2]).with_grad();
        t.accumulate_grad(&[30.0, 40.0]);
        let mut opt = Sgd::new(0.0, Some(5.0));
        let norm = opt.step(&mut [&mut t], 1.0);
        assert_eq!(norm, 50.0);
        assert!((t.data()[0] + 3.0).abs() < 1e-12 && (t.data()[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut t = Tensor::<f64>::zeros(vec![3]).with_grad();
        t.accumulate_grad(&[2.0, -0.5, 0.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut t]);
        assert!((t.data()[0] + 0.1).abs() < 1e-6);
        assert!((t.data()[1] - 0.1).abs() < 1e-6);
        assert_eq!(t.data()[2], 0.0);
    }

    #[test]
    fn adam_column_removal() {
        let mut t = Tensor::<f64>::zeros(vec![2, 3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut t]);
        opt.remove_column(0, 3, 1);
        assert_eq!(opt.m[0].len(), 4);
        assert!((opt.m[0][1] - 0.3).abs() < 1e-12);
    }
}
