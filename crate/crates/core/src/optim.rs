//! Mini-batch SGD with a cosine-annealed learning rate.

use crate::tensor::Tensor;

/// `lr · ½(1 + cos(π t / t_max))`, reaching zero at `t = t_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        CosineSchedule {
            base_lr,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Plain SGD, with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Updates `params[i] -= lr · v[i]` with `v = momentum·v + grads[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.momentum == 0.0 {
            for (p, g) in params.iter_mut().zip(grads) {
                p.axpy(-lr, g);
            }
            return;
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = self.momentum * *vv + gv;
            }
            p.axpy(-lr, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule::new(0.003, 100);
        assert_eq!(s.lr(0), 0.003);
        assert!((s.lr(50) - 0.0015).abs() < 1e-15);
        assert!(s.lr(100).abs() < 1e-18);
        assert!(s.lr(25) > s.lr(75));
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![0.5, -1.0]);
        Sgd::new(0.0).step(&mut [&mut p], std::slice::from_ref(&g), 0.1);
        assert_eq!(p.data(), &[0.95, 2.1]);

        let mut q = Tensor::vector(vec![0.0]);
        let mut opt = Sgd::new(0.9);
        let g = Tensor::vector(vec![1.0]);
        opt.step(&mut [&mut q], std::slice::from_ref(&g), 1.0);
        opt.step(&mut [&mut q], &[g], 1.0);
        assert!((q.data()[0] + 2.9).abs() < 1e-12);
    }
}
