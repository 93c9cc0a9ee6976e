//! Stochastic gradient descent with momentum.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v = momentum * v + grad; p -= lr * v` for every tensor pair.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return shape_err(format!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return shape_err(format!("gradient shape {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut opt = Sgd::new(0.1, 0.9);
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(1.0)];
        opt.step(&mut p, &g).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        opt.step(&mut p, &g).unwrap();
        assert!((p[0].data()[0] - (0.9 - 0.19)).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut opt = Sgd::new(0.0, 0.9);
        let orig = Tensor::new(vec![3], vec![0.3, -1.7, 1e-30]).unwrap();
        let mut p = vec![orig.clone()];
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::new(vec![3], vec![5.0, -2.0, 1.0]).unwrap()])
                .unwrap();
        }
        assert_eq!(p[0], orig);
    }
}
