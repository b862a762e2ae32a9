//! First-order optimizers over flat parameter lists.

use std::iter::zip;

use crate::{Element, Tensor};

/// Adam state for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(params: &[Tensor<T>], lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter count mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let step_size = T::from_f64_lossy(self.lr / bc1);
        let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
        let eps = T::from_f64_lossy(self.eps);
        for (((p, g), m), v) in zip(zip(zip(params.iter_mut(), grads), &mut self.m), &mut self.v) {
            let Some(g) = g else { continue };
            for (((pi, &gi), mi), vi) in zip(
                zip(zip(p.data_mut().iter_mut(), g.data()), m.data_mut()),
                v.data_mut(),
            ) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi = *pi - step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// SGD with classical momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(params: &[Tensor<T>], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(params.len(), self.velocity.len(), "optimizer/parameter count mismatch");
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let lr = T::from_f64_lossy(lr);
        for ((p, g), vel) in zip(zip(params.iter_mut(), grads), &mut self.velocity) {
            let Some(g) = g else { continue };
            for ((pi, &gi), vi) in zip(zip(p.data_mut().iter_mut(), g.data()), vel.data_mut()) {
                let d = gi + wd * *pi;
                *vi = mu * *vi + d;
                *pi = *pi - lr * *vi;
            }
        }
    }
}

/// Polynomial learning-rate decay `base * (1 - it/max)^power`.
pub fn poly_lr(base: f64, iteration: usize, max_iterations: usize, power: f64) -> f64 {
    if max_iterations == 0 {
        return base;
    }
    let frac = (iteration.min(max_iterations) as f64) / max_iterations as f64;
    base * (1.0 - frac).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = vec![Tensor::<f64>::from_vec(&[2], vec![1.0, -1.0])];
        let mut opt = Adam::new(&p, 0.1, 0.9, 0.999);
        let g = vec![Some(Tensor::from_vec(&[2], vec![2.0, -3.0]))];
        opt.update(&mut p, &g);
        // First Adam step has magnitude lr regardless of gradient scale.
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = vec![Tensor::<f64>::from_vec(&[1], vec![0.0])];
        let mut opt = Sgd::new(&p, 0.9, 0.0);
        let g = vec![Some(Tensor::from_vec(&[1], vec![1.0]))];
        opt.update(&mut p, &g, 0.1);
        opt.update(&mut p, &g, 0.1);
        assert!((p[0].data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn poly_lr_endpoints() {
        assert_eq!(poly_lr(0.01, 0, 100, 0.9), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100, 0.9), 0.0);
    }
}
