//! Momentum SGD.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// One momentum-SGD update: `v <- momentum*v - lr*g; p <- p + v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(invalid(format!(
            "sgd_step length mismatch: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Velocity buffers keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies the accumulated gradient of `param` and clears it.
    pub fn step(&mut self, name: &str, param: &mut Tensor, lr: f64) -> Result<()> {
        let len = param.len();
        let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; len]);
        let (data, grad) = param.data_and_grad_mut();
        sgd_step(data, grad, lr, self.momentum, v)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[3.0, 4.0], 0.0, 0.9, &mut v).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.5, 0.5];
        sgd_step(&mut p, &[3.0, 4.0], 0.1, 0.0, &mut v).unwrap();
        assert!((p[0] - 0.7).abs() < 1e-15 && (p[1] + 2.4).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_on_parabola() {
        // f(p) = p^2, grad 2p, lr 0.1, momentum 0.9, p0 = 1.
        // step 1: v = -0.2, p = 0.8
        // step 2: v = 0.9*-0.2 - 0.1*1.6 = -0.34, p = 0.46
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        let g = vec![2.0 * p[0]];
        sgd_step(&mut p, &g, 0.1, 0.9, &mut v).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
        let g = vec![2.0 * p[0]];
        sgd_step(&mut p, &g, 0.1, 0.9, &mut v).unwrap();
        assert!((v[0] + 0.34).abs() < 1e-15);
        assert!((p[0] - 0.46).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut p = vec![1.0];
        let mut v = vec![0.0, 0.0];
        assert!(sgd_step(&mut p, &[1.0], 0.1, 0.9, &mut v).is_err());
    }
}
