//! Central finite-difference verification of analytic gradients.

use crate::error::{invalid, Result};
use crate::layers::{mse_loss, softmax_xent};
use crate::network::{Mode, Sequential};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that entries whose true
/// gradient is at rounding-noise level compare absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// A scalar function of some parameter tensors with an analytic gradient.
pub trait Objective {
    fn param_count(&self) -> usize;
    fn param(&mut self, index: usize) -> &mut Tensor;
    fn loss(&mut self) -> Result<f64>;
    /// Analytic gradients, one flat vector per parameter tensor.
    fn gradients(&mut self) -> Result<Vec<Vec<f64>>>;
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Worst relative error between analytic gradients and central differences
/// with step `eps`, over every entry of every parameter.
pub fn grad_check(obj: &mut dyn Objective, eps: f64) -> Result<f64> {
    let analytic = obj.gradients()?;
    if analytic.len() != obj.param_count() {
        return Err(invalid("objective returned the wrong number of gradients"));
    }
    let mut worst: f64 = 0.0;
    for (p, grads) in analytic.iter().enumerate() {
        if grads.len() != obj.param(p).len() {
            return Err(invalid(format!("gradient {} has the wrong length", p)));
        }
        for (i, &a) in grads.iter().enumerate() {
            let orig = obj.param(p).data()[i];
            obj.param(p).data_mut()[i] = orig + eps;
            let up = obj.loss()?;
            obj.param(p).data_mut()[i] = orig - eps;
            let down = obj.loss()?;
            obj.param(p).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Losses for checking a [`Sequential`] end to end.
#[derive(Clone, Debug)]
pub enum CheckLoss {
    Mse(Tensor),
    SoftmaxXent(Vec<usize>),
}

impl CheckLoss {
    pub fn eval(&self, output: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            CheckLoss::Mse(target) => mse_loss(output, target),
            CheckLoss::SoftmaxXent(labels) => softmax_xent(output, labels),
        }
    }
}

/// Checks every parameter of a network on a fixed input. Dropout masks are
/// held fixed by the seed in `mode`.
pub struct NetworkObjective<'a> {
    pub net: &'a mut Sequential,
    pub input: Tensor,
    pub loss: CheckLoss,
    pub mode: Mode,
}

impl Objective for NetworkObjective<'_> {
    fn param_count(&self) -> usize {
        self.net.params().len()
    }

    fn param(&mut self, index: usize) -> &mut Tensor {
        self.net.params_mut().swap_remove(index).1
    }

    fn loss(&mut self) -> Result<f64> {
        let out = self.net.run(&self.input, self.mode)?;
        Ok(self.loss.eval(&out)?.0)
    }

    fn gradients(&mut self) -> Result<Vec<Vec<f64>>> {
        self.net.clear_grad();
        let acts = self.net.forward(&self.input, self.mode)?;
        let (_, g) = self.loss.eval(&acts.output)?;
        self.net.backward(&acts, &g, false)?;
        let grads = self
            .net
            .params()
            .iter()
            .map(|(_, t)| t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        self.net.clear_grad();
        Ok(grads)
    }
}

/// Convenience wrapper: worst relative error over all network parameters.
pub fn grad_check_network(net: &mut Sequential, input: &Tensor, loss: CheckLoss, mode: Mode) -> Result<f64> {
    let mut obj = NetworkObjective {
        net,
        input: input.clone(),
        loss,
        mode,
    };
    grad_check(&mut obj, 1e-5)
}
