//! Feed-forward stacks built from the fixed layer set.

use crate::error::{invalid, Result};
use crate::layers::{
    conv_backward_with, conv_forward, deconv_backward_with, deconv_forward, dropout_backward, dropout_forward,
    gap_backward, gap_forward, relu_backward, relu_forward, ConvLayer, DeconvLayer,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Deconv(DeconvLayer),
    Relu,
    Dropout(f64),
    Gap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub layer: Layer,
}

/// Forward-pass mode. Dropout masks in training are derived from `seed`
/// and the layer position, so a pass is reproducible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Infer,
}

/// SplitMix64 finalizer; derives independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Values recorded by a forward pass for use in the backward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    inputs: Vec<Tensor>,
    masks: Vec<Option<Tensor>>,
    pub output: Tensor,
}

impl Activations {
    /// Input seen by layer `i`.
    pub fn input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential {
    pub layers: Vec<NamedLayer>,
}

impl Sequential {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer) -> &mut Self {
        self.layers.push(NamedLayer {
            name: name.into(),
            layer,
        });
        self
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name).map(|l| &l.layer)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name).map(|l| &mut l.layer)
    }

    pub fn conv(&self, name: &str) -> Option<&ConvLayer> {
        match self.layer(name) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self, name: &str) -> Option<&mut ConvLayer> {
        match self.layer_mut(name) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Activations> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let (next, mask) = apply(&l.layer, &cur, mode, i)?;
            inputs.push(cur);
            masks.push(mask);
            cur = next;
        }
        Ok(Activations {
            inputs,
            masks,
            output: cur,
        })
    }

    /// Forward pass without recording activations.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, Mode::Infer)
    }

    pub fn run(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            cur = apply(&l.layer, &cur, mode, i)?.0;
        }
        Ok(cur)
    }

    /// Backpropagates `grad_out`, accumulating parameter gradients into the
    /// layers' gradient buffers. Returns the input gradient when requested.
    pub fn backward(&mut self, acts: &Activations, grad_out: &Tensor, want_input: bool) -> Result<Option<Tensor>> {
        if acts.inputs.len() != self.layers.len() {
            return Err(invalid("activations were recorded by a different network"));
        }
        let mut grad = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let need_input = want_input || i > 0;
            let x = &acts.inputs[i];
            grad = match &mut self.layers[i].layer {
                Layer::Conv(c) => {
                    let g = conv_backward_with(x, c, &grad, need_input)?;
                    accumulate(&mut c.weight, &g.weight);
                    accumulate(&mut c.bias, &g.bias);
                    match g.input {
                        Some(t) => t,
                        None => return Ok(None),
                    }
                }
                Layer::Deconv(d) => {
                    let g = deconv_backward_with(x, d, &grad, need_input)?;
                    accumulate(&mut d.weight, &g.weight);
                    accumulate(&mut d.bias, &g.bias);
                    match g.input {
                        Some(t) => t,
                        None => return Ok(None),
                    }
                }
                Layer::Relu => relu_backward(x, &grad)?,
                Layer::Dropout(_) => match &acts.masks[i] {
                    Some(m) => dropout_backward(m, &grad)?,
                    None => grad,
                },
                Layer::Gap => gap_backward(x.shape(), &grad)?,
            };
        }
        Ok(Some(grad))
    }

    /// Named parameter tensors in a stable order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            match &l.layer {
                Layer::Conv(c) => {
                    out.push((format!("{}.weight", l.name), &c.weight));
                    out.push((format!("{}.bias", l.name), &c.bias));
                }
                Layer::Deconv(d) => {
                    out.push((format!("{}.weight", l.name), &d.weight));
                    out.push((format!("{}.bias", l.name), &d.bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match &mut l.layer {
                Layer::Conv(c) => {
                    out.push((format!("{}.weight", l.name), &mut c.weight));
                    out.push((format!("{}.bias", l.name), &mut c.bias));
                }
                Layer::Deconv(d) => {
                    out.push((format!("{}.weight", l.name), &mut d.weight));
                    out.push((format!("{}.bias", l.name), &mut d.bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn clear_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.clear_grad();
        }
    }
}

fn accumulate(param: &mut Tensor, g: &Tensor) {
    for (a, b) in param.grad_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn apply(layer: &Layer, x: &Tensor, mode: Mode, index: usize) -> Result<(Tensor, Option<Tensor>)> {
    Ok(match layer {
        Layer::Conv(c) => (conv_forward(x, c)?, None),
        Layer::Deconv(d) => (deconv_forward(x, d)?, None),
        Layer::Relu => (relu_forward(x), None),
        Layer::Dropout(rate) => match mode {
            Mode::Train { seed } => {
                let (y, m) = dropout_forward(x, *rate, mix_seed(seed, index as u64), true)?;
                (y, Some(m))
            }
            Mode::Infer => (x.clone(), None),
        },
        Layer::Gap => (gap_forward(x), None),
    })
}
