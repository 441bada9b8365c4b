//! Layer kernels with forward and backward passes.
//!
//! Convolutions are cross-correlations lowered to matrix products through
//! im2col; transposed convolutions reuse the same lowering with the roles of
//! forward and backward swapped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Shape, Tensor};

/// `c = alpha * op(a) * op(b) + beta * c` on dense row-major slices.
/// `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every slice to exactly the extent the
    // strides address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of a sliding window shared by conv and its transpose.
#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Unfolds one image `(channels, h, w)` into `cols` of shape
    /// `(channels*kh*kw, oh*ow)`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let plane = self.oh * self.ow;
        for c in 0..self.channels {
            let src = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ki) as isize - self.ph as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.sw + kj) as isize - self.pw as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: accumulates `cols` back into `x`.
    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let plane = self.oh * self.ow;
        for c in 0..self.channels {
            let dst = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ki) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        for (ox, v) in line.iter().enumerate() {
                            let ix = (ox * self.sw + kj) as isize - self.pw as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution (cross-correlation) with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// `(out, in, kh, kw)`
    pub weight: Tensor,
    /// `(1, out, 1, 1)`
    pub bias: Tensor,
}

impl ConvLayer {
    /// A layer with zero weights and bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 {
            return Err(invalid("conv layer needs positive channels and kernel"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(invalid("conv stride must be positive"));
        }
        Ok(ConvLayer {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Tensor::zeros(Shape::new(out_channels, in_channels, kernel.0, kernel.1)),
            bias: Tensor::zeros(Shape::new(1, out_channels, 1, 1)),
        })
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    /// Fills weights from N(0, 2/fan_in) and zeroes the bias.
    pub fn init_he(&mut self, rng: &mut impl Rng) {
        let fan_in = self.fan_in();
        he_fill(&mut self.weight, fan_in, rng);
        self.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            out_extent(h, self.kernel.0, self.stride.0, self.padding.0)?,
            out_extent(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn window(&self, x: Shape) -> Result<Window> {
        if x.c != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv",
                expected: format!("input with {} channels", self.in_channels),
                actual: format!("input {} for weights {}", x, self.weight.shape()),
            });
        }
        let (oh, ow) = self.output_hw(x.h, x.w).ok_or_else(|| Error::ShapeMismatch {
            op: "conv",
            expected: format!(
                "input at least {}x{} after padding",
                self.kernel.0, self.kernel.1
            ),
            actual: format!("input {} for weights {}", x, self.weight.shape()),
        })?;
        Ok(Window {
            channels: self.in_channels,
            h: x.h,
            w: x.w,
            kh: self.kernel.0,
            kw: self.kernel.1,
            sh: self.stride.0,
            sw: self.stride.1,
            ph: self.padding.0,
            pw: self.padding.1,
            oh,
            ow,
        })
    }
}

/// Transposed convolution; the mirror of a [`ConvLayer`] with the same
/// kernel, stride and padding. `output_padding` resolves the rounding in
/// the forward size formula.
#[derive(Clone, Debug, PartialEq)]
pub struct DeconvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub output_padding: (usize, usize),
    /// `(in, out, kh, kw)`: the layout of the conv this layer mirrors.
    pub weight: Tensor,
    /// `(1, out, 1, 1)`
    pub bias: Tensor,
}

impl DeconvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        output_padding: (usize, usize),
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 {
            return Err(invalid("deconv layer needs positive channels and kernel"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(invalid("deconv stride must be positive"));
        }
        if output_padding.0 >= stride.0 || output_padding.1 >= stride.1 {
            return Err(invalid("deconv output padding must be smaller than the stride"));
        }
        Ok(DeconvLayer {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            weight: Tensor::zeros(Shape::new(in_channels, out_channels, kernel.0, kernel.1)),
            bias: Tensor::zeros(Shape::new(1, out_channels, 1, 1)),
        })
    }

    /// The deconvolution undoing `conv`'s spatial reduction for inputs of
    /// size `h x w` to that conv.
    pub fn mirror_of(conv: &ConvLayer, h: usize, w: usize) -> Result<Self> {
        let op = |input: usize, k: usize, s: usize, p: usize| (input + 2 * p - k) % s;
        if conv.output_hw(h, w).is_none() {
            return Err(invalid(format!("{}x{} is too small for the mirrored conv", h, w)));
        }
        DeconvLayer::new(
            conv.out_channels,
            conv.in_channels,
            conv.kernel,
            conv.stride,
            conv.padding,
            (
                op(h, conv.kernel.0, conv.stride.0, conv.padding.0),
                op(w, conv.kernel.1, conv.stride.1, conv.padding.1),
            ),
        )
    }

    /// Fan-in of the equivalent forward correlation on the upsampled grid.
    pub fn fan_in(&self) -> usize {
        let per_dim = |k: usize, s: usize| k.div_ceil(s);
        self.in_channels * per_dim(self.kernel.0, self.stride.0) * per_dim(self.kernel.1, self.stride.1)
    }

    pub fn init_he(&mut self, rng: &mut impl Rng) {
        let fan_in = self.fan_in();
        he_fill(&mut self.weight, fan_in, rng);
        self.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let dim = |i: usize, k: usize, s: usize, p: usize, op: usize| {
            let full = (i.checked_sub(1)?) * s + k + op;
            full.checked_sub(2 * p).filter(|&v| v >= 1)
        };
        Some((
            dim(h, self.kernel.0, self.stride.0, self.padding.0, self.output_padding.0)?,
            dim(w, self.kernel.1, self.stride.1, self.padding.1, self.output_padding.1)?,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Window over the *output* grid; its `oh x ow` is the deconv input size.
    fn window(&self, x: Shape) -> Result<Window> {
        if x.c != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "deconv",
                expected: format!("input with {} channels", self.in_channels),
                actual: format!("input {} for weights {}", x, self.weight.shape()),
            });
        }
        let (h, w) = self.output_hw(x.h, x.w).ok_or_else(|| Error::ShapeMismatch {
            op: "deconv",
            expected: "an input producing a non-empty output".into(),
            actual: format!("input {} for weights {}", x, self.weight.shape()),
        })?;
        Ok(Window {
            channels: self.out_channels,
            h,
            w,
            kh: self.kernel.0,
            kw: self.kernel.1,
            sh: self.stride.0,
            sw: self.stride.1,
            ph: self.padding.0,
            pw: self.padding.1,
            oh: x.h,
            ow: x.w,
        })
    }
}

fn he_fill(t: &mut Tensor, fan_in: usize, rng: &mut impl Rng) {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
}

fn check_same(op: &'static str, expected: Shape, actual: Shape) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        });
    }
    Ok(())
}

/// Parameter gradients of a conv or deconv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv_forward(x: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let s = x.shape();
    let win = layer.window(s)?;
    let out_shape = Shape::new(s.n, layer.out_channels, win.oh, win.ow);
    let mut out = Tensor::zeros(out_shape);
    let plane = win.cols();
    let mut cols = if win.is_pointwise() { Vec::new() } else { vec![0.0; win.rows() * plane] };
    let bias = layer.bias.data();
    for n in 0..s.n {
        let dst = out.item_mut(n);
        for (o, b) in bias.iter().enumerate() {
            dst[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = *b);
        }
        let src: &[f64] = if win.is_pointwise() {
            x.item(n)
        } else {
            win.im2col(x.item(n), &mut cols);
            &cols
        };
        gemm(layer.out_channels, win.rows(), plane, layer.weight.data(), false, src, false, dst, 1.0);
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weights and bias.
pub fn conv_backward(x: &Tensor, layer: &ConvLayer, grad_out: &Tensor) -> Result<LayerGrads> {
    conv_backward_with(x, layer, grad_out, true)
}

pub(crate) fn conv_backward_with(
    x: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<LayerGrads> {
    let s = x.shape();
    let win = layer.window(s)?;
    check_same(
        "conv_backward",
        Shape::new(s.n, layer.out_channels, win.oh, win.ow),
        grad_out.shape(),
    )?;
    let plane = win.cols();
    let rows = win.rows();
    let mut gw = Tensor::zeros(layer.weight.shape());
    let mut gb = Tensor::zeros(layer.bias.shape());
    let mut gx = want_input.then(|| Tensor::zeros(s));
    let mut cols = vec![0.0; rows * plane];
    let mut gcols = vec![0.0; rows * plane];
    for n in 0..s.n {
        let go = grad_out.item(n);
        for (o, b) in gb.data_mut().iter_mut().enumerate() {
            *b += go[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        let src: &[f64] = if win.is_pointwise() {
            x.item(n)
        } else {
            win.im2col(x.item(n), &mut cols);
            &cols
        };
        gemm(layer.out_channels, plane, rows, go, false, src, true, gw.data_mut(), 1.0);
        if let Some(gx) = gx.as_mut() {
            if win.is_pointwise() {
                gemm(rows, layer.out_channels, plane, layer.weight.data(), true, go, false, gx.item_mut(n), 0.0);
            } else {
                gemm(rows, layer.out_channels, plane, layer.weight.data(), true, go, false, &mut gcols, 0.0);
                win.col2im(&gcols, gx.item_mut(n));
            }
        }
    }
    Ok(LayerGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

pub fn deconv_forward(x: &Tensor, layer: &DeconvLayer) -> Result<Tensor> {
    let s = x.shape();
    let win = layer.window(s)?;
    let out_shape = Shape::new(s.n, layer.out_channels, win.h, win.w);
    let mut out = Tensor::zeros(out_shape);
    let plane = win.cols();
    let rows = win.rows();
    let mut cols = vec![0.0; rows * plane];
    let out_plane = win.h * win.w;
    for n in 0..s.n {
        gemm(rows, layer.in_channels, plane, layer.weight.data(), true, x.item(n), false, &mut cols, 0.0);
        let dst = out.item_mut(n);
        win.col2im(&cols, dst);
        for (o, b) in layer.bias.data().iter().enumerate() {
            dst[o * out_plane..(o + 1) * out_plane].iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(out)
}

pub fn deconv_backward(x: &Tensor, layer: &DeconvLayer, grad_out: &Tensor) -> Result<LayerGrads> {
    deconv_backward_with(x, layer, grad_out, true)
}

pub(crate) fn deconv_backward_with(
    x: &Tensor,
    layer: &DeconvLayer,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<LayerGrads> {
    let s = x.shape();
    let win = layer.window(s)?;
    check_same(
        "deconv_backward",
        Shape::new(s.n, layer.out_channels, win.h, win.w),
        grad_out.shape(),
    )?;
    let plane = win.cols();
    let rows = win.rows();
    let out_plane = win.h * win.w;
    let mut gw = Tensor::zeros(layer.weight.shape());
    let mut gb = Tensor::zeros(layer.bias.shape());
    let mut gx = want_input.then(|| Tensor::zeros(s));
    let mut gcols = vec![0.0; rows * plane];
    for n in 0..s.n {
        let go = grad_out.item(n);
        for (o, b) in gb.data_mut().iter_mut().enumerate() {
            *b += go[o * out_plane..(o + 1) * out_plane].iter().sum::<f64>();
        }
        win.im2col(go, &mut gcols);
        gemm(layer.in_channels, plane, rows, x.item(n), false, &gcols, true, gw.data_mut(), 1.0);
        if let Some(gx) = gx.as_mut() {
            gemm(layer.in_channels, rows, plane, layer.weight.data(), false, &gcols, false, gx.item_mut(n), 0.0);
        }
    }
    Ok(LayerGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Masks `grad_out` by `x > 0`.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    check_same("relu_backward", x.shape(), grad_out.shape())?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Inverted dropout. Returns the output and the per-entry multiplier
/// (0 or `1/(1-rate)`; all ones outside training).
pub fn dropout_forward(x: &Tensor, rate: f64, seed: u64, training: bool) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid(format!("dropout rate {} outside [0, 1)", rate)));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), Tensor::full(x.shape(), 1.0)));
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask_data: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = Tensor::from_vec(x.shape(), mask_data)?;
    let out = x.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    Ok((Tensor::from_vec(x.shape(), out)?, mask))
}

pub fn dropout_backward(mask: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    check_same("dropout_backward", mask.shape(), grad_out.shape())?;
    let data = mask.data().iter().zip(grad_out.data()).map(|(m, g)| m * g).collect();
    Tensor::from_vec(mask.shape(), data)
}

/// Global average pooling: `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn gap_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let plane = s.plane_len();
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("one value per plane")
}

/// Spreads each pooled gradient uniformly over its `h x w` plane.
pub fn gap_backward(input_shape: Shape, grad_out: &Tensor) -> Result<Tensor> {
    check_same(
        "gap_backward",
        Shape::new(input_shape.n, input_shape.c, 1, 1),
        grad_out.shape(),
    )?;
    let plane = input_shape.plane_len();
    let mut data = Vec::with_capacity(input_shape.len());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    Tensor::from_vec(input_shape, data)
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

fn check_logits(op: &'static str, logits: &Tensor, n: usize) -> Result<()> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 || s.n != n || s.n == 0 {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{}xKx1x1 logits", n),
            actual: s.to_string(),
        });
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch with its gradient.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    check_logits("softmax_xent", logits, labels.len())?;
    let k = logits.shape().c;
    let n = labels.len();
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(invalid(format!("label {} out of range for {} classes", label, k)));
        }
        let row = logits.item(i);
        let logp = log_softmax(row);
        loss -= logp[label];
        let g = grad.item_mut(i);
        for (j, lp) in logp.iter().enumerate() {
            g[j] = (lp.exp() - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Mean squared error over all entries.
pub fn mse_loss(x: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same("mse_loss", target.shape(), x.shape())?;
    let count = x.len().max(1) as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = x
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let d = a - b;
            loss += d * d;
            2.0 * d / count
        })
        .collect();
    Ok((loss / count, Tensor::from_vec(x.shape(), grad)?))
}
