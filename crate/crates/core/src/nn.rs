//! Structured layers: 2-D convolution, transposed convolution, max pooling,
//! batch normalization, and half-scale average downsampling, each with an
//! exact backward pass.
//!
//! Convolution here is cross-correlation (no kernel flip), with zero padding.
//! Layout is channel-major `(batch, channel, height, width)` throughout.
//!
//! The transposed convolution forward pass and the convolution input-gradient
//! share one scatter kernel, which makes the adjoint identity
//! `<conv(x), y> == <x, conv_t(y)>` hold by construction.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GraphOp, Tensor};

/// Convolution hyperparameters.
///
/// For `conv2d` the weight layout is `(out, in, kh, kw)` and the output
/// spatial size is `floor((in + 2p - k)/s) + 1`.
///
/// For `transposed_conv2d` the weight layout is `(in, out, kh, kw)` and the
/// output spatial size is `(in - 1)*s - 2p + k + output_padding`, with
/// `output_padding < stride` resolving the output-size ambiguity of strided
/// adjoints (stride-2 3x3 decoders need `output_padding = 1` to double
/// exactly).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub output_padding: (usize, usize),
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            output_padding: (0, 0),
            has_bias: true,
        }
    }

    pub fn stride(mut self, s: (usize, usize)) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: (usize, usize)) -> Self {
        self.padding = p;
        self
    }

    pub fn output_padding(mut self, p: (usize, usize)) -> Self {
        self.output_padding = p;
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::InvalidArgument(
                "kernel and stride must be >= 1".into(),
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        if self.output_padding.0 >= self.stride.0 || self.output_padding.1 >= self.stride.1 {
            return Err(Error::InvalidArgument(
                "output padding must be smaller than stride".into(),
            ));
        }
        Ok(())
    }

    /// Output spatial size of the forward convolution.
    pub fn conv_output_size(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        self.validate()?;
        let dim = |i: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let padded = i + 2 * p;
            if padded < k {
                return Err(Error::InvalidArgument(format!(
                    "kernel {k} larger than padded input {padded}"
                )));
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            dim(input.0, self.kernel.0, self.stride.0, self.padding.0)?,
            dim(input.1, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    /// Output spatial size of the transposed convolution.
    pub fn transposed_output_size(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        self.validate()?;
        let dim = |i: usize, k: usize, s: usize, p: usize, op: usize| -> Result<usize> {
            let grown = (i - 1) * s + k + op;
            if grown < 2 * p + 1 {
                return Err(Error::InvalidArgument(format!(
                    "non-positive transposed conv output: input {i}, kernel {k}, stride {s}, padding {p}"
                )));
            }
            Ok(grown - 2 * p)
        };
        Ok((
            dim(
                input.0,
                self.kernel.0,
                self.stride.0,
                self.padding.0,
                self.output_padding.0,
            )?,
            dim(
                input.1,
                self.kernel.1,
                self.stride.1,
                self.padding.1,
                self.output_padding.1,
            )?,
        ))
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "{what} must be 4-D (n, c, h, w), got {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

// ---------------------------------------------------------------------------
// Raw kernels on flat slices
// ---------------------------------------------------------------------------

/// Cross-correlation gather:
/// `out[n,o,y,x] = sum_{i,ky,kx} in[n,i,y*s-p+ky,x*s-p+kx] * w[o,i,ky,kx]`.
#[allow(clippy::too_many_arguments)]
fn conv_gather<T: Scalar>(
    input: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    weights: &[T],
    (co, kh, kw): (usize, usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            let wbase_o = o * ci * kh * kw;
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = T::zero();
                    for i in 0..ci {
                        let inbase = ((b * ci + i) * h) * w;
                        let wbase = wbase_o + i * kh * kw;
                        for ky in 0..kh {
                            let iy = (y * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (x * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc
                                    + input[inbase + iy as usize * w + ix as usize]
                                        * weights[wbase + ky * kw + kx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    out
}

/// Adjoint scatter: distributes `source[n,o,y,x] * w[o,i,ky,kx]` onto the
/// `(n,i,h,w)` grid at `(y*s-p+ky, x*s-p+kx)`. This is both the convolution
/// input gradient and the transposed convolution forward pass.
#[allow(clippy::too_many_arguments)]
fn conv_scatter<T: Scalar>(
    source: &[T],
    (n, co, oh, ow): (usize, usize, usize, usize),
    weights: &[T],
    (ci, kh, kw): (usize, usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (h, w): (usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); n * ci * h * w];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let s = source[((b * co + o) * oh + y) * ow + x];
                    for i in 0..ci {
                        let outbase = ((b * ci + i) * h) * w;
                        let wbase = (o * ci + i) * kh * kw;
                        for ky in 0..kh {
                            let iy = (y * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (x * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = outbase + iy as usize * w + ix as usize;
                                out[idx] = out[idx] + s * weights[wbase + ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `dW[o,i,ky,kx] = sum_{n,y,x} upstream[n,o,y,x] * input[n,i,y*s-p+ky,x*s-p+kx]`.
#[allow(clippy::too_many_arguments)]
fn conv_weight_grad<T: Scalar>(
    input: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    upstream: &[T],
    (co, oh, ow): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> Vec<T> {
    let mut dw = vec![T::zero(); co * ci * kh * kw];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let u = upstream[((b * co + o) * oh + y) * ow + x];
                    for i in 0..ci {
                        let inbase = ((b * ci + i) * h) * w;
                        let wbase = (o * ci + i) * kh * kw;
                        for ky in 0..kh {
                            let iy = (y * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (x * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = wbase + ky * kw + kx;
                                dw[idx] =
                                    dw[idx] + u * input[inbase + iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

fn bias_grad<T: Scalar>(upstream: &[T], (n, co, oh, ow): (usize, usize, usize, usize)) -> Vec<T> {
    let mut db = vec![T::zero(); co];
    for b in 0..n {
        for o in 0..co {
            let base = ((b * co + o) * oh) * ow;
            for k in 0..oh * ow {
                db[o] = db[o] + upstream[base + k];
            }
        }
    }
    db
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], (n, co, oh, ow): (usize, usize, usize, usize)) {
    for b in 0..n {
        for o in 0..co {
            let base = ((b * co + o) * oh) * ow;
            for k in 0..oh * ow {
                out[base + k] = out[base + k] + bias[o];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

struct Conv2dOp<T: Scalar> {
    input: Tensor<T>,
    weights: Tensor<T>,
    bias: Option<Tensor<T>>,
    spec: ConvSpec,
    out_spatial: (usize, usize),
}

impl<T: Scalar> GraphOp<T> for Conv2dOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        let mut v = vec![self.input.clone(), self.weights.clone()];
        if let Some(b) = &self.bias {
            v.push(b.clone());
        }
        v
    }

    fn backward(&self, upstream: &[T]) {
        let s = self.input.shape();
        let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
        let co = self.spec.out_channels;
        let (kh, kw) = self.spec.kernel;
        let (oh, ow) = self.out_spatial;
        if self.input.tracked() {
            let dx = conv_scatter(
                upstream,
                (n, co, oh, ow),
                &self.weights.values(),
                (ci, kh, kw),
                self.spec.stride,
                self.spec.padding,
                (h, w),
            );
            self.input.accumulate_grad(&dx);
        }
        if self.weights.tracked() {
            let dw = conv_weight_grad(
                &self.input.values(),
                (n, ci, h, w),
                upstream,
                (co, oh, ow),
                (kh, kw),
                self.spec.stride,
                self.spec.padding,
            );
            self.weights.accumulate_grad(&dw);
        }
        if let Some(bias) = &self.bias {
            if bias.tracked() {
                bias.accumulate_grad(&bias_grad(upstream, (n, co, oh, ow)));
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let [n, ci, h, w] = dims4(input, "conv2d input")?;
    let expected_w = [
        spec.out_channels,
        spec.in_channels,
        spec.kernel.0,
        spec.kernel.1,
    ];
    if weights.shape() != expected_w {
        return Err(Error::shape_mismatch(
            weights.shape(),
            &expected_w,
            "conv2d weights",
        ));
    }
    if ci != spec.in_channels {
        return Err(Error::InvalidArgument(format!(
            "conv2d input has {ci} channels, spec expects {}",
            spec.in_channels
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape_mismatch(
                b.shape(),
                &[spec.out_channels],
                "conv2d bias",
            ));
        }
    }
    let (oh, ow) = spec.conv_output_size((h, w))?;
    let mut values = conv_gather(
        &input.values(),
        (n, ci, h, w),
        &weights.values(),
        (spec.out_channels, spec.kernel.0, spec.kernel.1),
        spec.stride,
        spec.padding,
        (oh, ow),
    );
    if let Some(b) = bias {
        add_bias(&mut values, &b.values(), (n, spec.out_channels, oh, ow));
    }
    let out_shape = vec![n, spec.out_channels, oh, ow];
    let tracked =
        input.tracked() || weights.tracked() || bias.map(|b| b.tracked()).unwrap_or(false);
    if tracked {
        Ok(Tensor::from_op(
            out_shape,
            values,
            Box::new(Conv2dOp {
                input: input.clone(),
                weights: weights.clone(),
                bias: bias.cloned(),
                spec: spec.clone(),
                out_spatial: (oh, ow),
            }),
        ))
    } else {
        Tensor::from_vec(&out_shape, values)
    }
}

// ---------------------------------------------------------------------------
// transposed_conv2d
// ---------------------------------------------------------------------------

struct TransposedConv2dOp<T: Scalar> {
    input: Tensor<T>,
    weights: Tensor<T>,
    bias: Option<Tensor<T>>,
    spec: ConvSpec,
    out_spatial: (usize, usize),
}

impl<T: Scalar> GraphOp<T> for TransposedConv2dOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        let mut v = vec![self.input.clone(), self.weights.clone()];
        if let Some(b) = &self.bias {
            v.push(b.clone());
        }
        v
    }

    fn backward(&self, upstream: &[T]) {
        let s = self.input.shape();
        let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
        let co = self.spec.out_channels;
        let (kh, kw) = self.spec.kernel;
        let (oh, ow) = self.out_spatial;
        if self.input.tracked() {
            // Gradient of a scatter is the matching gather. The (in, out, kh,
            // kw) weight layout is exactly what conv_gather needs to map the
            // co-channel upstream back to ci channels.
            let dx = conv_gather(
                upstream,
                (n, co, oh, ow),
                &self.weights.values(),
                (ci, kh, kw),
                self.spec.stride,
                self.spec.padding,
                (h, w),
            );
            self.input.accumulate_grad(&dx);
        }
        if self.weights.tracked() {
            // dW[i,o,ky,kx] = sum_{n,y,x} input[n,i,y,x] * upstream[n,o,y*s-p+ky,x*s-p+kx];
            // same form as the conv weight gradient with the roles of the two
            // feature maps swapped.
            let dw = conv_weight_grad(
                upstream,
                (n, co, oh, ow),
                &self.input.values(),
                (ci, h, w),
                (kh, kw),
                self.spec.stride,
                self.spec.padding,
            );
            self.weights.accumulate_grad(&dw);
        }
        if let Some(bias) = &self.bias {
            if bias.tracked() {
                bias.accumulate_grad(&bias_grad(upstream, (n, co, oh, ow)));
            }
        }
    }
}

/// Transposed 2-D convolution: the exact adjoint of [`conv2d`] with the same
/// kernel, stride, and padding. Weight layout is `(in, out, kh, kw)`.
pub fn transposed_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let [n, ci, h, w] = dims4(input, "transposed_conv2d input")?;
    let expected_w = [
        spec.in_channels,
        spec.out_channels,
        spec.kernel.0,
        spec.kernel.1,
    ];
    if weights.shape() != expected_w {
        return Err(Error::shape_mismatch(
            weights.shape(),
            &expected_w,
            "transposed_conv2d weights",
        ));
    }
    if ci != spec.in_channels {
        return Err(Error::InvalidArgument(format!(
            "transposed_conv2d input has {ci} channels, spec expects {}",
            spec.in_channels
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape_mismatch(
                b.shape(),
                &[spec.out_channels],
                "transposed_conv2d bias",
            ));
        }
    }
    let (oh, ow) = spec.transposed_output_size((h, w))?;
    let mut values = conv_scatter(
        &input.values(),
        (n, ci, h, w),
        &weights.values(),
        (spec.out_channels, spec.kernel.0, spec.kernel.1),
        spec.stride,
        spec.padding,
        (oh, ow),
    );
    if let Some(b) = bias {
        add_bias(&mut values, &b.values(), (n, spec.out_channels, oh, ow));
    }
    let out_shape = vec![n, spec.out_channels, oh, ow];
    let tracked =
        input.tracked() || weights.tracked() || bias.map(|b| b.tracked()).unwrap_or(false);
    if tracked {
        Ok(Tensor::from_op(
            out_shape,
            values,
            Box::new(TransposedConv2dOp {
                input: input.clone(),
                weights: weights.clone(),
                bias: bias.cloned(),
                spec: spec.clone(),
                out_spatial: (oh, ow),
            }),
        ))
    } else {
        Tensor::from_vec(&out_shape, values)
    }
}

// ---------------------------------------------------------------------------
// maxpool2d
// ---------------------------------------------------------------------------

struct MaxPool2dOp<T: Scalar> {
    input: Tensor<T>,
    /// Flat input index of the window maximum, per output element.
    argmax: Vec<usize>,
}

impl<T: Scalar> GraphOp<T> for MaxPool2dOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn backward(&self, upstream: &[T]) {
        if !self.input.tracked() {
            return;
        }
        let mut dx = vec![T::zero(); self.input.numel()];
        for (out_idx, &in_idx) in self.argmax.iter().enumerate() {
            dx[in_idx] = dx[in_idx] + upstream[out_idx];
        }
        self.input.accumulate_grad(&dx);
    }
}

/// Max pooling. Padding cells never win a window; ties go to the first
/// element in row-major window order.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(input, "maxpool2d input")?;
    if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::InvalidArgument(
            "pool kernel and stride must be >= 1".into(),
        ));
    }
    if padding.0 >= kernel.0 || padding.1 >= kernel.1 {
        return Err(Error::InvalidArgument(
            "pool padding must be smaller than the kernel".into(),
        ));
    }
    if h + 2 * padding.0 < kernel.0 || w + 2 * padding.1 < kernel.1 {
        return Err(Error::InvalidArgument(format!(
            "pool window {kernel:?} larger than padded input ({h}x{w}, padding {padding:?})"
        )));
    }
    let oh = (h + 2 * padding.0 - kernel.0) / stride.0 + 1;
    let ow = (w + 2 * padding.1 - kernel.1) / stride.1 + 1;
    let src = input.values();
    let mut values = vec![T::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let base = ((b * c + ch) * h) * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..kernel.0 {
                        let iy = (y * stride.0 + ky) as isize - padding.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel.1 {
                            let ix = (x * stride.1 + kx) as isize - padding.1 as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            let v = src[idx];
                            match best {
                                Some((m, _)) if v <= m => {}
                                _ => best = Some((v, idx)),
                            }
                        }
                    }
                    let (m, idx) = best.expect("window overlaps input");
                    let out_idx = ((b * c + ch) * oh + y) * ow + x;
                    values[out_idx] = m;
                    argmax[out_idx] = idx;
                }
            }
        }
    }
    drop(src);
    let out_shape = vec![n, c, oh, ow];
    if input.tracked() {
        Ok(Tensor::from_op(
            out_shape,
            values,
            Box::new(MaxPool2dOp {
                input: input.clone(),
                argmax,
            }),
        ))
    } else {
        Tensor::from_vec(&out_shape, values)
    }
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization state.
///
/// `gamma`/`beta` are trainable leaves; running statistics are plain buffers
/// updated with momentum during training and applied verbatim in eval mode.
/// Variance is the biased estimator, matching the batch statistics.
pub struct BatchNormState<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    running_mean: RefCell<Vec<T>>,
    running_var: RefCell<Vec<T>>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::param(&[channels], vec![T::one(); channels]).expect("gamma"),
            beta: Tensor::param(&[channels], vec![T::zero(); channels]).expect("beta"),
            running_mean: RefCell::new(vec![T::zero(); channels]),
            running_var: RefCell::new(vec![T::one(); channels]),
            momentum: T::from_f64(0.9),
            epsilon: T::from_f64(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn running_mean(&self) -> Vec<T> {
        self.running_mean.borrow().clone()
    }

    pub fn running_var(&self) -> Vec<T> {
        self.running_var.borrow().clone()
    }

    pub fn set_running_stats(&self, mean: &[T], var: &[T]) {
        self.running_mean.borrow_mut().copy_from_slice(mean);
        self.running_var.borrow_mut().copy_from_slice(var);
    }
}

struct BatchNorm2dOp<T: Scalar> {
    input: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    /// Per-channel mean and 1/sqrt(var+eps) used in the forward pass.
    mean: Vec<T>,
    inv_std: Vec<T>,
    /// Whether batch statistics (train) or running statistics (eval) were used.
    batch_stats: bool,
}

impl<T: Scalar> GraphOp<T> for BatchNorm2dOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone(), self.gamma.clone(), self.beta.clone()]
    }

    fn backward(&self, upstream: &[T]) {
        let s = self.input.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let count = T::from_usize(n * plane);
        let x = self.input.values();
        let gamma = self.gamma.values();

        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); x.len()];

        for ch in 0..c {
            let mu = self.mean[ch];
            let istd = self.inv_std[ch];
            let mut sum_u = T::zero();
            let mut sum_ux = T::zero();
            for b in 0..n {
                let base = ((b * c + ch) * h) * w;
                for k in 0..plane {
                    let u = upstream[base + k];
                    let xh = (x[base + k] - mu) * istd;
                    sum_u = sum_u + u;
                    sum_ux = sum_ux + u * xh;
                }
            }
            dbeta[ch] = sum_u;
            dgamma[ch] = sum_ux;
            let g = gamma[ch];
            if self.batch_stats {
                let mean_u = sum_u / count;
                let mean_ux = sum_ux / count;
                for b in 0..n {
                    let base = ((b * c + ch) * h) * w;
                    for k in 0..plane {
                        let u = upstream[base + k];
                        let xh = (x[base + k] - mu) * istd;
                        dx[base + k] = g * istd * (u - mean_u - xh * mean_ux);
                    }
                }
            } else {
                // Eval mode is a fixed affine map.
                for b in 0..n {
                    let base = ((b * c + ch) * h) * w;
                    for k in 0..plane {
                        dx[base + k] = g * istd * upstream[base + k];
                    }
                }
            }
        }
        drop(x);
        drop(gamma);
        if self.input.tracked() {
            self.input.accumulate_grad(&dx);
        }
        if self.gamma.tracked() {
            self.gamma.accumulate_grad(&dgamma);
        }
        if self.beta.tracked() {
            self.beta.accumulate_grad(&dbeta);
        }
    }
}

/// Batch normalization over `(n, h, w)` per channel.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running statistics with momentum; eval mode applies the running
/// statistics as a fixed per-channel affine map and mutates nothing.
pub fn batchnorm2d<T: Scalar>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(input, "batchnorm2d input")?;
    if c != state.channels() {
        return Err(Error::InvalidArgument(format!(
            "batchnorm2d input has {c} channels, state has {}",
            state.channels()
        )));
    }
    let plane = h * w;
    let count = n * plane;
    if mode == Mode::Train && count < 2 {
        return Err(Error::InvalidArgument(
            "batchnorm2d train mode needs more than one value per channel".into(),
        ));
    }
    let countf = T::from_usize(count);
    let x = input.values();
    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let base = ((b * c + ch) * h) * w;
                    for k in 0..plane {
                        s = s + x[base + k];
                    }
                }
                let mu = s / countf;
                let mut v = T::zero();
                for b in 0..n {
                    let base = ((b * c + ch) * h) * w;
                    for k in 0..plane {
                        let d = x[base + k] - mu;
                        v = v + d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = v / countf;
            }
            let m = state.momentum;
            let one_m = T::one() - m;
            let mut rm = state.running_mean.borrow_mut();
            let mut rv = state.running_var.borrow_mut();
            for ch in 0..c {
                rm[ch] = m * rm[ch] + one_m * mean[ch];
                rv[ch] = m * rv[ch] + one_m * var[ch];
            }
            (mean, var)
        }
        Mode::Eval => (state.running_mean(), state.running_var()),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + state.epsilon).sqrt())
        .collect();
    let gamma = state.gamma.values();
    let beta = state.beta.values();
    let mut values = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = ((b * c + ch) * h) * w;
            let mu = mean[ch];
            let istd = inv_std[ch];
            let g = gamma[ch];
            let bt = beta[ch];
            for k in 0..plane {
                values[base + k] = (x[base + k] - mu) * istd * g + bt;
            }
        }
    }
    drop(x);
    drop(gamma);
    drop(beta);
    let out_shape = vec![n, c, h, w];
    let tracked = input.tracked() || state.gamma.tracked() || state.beta.tracked();
    if tracked {
        Ok(Tensor::from_op(
            out_shape,
            values,
            Box::new(BatchNorm2dOp {
                input: input.clone(),
                gamma: state.gamma.clone(),
                beta: state.beta.clone(),
                mean,
                inv_std,
                batch_stats: mode == Mode::Train,
            }),
        ))
    } else {
        Tensor::from_vec(&out_shape, values)
    }
}

// ---------------------------------------------------------------------------
// downsample_half
// ---------------------------------------------------------------------------

struct DownsampleHalfOp<T: Scalar> {
    input: Tensor<T>,
}

impl<T: Scalar> GraphOp<T> for DownsampleHalfOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn backward(&self, upstream: &[T]) {
        if !self.input.tracked() {
            return;
        }
        let s = self.input.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let oh = h.div_ceil(2);
        let ow = w.div_ceil(2);
        let quarter = T::from_f64(0.25);
        let mut dx = vec![T::zero(); n * c * h * w];
        for b in 0..n {
            for ch in 0..c {
                let base = ((b * c + ch) * h) * w;
                let obase = ((b * c + ch) * oh) * ow;
                for y in 0..oh {
                    for x in 0..ow {
                        let u = upstream[obase + y * ow + x] * quarter;
                        for dy in 0..2 {
                            for dxx in 0..2 {
                                let sy = (2 * y + dy).min(h - 1);
                                let sx = (2 * x + dxx).min(w - 1);
                                let idx = base + sy * w + sx;
                                dx[idx] = dx[idx] + u;
                            }
                        }
                    }
                }
            }
        }
        self.input.accumulate_grad(&dx);
    }
}

/// 2x2 average pooling with stride 2, halving height and width. Odd spatial
/// dimensions are padded by edge replication before averaging.
pub fn downsample_half<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(input, "downsample_half input")?;
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let quarter = T::from_f64(0.25);
    let src = input.values();
    let mut values = vec![T::zero(); n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let base = ((b * c + ch) * h) * w;
            let obase = ((b * c + ch) * oh) * ow;
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let sy = (2 * y + dy).min(h - 1);
                            let sx = (2 * x + dx).min(w - 1);
                            acc = acc + src[base + sy * w + sx];
                        }
                    }
                    values[obase + y * ow + x] = acc * quarter;
                }
            }
        }
    }
    drop(src);
    let out_shape = vec![n, c, oh, ow];
    if input.tracked() {
        Ok(Tensor::from_op(
            out_shape,
            values,
            Box::new(DownsampleHalfOp {
                input: input.clone(),
            }),
        ))
    } else {
        Tensor::from_vec(&out_shape, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(n: usize, seed: u64) -> Vec<f64> {
        // Small deterministic pseudo-random values in [-1, 1).
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn identity_1x1_kernel() {
        let img = seeded(16, 3);
        let x = Tensor::<f64>::from_vec(&[1, 1, 4, 4], img.clone()).unwrap();
        let w = Tensor::<f64>::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let spec = ConvSpec::new(1, 1, (1, 1)).bias(false);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.to_vec(), img);
    }

    #[test]
    fn averaging_kernel_on_constant_image() {
        let x = Tensor::<f64>::full(&[1, 1, 5, 5], 7.0);
        let w = Tensor::<f64>::from_vec(&[1, 1, 3, 3], vec![1.0 / 9.0; 9]).unwrap();
        let spec = ConvSpec::new(1, 1, (3, 3)).padding((1, 1)).bias(false);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        let v = y.to_vec();
        // interior pixels see the full kernel
        assert!((v[2 * 5 + 2] - 7.0).abs() < 1e-12);
        // corners see 4 of 9 taps
        assert!((v[0] - 7.0 * 4.0 / 9.0).abs() < 1e-12);
    }

    /// Independent sliding-window oracle over an explicitly padded buffer.
    fn conv_oracle(
        x: &[f64],
        (n, ci, h, w): (usize, usize, usize, usize),
        wgt: &[f64],
        (co, kh, kw): (usize, usize, usize),
        (sh, sw): (usize, usize),
        (ph, pw): (usize, usize),
    ) -> Vec<f64> {
        let hp = h + 2 * ph;
        let wp = w + 2 * pw;
        let mut padded = vec![0.0; n * ci * hp * wp];
        for b in 0..n {
            for i in 0..ci {
                for y in 0..h {
                    for xx in 0..w {
                        padded[((b * ci + i) * hp + y + ph) * wp + xx + pw] =
                            x[((b * ci + i) * h + y) * w + xx];
                    }
                }
            }
        }
        let oh = (hp - kh) / sh + 1;
        let ow = (wp - kw) / sw + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    acc += padded
                                        [((b * ci + i) * hp + y * sh + ky) * wp + xx * sw + kx]
                                        * wgt[((o * ci + i) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * co + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_loop_oracle_strided() {
        let x = seeded(1 * 2 * 6 * 6, 11);
        let w = seeded(3 * 2 * 3 * 3, 12);
        let xt = Tensor::<f64>::from_vec(&[1, 2, 6, 6], x.clone()).unwrap();
        let wt = Tensor::<f64>::from_vec(&[3, 2, 3, 3], w.clone()).unwrap();
        let spec = ConvSpec::new(2, 3, (3, 3)).stride((2, 2)).bias(false);
        let y = conv2d(&xt, &wt, None, &spec).unwrap();
        let oracle = conv_oracle(&x, (1, 2, 6, 6), &w, (3, 3, 3), (2, 2), (0, 0));
        assert_eq!(y.shape(), &[1, 3, 2, 2]);
        for (a, b) in y.to_vec().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        let spec = ConvSpec::new(2, 2, (3, 3));
        assert!(conv2d(&x, &w, None, &spec).is_err());
    }

    #[test]
    fn conv_non_positive_output_errors() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        let spec = ConvSpec::new(1, 1, (5, 5)).bias(false);
        assert!(conv2d(&x, &w, None, &spec).is_err());
    }

    #[test]
    fn tconv_broadcasts_single_pixel() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let spec = ConvSpec::new(1, 1, (2, 2)).stride((2, 2)).bias(false);
        let y = transposed_conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![3.0; 4]);
    }

    #[test]
    fn tconv_output_padding_doubles_size() {
        let x = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let spec = ConvSpec::new(1, 1, (3, 3))
            .stride((2, 2))
            .padding((1, 1))
            .output_padding((1, 1))
            .bias(false);
        let y = transposed_conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 16, 16]);
    }

    #[test]
    fn adjoint_identity_conv_tconv() {
        // <conv(x), y> == <x, conv_t(y)> with a shared weight tensor.
        for (seed, stride, pad) in [
            (21u64, (1, 1), (0, 0)),
            (22, (2, 2), (1, 1)),
            (23, (2, 2), (0, 0)),
            (24, (3, 3), (1, 1)),
        ] {
            let spec = ConvSpec::new(2, 3, (3, 3))
                .stride(stride)
                .padding(pad)
                .bias(false);
            let h = 7;
            let w = 8;
            let x = seeded(2 * h * w, seed);
            let wgt = seeded(3 * 2 * 9, seed + 100);
            let xt = Tensor::<f64>::from_vec(&[1, 2, h, w], x.clone()).unwrap();
            let wt_conv = Tensor::<f64>::from_vec(&[3, 2, 3, 3], wgt.clone()).unwrap();
            let cx = conv2d(&xt, &wt_conv, None, &spec).unwrap();
            let (oh, ow) = (cx.shape()[2], cx.shape()[3]);
            let y = seeded(3 * oh * ow, seed + 200);
            let yt = Tensor::<f64>::from_vec(&[1, 3, oh, ow], y.clone()).unwrap();
            // Output padding chosen so conv_t(y) lands back on x's spatial size.
            let oph = h - ((oh - 1) * stride.0 + 3 - 2 * pad.0);
            let opw = w - ((ow - 1) * stride.1 + 3 - 2 * pad.1);
            // Same weight buffer viewed in the (in=3, out=2) transposed layout.
            let tspec = ConvSpec::new(3, 2, (3, 3))
                .stride(stride)
                .padding(pad)
                .output_padding((oph, opw))
                .bias(false);
            let wt_t = Tensor::<f64>::from_vec(&[3, 2, 3, 3], wgt.clone()).unwrap();
            let ty = transposed_conv2d(&yt, &wt_t, None, &tspec).unwrap();
            assert_eq!(ty.shape(), xt.shape());
            let lhs: f64 = cx.to_vec().iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(ty.to_vec().iter()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() < 1e-10,
                "adjoint identity violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn maxpool_basic_and_backward() {
        let x = Tensor::<f64>::param(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool2d(&x, (2, 2), (2, 2), (0, 0)).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);
        y.sum(None).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first_in_window() {
        let x = Tensor::<f64>::param(&[1, 1, 2, 2], vec![5.0; 4]).unwrap();
        let y = maxpool2d(&x, (2, 2), (2, 2), (0, 0)).unwrap();
        assert_eq!(y.to_vec(), vec![5.0]);
        y.sum(None).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_matches_window_scan_oracle() {
        let data = seeded(1 * 2 * 5 * 6, 31);
        let x = Tensor::<f64>::from_vec(&[1, 2, 5, 6], data.clone()).unwrap();
        let y = maxpool2d(&x, (3, 2), (2, 2), (1, 0)).unwrap();
        // oracle: padded with -inf
        let (h, w, ph, pw, kh, kw, sh, sw) = (5usize, 6usize, 1usize, 0usize, 3, 2, 2, 2);
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        assert_eq!(y.shape(), &[1, 2, oh, ow]);
        let v = y.to_vec();
        for c in 0..2 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                m = m.max(data[(c * h + iy as usize) * w + ix as usize]);
                            }
                        }
                    }
                    assert_eq!(v[(c * oh + oy) * ow + ox], m);
                }
            }
        }
    }

    #[test]
    fn maxpool_window_larger_than_padded_input_errors() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(maxpool2d(&x, (5, 5), (1, 1), (1, 1)).is_err());
    }

    #[test]
    fn batchnorm_normalizes_in_train_mode() {
        let data = seeded(2 * 3 * 4 * 4, 41);
        let x = Tensor::<f64>::from_vec(&[2, 3, 4, 4], data).unwrap();
        let state = BatchNormState::<f64>::new(3);
        let y = batchnorm2d(&x, &state, Mode::Train).unwrap();
        let v = y.to_vec();
        for c in 0..3 {
            let mut vals = Vec::new();
            for b in 0..2 {
                for k in 0..16 {
                    vals.push(v[((b * 3 + c) * 16) + k]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_affine_applies_gamma_beta() {
        let data = seeded(2 * 1 * 3 * 3, 42);
        let x = Tensor::<f64>::from_vec(&[2, 1, 3, 3], data).unwrap();
        let state = BatchNormState::<f64>::new(1);
        state.gamma.set_values(&[2.0]);
        state.beta.set_values(&[3.0]);
        let base = BatchNormState::<f64>::new(1);
        let normalized = batchnorm2d(&x, &base, Mode::Train).unwrap();
        let scaled = batchnorm2d(&x, &state, Mode::Train).unwrap();
        for (s, n) in scaled.to_vec().iter().zip(normalized.to_vec()) {
            assert!((s - (2.0 * n + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_eval_is_deterministic_affine() {
        let data = seeded(1 * 2 * 3 * 3, 43);
        let x = Tensor::<f64>::from_vec(&[1, 2, 3, 3], data).unwrap();
        let state = BatchNormState::<f64>::new(2);
        state.set_running_stats(&[0.2, -0.1], &[1.5, 0.7]);
        let a = batchnorm2d(&x, &state, Mode::Eval).unwrap().to_vec();
        let b = batchnorm2d(&x, &state, Mode::Eval).unwrap().to_vec();
        assert_eq!(a, b);
        // and running stats are untouched
        assert_eq!(state.running_mean(), vec![0.2, -0.1]);
    }

    #[test]
    fn batchnorm_rejects_degenerate_single_statistic() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        let state = BatchNormState::<f64>::new(2);
        assert!(batchnorm2d(&x, &state, Mode::Train).is_err());
        assert!(batchnorm2d(&x, &state, Mode::Eval).is_ok());
    }

    #[test]
    fn downsample_constant_stays_constant() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 3.25);
        let y = downsample_half(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.to_vec().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn downsample_checkerboard_averages_to_half() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let y = downsample_half(&x).unwrap();
        assert_eq!(y.to_vec(), vec![0.5]);
    }

    #[test]
    fn downsample_matches_mean_oracle() {
        let data = seeded(1 * 1 * 6 * 8, 51);
        let x = Tensor::<f64>::from_vec(&[1, 1, 6, 8], data.clone()).unwrap();
        let y = downsample_half(&x).unwrap();
        let v = y.to_vec();
        for oy in 0..3 {
            for ox in 0..4 {
                let m = (data[(2 * oy) * 8 + 2 * ox]
                    + data[(2 * oy) * 8 + 2 * ox + 1]
                    + data[(2 * oy + 1) * 8 + 2 * ox]
                    + data[(2 * oy + 1) * 8 + 2 * ox + 1])
                    / 4.0;
                assert!((v[oy * 4 + ox] - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn downsample_odd_replicates_edges() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 9.0]).unwrap();
        let y = downsample_half(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        // window 1: rows replicate, cols (1,2); window 2: col 2 replicated (9)
        assert_eq!(y.to_vec(), vec![1.5, 9.0]);
    }
}
