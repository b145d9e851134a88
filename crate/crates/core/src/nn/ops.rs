//! Convolution, pooling, dense, activation and dropout kernels.
//!
//! Feature maps are channel-major `(C, H, W)`. Kernels are `(O, C, kh, kw)`.
//! Dense weights are `(in, out)`, so `y = x W + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// Number of output channels (kernels).
    pub channels: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(kernel: usize, channels: usize, dilation: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            channels,
            dilation,
            stride: 1,
            padding: Padding::Valid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h < 1 || self.kernel_w < 1 || self.dilation < 1 || self.stride < 1 || self.channels < 1 {
            return Err(Error::config(format!("kernel, channels, dilation and stride must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(out_len, pad_before)` along one axis.
    fn axis(&self, input: usize, kernel: usize) -> Option<(usize, usize)> {
        let eff = self.dilation * (kernel - 1) + 1;
        match self.padding {
            Padding::Valid => (input >= eff).then(|| ((input - eff) / self.stride + 1, 0)),
            Padding::Same => {
                if input == 0 {
                    return None;
                }
                let out = input.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + eff).saturating_sub(input);
                Some((out, total / 2))
            }
        }
    }

    /// Output `(H, W)` and `(pad_top, pad_left)` for an `(H, W)` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Option<((usize, usize), (usize, usize))> {
        let (oh, pt) = self.axis(h, self.kernel_h)?;
        let (ow, pl) = self.axis(w, self.kernel_w)?;
        Some(((oh, ow), (pt, pl)))
    }
}

/// Geometry of one convolution application, shared by forward and backward.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(spec: &ConvSpec, in_c: usize, in_h: usize, in_w: usize) -> Result<Self> {
        spec.validate()?;
        let ((out_h, out_w), (pad_top, pad_left)) = spec.output_dims(in_h, in_w).ok_or_else(|| Error::Shape {
            context: "convolution leaves no output",
            left: vec![in_c, in_h, in_w],
            right: vec![spec.channels, in_c, spec.kernel_h, spec.kernel_w],
        })?;
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c: spec.channels,
            out_h,
            out_w,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            dilation: spec.dilation,
            stride: spec.stride,
            pad_top,
            pad_left,
        })
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kh * self.kw
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }

    /// Output index range along an axis whose input index `o*s + k*d - pad` is in bounds.
    #[inline]
    fn valid_range(&self, k: usize, pad: usize, input: usize, out: usize) -> (usize, usize) {
        let shift = (k * self.dilation) as isize - pad as isize;
        let s = self.stride as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // largest o with o*s + shift <= input - 1
        let last = input as isize - 1 - shift;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(out as isize) };
        (lo as usize, hi.max(lo) as usize)
    }

    /// Calls `f(out_offset, in_offset, len)` for each contiguous run, pairing
    /// output row segments with input row segments for tap `(ky, kx)`; strided convolutions get runs of length 1.
    #[inline]
    fn for_each_run(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (y0, y1) = self.valid_range(ky, self.pad_top, self.in_h, self.out_h);
        let (x0, x1) = self.valid_range(kx, self.pad_left, self.in_w, self.out_w);
        if x0 >= x1 {
            return;
        }
        for y in y0..y1 {
            let iy = y * self.stride + ky * self.dilation - self.pad_top;
            let ix0 = x0 * self.stride + kx * self.dilation - self.pad_left;
            if self.stride == 1 {
                f(y * self.out_w + x0, iy * self.in_w + ix0, x1 - x0);
            } else {
                for (n, x) in (x0..x1).enumerate() {
                    f(y * self.out_w + x, iy * self.in_w + ix0 + n * self.stride, 1);
                }
            }
        }
    }
}

/// Dilated cross-correlation: `out[o](p) = b[o] + sum_{c, t} x[c](p*s + l*t - pad) w[o, c](t)`.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for o in 0..g.out_c {
        let out_plane = &mut out[o * plane_out..(o + 1) * plane_out];
        out_plane.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..g.in_c {
            let in_plane = &input[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let w = weight[((o * g.in_c + c) * g.kh + ky) * g.kw + kx];
                    g.for_each_run(ky, kx, |oo, io, len| {
                        for (dst, &src) in out_plane[oo..oo + len].iter_mut().zip(&in_plane[io..io + len]) {
                            *dst += w * src;
                        }
                    });
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients; writes (overwrites) the input gradient.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    grad_input: Option<&mut [T]>,
) {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let mut gi = grad_input;
    if let Some(gi) = gi.as_deref_mut() {
        gi.iter_mut().for_each(|v| *v = T::zero());
    }
    for o in 0..g.out_c {
        let go = &grad_out[o * plane_out..(o + 1) * plane_out];
        grad_bias[o] += go.iter().copied().sum();
        for c in 0..g.in_c {
            let in_plane = &input[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = ((o * g.in_c + c) * g.kh + ky) * g.kw + kx;
                    let mut acc = T::zero();
                    g.for_each_run(ky, kx, |oo, io, len| {
                        for (&d, &x) in go[oo..oo + len].iter().zip(&in_plane[io..io + len]) {
                            acc += d * x;
                        }
                    });
                    grad_weight[widx] += acc;
                    if let Some(gi) = gi.as_deref_mut() {
                        let w = weight[widx];
                        let gi_plane = &mut gi[c * plane_in..(c + 1) * plane_in];
                        g.for_each_run(ky, kx, |oo, io, len| {
                            for (dst, &d) in gi_plane[io..io + len].iter_mut().zip(&go[oo..oo + len]) {
                                *dst += w * d;
                            }
                        });
                    }
                }
            }
        }
    }
}

/// Tensor-level convolution: input `(C, H, W)`, kernels `(O, C, kh, kw)`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, bias: Option<&[T]>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let (is, ks) = (input.shape(), kernels.shape());
    if is.len() != 3 || ks.len() != 4 || ks[1] != is[0] || ks[0] != spec.channels || ks[2] != spec.kernel_h || ks[3] != spec.kernel_w {
        return Err(Error::Shape {
            context: "conv2d input vs kernels",
            left: is.to_vec(),
            right: ks.to_vec(),
        });
    }
    let g = ConvGeom::new(spec, is[0], is[1], is[2])?;
    let zeros = vec![T::zero(); g.out_c];
    let bias = bias.unwrap_or(&zeros);
    if bias.len() != g.out_c {
        return Err(Error::Shape {
            context: "conv2d bias",
            left: vec![bias.len()],
            right: vec![g.out_c],
        });
    }
    let mut out = vec![T::zero(); g.out_len()];
    conv2d_forward(&g, input.data(), kernels.data(), bias, &mut out);
    Tensor::new(vec![g.out_c, g.out_h, g.out_w], out)
}

#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(c: usize, in_h: usize, in_w: usize, window: usize, stride: usize) -> Result<Self> {
        if in_h < window || in_w < window || window == 0 || stride == 0 {
            return Err(Error::Shape {
                context: "max pool window larger than input",
                left: vec![c, in_h, in_w],
                right: vec![window, window],
            });
        }
        Ok(Self {
            c,
            in_h,
            in_w,
            window,
            stride,
            out_h: (in_h - window) / stride + 1,
            out_w: (in_w - window) / stride + 1,
        })
    }

    pub fn out_len(&self) -> usize {
        self.c * self.out_h * self.out_w
    }
}

/// Window maxima; `argmax` receives the flat input index of each maximum
/// (first in row-major order on ties).
pub fn maxpool_forward<T: Scalar>(g: &PoolGeom, input: &[T], out: &mut [T], argmax: &mut [usize]) {
    for c in 0..g.c {
        let base = c * g.in_h * g.in_w;
        for y in 0..g.out_h {
            for x in 0..g.out_w {
                let mut best = base + (y * g.stride) * g.in_w + x * g.stride;
                for dy in 0..g.window {
                    for dx in 0..g.window {
                        let idx = base + (y * g.stride + dy) * g.in_w + x * g.stride + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                let o = (c * g.out_h + y) * g.out_w + x;
                out[o] = input[best];
                argmax[o] = best;
            }
        }
    }
}

pub fn maxpool_backward<T: Scalar>(grad_out: &[T], argmax: &[usize], grad_input: &mut [T]) {
    grad_input.iter_mut().for_each(|v| *v = T::zero());
    for (&d, &idx) in grad_out.iter().zip(argmax) {
        grad_input[idx] += d;
    }
}

/// Tensor-level pooling over a `(C, H, W)` input.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::Shape {
            context: "maxpool2d expects (C, H, W)",
            left: s.to_vec(),
            right: vec![],
        });
    }
    let g = PoolGeom::new(s[0], s[1], s[2], window, stride)?;
    let mut out = vec![T::zero(); g.out_len()];
    let mut arg = vec![0; g.out_len()];
    maxpool_forward(&g, input.data(), &mut out, &mut arg);
    Ok((Tensor::new(vec![g.c, g.out_h, g.out_w], out)?, arg))
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zero gradients where the activation output was clamped.
pub fn relu_backward_inplace<T: Scalar>(activated: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    relu_inplace(out.data_mut());
    out
}

/// `y = x W + b` for a single row `x`.
pub fn dense_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let n_out = bias.len();
    out.copy_from_slice(bias);
    for (i, &xi) in x.iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        let row = &weight[i * n_out..(i + 1) * n_out];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += xi * w;
        }
    }
}

/// Accumulates `dW += x^T dy`, `db += dy`; overwrites `dx = dy W^T`.
pub fn dense_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    grad_input: Option<&mut [T]>,
) {
    let n_out = grad_out.len();
    for (gb, &d) in grad_bias.iter_mut().zip(grad_out) {
        *gb += d;
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        let row = &mut grad_weight[i * n_out..(i + 1) * n_out];
        for (gw, &d) in row.iter_mut().zip(grad_out) {
            *gw += xi * d;
        }
    }
    if let Some(gi) = grad_input {
        for (i, g) in gi.iter_mut().enumerate() {
            let row = &weight[i * n_out..(i + 1) * n_out];
            *g = row.iter().zip(grad_out).map(|(&w, &d)| w * d).sum();
        }
    }
}

/// Tensor-level dense layer on a 1-D input; `weight` is `(in, out)`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let ws = weight.shape();
    if ws.len() != 2 || ws[0] != input.len() || ws[1] != bias.len() {
        return Err(Error::Shape {
            context: "dense input vs weight",
            left: input.shape().to_vec(),
            right: ws.to_vec(),
        });
    }
    let mut out = vec![T::zero(); ws[1]];
    dense_forward(input.data(), weight.data(), bias, &mut out);
    Tensor::new(vec![ws[1]], out)
}

/// Inverted-dropout mask: kept units scaled by `1 / (1 - rate)`, dropped are zero.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    if rate <= 0.0 {
        return vec![T::one(); len];
    }
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

/// Training-mode dropout when `rng` is given, identity otherwise.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(input: &Tensor<T>, rate: f64, rng: Option<&mut R>) -> Tensor<T> {
    match rng {
        None => input.clone(),
        Some(rng) => {
            let mask: Vec<T> = dropout_mask(input.len(), rate, rng);
            let mut out = input.clone();
            out.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
            out
        }
    }
}
