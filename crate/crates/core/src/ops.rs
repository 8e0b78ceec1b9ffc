//! Primitive operations with analytic gradients.
//!
//! Each primitive is a pure function of its input tensors and attributes.
//! [`primitive_forward`] evaluates it and [`primitive_backward`] returns the
//! vector-Jacobian product for every differentiable input. The reverse-mode
//! tape in [`crate::graph`] is a thin driver over these two functions.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::counter_u64;
use crate::tensor::Tensor;

/// Per-token rotation angles for 2D axial rotary encoding.
///
/// `cos`/`sin` are `[tokens, dh / 2]`: one angle per rotated pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    pub tokens: usize,
    pub pairs: usize,
    pub cos: Vec<f32>,
    pub sin: Vec<f32>,
}

#[derive(Debug, Clone)]
pub enum Op {
    /// `[.., m, k] x [.., k, n]`; the right operand may also be a plain `[k, n]`.
    MatMul,
    /// Elementwise sum; the right operand's shape must be a suffix of the left's.
    Add,
    /// Elementwise product, same broadcasting as [`Op::Add`].
    Mul,
    Scale(f32),
    AddScalar(f32),
    /// `x [.., in]`, `w [in, out]`, optional `b [out]`.
    Linear,
    /// `x [.., d]`, `gamma [d]`, `beta [d]`.
    LayerNorm { eps: f32 },
    /// Over the last axis.
    Softmax,
    Silu,
    Gelu,
    Relu,
    Mean { axis: usize },
    SumAll,
    MeanAll,
    /// `x [B, C, H, W]`, `w [O, C, kh, kw]`, optional `b [O]`.
    Conv2d { stride: usize, padding: usize },
    /// Kernel 2, stride 2. `x [B, C, H, W]`, `w [C, O, 2, 2]`, optional `b [O]`.
    ConvTranspose2d,
    /// Kernel 2, stride 2.
    MaxPool2d,
    /// Align-corners bilinear resampling of the last two axes.
    Bilinear { out_h: usize, out_w: usize },
    /// Adaptive average pooling of the last two axes.
    AdaptiveAvgPool2d { out_h: usize, out_w: usize },
    Reshape(Vec<usize>),
    /// Axis permutation; `Transpose` in the usual sense is the two-axis case.
    Permute(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// Inverted dropout. Element `i` is kept when the `counter + i`-th draw
    /// of stream `key` is at least `p`; kept values are scaled by `1/(1-p)`.
    Dropout { p: f32, key: u64, counter: u64 },
    /// `x [B, heads, tokens, dh]` rotated pairwise by a [`RopeTable`].
    Rope2d(Arc<RopeTable>),
    /// `x [B, N, d]`, `m [d]`: rows flagged in the mask are replaced by `m`.
    MaskReplace(Arc<Vec<bool>>),
    /// Selects rows of `x` viewed as `[R, rest]`.
    GatherRows(Arc<Vec<usize>>),
    /// Row-wise cosine similarity of two `[m, D]` tensors, guarded by `eps`.
    CosineRows { eps: f32 },
    /// Mean sigmoid binary cross-entropy; second input holds the labels.
    BceWithLogits,
    /// Mean softmax cross-entropy of `[M, C]` logits against class indices.
    CrossEntropy(Arc<Vec<usize>>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Linear => "linear",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax => "softmax",
            Op::Silu => "silu",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::Mean { .. } => "mean",
            Op::SumAll => "sum",
            Op::MeanAll => "mean_all",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d => "conv_transpose2d",
            Op::MaxPool2d => "max_pool2d",
            Op::Bilinear { .. } => "bilinear_resize_2d",
            Op::AdaptiveAvgPool2d { .. } => "adaptive_avg_pool2d",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Dropout { .. } => "dropout",
            Op::Rope2d(_) => "rope2d",
            Op::MaskReplace(_) => "mask_replace",
            Op::GatherRows(_) => "gather_rows",
            Op::CosineRows { .. } => "cosine_rows",
            Op::BceWithLogits => "bce_with_logits",
            Op::CrossEntropy(_) => "cross_entropy",
        }
    }
}

fn shape_err(op: &Op, inputs: &[&Tensor], why: &str) -> Error {
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    Error::shape(op.name(), format!("{why}; input shapes {shapes:?}"))
}

fn arity(op: &Op, inputs: &[&Tensor], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(shape_err(op, inputs, &format!("expected {allowed:?} inputs")))
    }
}

/// Row-major GEMM `c = a * b (+ c if accumulate)` with arbitrary strides on
/// the operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe views that lie within `a` and `b`, which
    // every call site guarantees by construction; `c` has room for m*n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const INV_SQRT2: f32 = std::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;

#[inline]
fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * INV_SQRT2))
}

#[inline]
fn gelu_grad(x: f32) -> f32 {
    0.5 * (1.0 + libm::erff(x * INV_SQRT2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Sampling plan for one axis of an align-corners bilinear resize.
pub(crate) fn bilinear_taps(inp: usize, out: usize) -> Vec<(usize, usize, f32)> {
    (0..out)
        .map(|i| {
            if out == 1 || inp == 1 {
                return (0, 0, 0.0);
            }
            let src = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
            let lo = (src.floor() as usize).min(inp - 1);
            let hi = (lo + 1).min(inp - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

#[inline]
fn lerp_clamped(a: f32, b: f32, t: f32) -> f32 {
    let v = a + (b - a) * t;
    v.clamp(a.min(b), a.max(b))
}

fn pool_range(i: usize, inp: usize, out: usize) -> (usize, usize) {
    let start = i * inp / out;
    let end = ((i + 1) * inp).div_ceil(out);
    (start, end.max(start + 1))
}

/// Keep-decision of dropout element `i`.
#[inline]
pub(crate) fn dropout_keep(p: f32, key: u64, counter: u64, i: usize) -> bool {
    let u = (counter_u64(key, counter.wrapping_add(i as u64)) >> 40) as f32
        * (1.0 / (1u64 << 24) as f32);
    u >= p
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (oh, ow) = (self.oh, self.ow);
        let mut row = 0;
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for i in 0..oh {
                        let y = (i * self.stride + ki) as isize - self.pad as isize;
                        for j in 0..ow {
                            let xx = (j * self.stride + kj) as isize - self.pad as isize;
                            dst[i * ow + j] = if y >= 0
                                && (y as usize) < self.h
                                && xx >= 0
                                && (xx as usize) < self.w
                            {
                                plane[y as usize * self.w + xx as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], gx: &mut [f32]) {
        let (oh, ow) = (self.oh, self.ow);
        let mut row = 0;
        for c in 0..self.c {
            let plane = &mut gx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for i in 0..oh {
                        let y = (i * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for j in 0..ow {
                            let xx = (j * self.stride + kj) as isize - self.pad as isize;
                            if xx >= 0 && (xx as usize) < self.w {
                                plane[y as usize * self.w + xx as usize] += src[i * ow + j];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Evaluates a primitive.
pub fn primitive_forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let out = forward_unchecked(op, inputs)?;
    out.ensure_finite(op.name())
}

fn forward_unchecked(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::MatMul => {
            arity(op, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, m, k, n, b_batched) = matmul_dims(op, inputs)?;
            let mut out_shape = a.shape()[..a.ndim() - 1].to_vec();
            out_shape.push(n);
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                let bo = if b_batched { bi * k * n } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[bi * m * k..],
                    (k, 1),
                    &b.data()[bo..],
                    (n, 1),
                    &mut out[bi * m * n..],
                    false,
                );
            }
            Ok(Tensor::from_parts(out_shape, out))
        }
        Op::Add | Op::Mul => {
            arity(op, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            if !is_suffix(a.shape(), b.shape()) || b.is_empty() {
                return Err(shape_err(op, inputs, "right operand must match a suffix of the left"));
            }
            let bl = b.len();
            let bd = b.data();
            let data: Vec<f32> = if matches!(op, Op::Add) {
                a.data().iter().enumerate().map(|(i, &x)| x + bd[i % bl]).collect()
            } else {
                a.data().iter().enumerate().map(|(i, &x)| x * bd[i % bl]).collect()
            };
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::Scale(s) => {
            arity(op, inputs, &[1])?;
            Ok(inputs[0].map(|x| x * s))
        }
        Op::AddScalar(s) => {
            arity(op, inputs, &[1])?;
            Ok(inputs[0].map(|x| x + s))
        }
        Op::Linear => {
            arity(op, inputs, &[2, 3])?;
            let (x, w) = (inputs[0], inputs[1]);
            if x.ndim() == 0 || w.ndim() != 2 || x.shape()[x.ndim() - 1] != w.shape()[0] {
                return Err(shape_err(op, inputs, "expected x [.., in] and w [in, out]"));
            }
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            let rows = x.len() / din.max(1);
            let mut out = vec![0.0; rows * dout];
            gemm(rows, din, dout, x.data(), (din, 1), w.data(), (dout, 1), &mut out, false);
            if let Some(b) = inputs.get(2) {
                if b.shape() != [dout] {
                    return Err(shape_err(op, inputs, "bias must be [out]"));
                }
                for row in out.chunks_mut(dout) {
                    for (o, &bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = dout;
            Ok(Tensor::from_parts(shape, out))
        }
        Op::LayerNorm { eps } => {
            arity(op, inputs, &[3])?;
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let d = *x.shape().last().ok_or_else(|| shape_err(op, inputs, "scalar input"))?;
            if gamma.shape() != [d] || beta.shape() != [d] {
                return Err(shape_err(op, inputs, "gain and bias must be [d]"));
            }
            let mut out = vec![0.0; x.len()];
            for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
                let (mean, rstd) = row_moments(row, *eps);
                for i in 0..d {
                    let xhat = ((row[i] as f64 - mean) * rstd) as f32;
                    o[i] = xhat * gamma.data()[i] + beta.data()[i];
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Op::Softmax => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            let d = *x.shape().last().ok_or_else(|| shape_err(op, inputs, "scalar input"))?;
            let mut out = vec![0.0; x.len()];
            for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for (oi, &v) in o.iter_mut().zip(row) {
                    *oi = (v - max).exp();
                    sum += *oi as f64;
                }
                let inv = (1.0 / sum) as f32;
                o.iter_mut().for_each(|v| *v *= inv);
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Op::Silu => {
            arity(op, inputs, &[1])?;
            Ok(inputs[0].map(|x| x * sigmoid(x)))
        }
        Op::Gelu => {
            arity(op, inputs, &[1])?;
            Ok(inputs[0].map(gelu))
        }
        Op::Relu => {
            arity(op, inputs, &[1])?;
            Ok(inputs[0].map(|x| x.max(0.0)))
        }
        Op::Mean { axis } => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            if *axis >= x.ndim() || x.shape()[*axis] == 0 {
                return Err(shape_err(op, inputs, &format!("bad axis {axis}")));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut s = 0.0f64;
                    for a in 0..len {
                        s += x.data()[(o * len + a) * inner + i] as f64;
                    }
                    out[o * inner + i] = (s / len as f64) as f32;
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(*axis);
            Ok(Tensor::from_parts(shape, out))
        }
        Op::SumAll => {
            arity(op, inputs, &[1])?;
            Ok(Tensor::scalar(inputs[0].sum()))
        }
        Op::MeanAll => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            if x.is_empty() {
                return Err(shape_err(op, inputs, "empty input"));
            }
            let s: f64 = x.data().iter().map(|&v| v as f64).sum();
            Ok(Tensor::scalar((s / x.len() as f64) as f32))
        }
        Op::Conv2d { stride, padding } => {
            arity(op, inputs, &[2, 3])?;
            let (x, w) = (inputs[0], inputs[1]);
            let (bsz, g) = conv_geom(op, inputs, *stride, *padding)?;
            let o = w.shape()[0];
            let ckk = g.c * g.kh * g.kw;
            let plane = g.oh * g.ow;
            let mut out = vec![0.0; bsz * o * plane];
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; ckk * plane] };
            for b in 0..bsz {
                let xb = &x.data()[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
                let colref: &[f32] = if g.is_pointwise() {
                    xb
                } else {
                    g.im2col(xb, &mut cols);
                    &cols
                };
                let ob = &mut out[b * o * plane..(b + 1) * o * plane];
                gemm(o, ckk, plane, w.data(), (ckk, 1), colref, (plane, 1), ob, false);
                if let Some(bias) = inputs.get(2) {
                    for (oc, chunk) in ob.chunks_mut(plane).enumerate() {
                        let bv = bias.data()[oc];
                        chunk.iter_mut().for_each(|v| *v += bv);
                    }
                }
            }
            Ok(Tensor::from_parts(vec![bsz, o, g.oh, g.ow], out))
        }
        Op::ConvTranspose2d => {
            arity(op, inputs, &[2, 3])?;
            let (x, w) = (inputs[0], inputs[1]);
            let (bsz, c, h, wd, o) = deconv_dims(op, inputs)?;
            let hw = h * wd;
            let mut out = vec![0.0; bsz * o * 4 * hw];
            let mut tmp = vec![0.0; o * 4 * hw];
            for b in 0..bsz {
                let xb = &x.data()[b * c * hw..(b + 1) * c * hw];
                // tmp[(o*4+q), p] = sum_c w[c, o*4+q] * x[c, p]
                gemm(o * 4, c, hw, w.data(), (1, o * 4), xb, (hw, 1), &mut tmp, false);
                let ob = &mut out[b * o * 4 * hw..(b + 1) * o * 4 * hw];
                for oc in 0..o {
                    let bv = inputs.get(2).map_or(0.0, |t| t.data()[oc]);
                    for q in 0..4 {
                        let (di, dj) = (q / 2, q % 2);
                        let src = &tmp[(oc * 4 + q) * hw..(oc * 4 + q + 1) * hw];
                        for i in 0..h {
                            for j in 0..wd {
                                ob[oc * 4 * hw + (2 * i + di) * 2 * wd + 2 * j + dj] =
                                    src[i * wd + j] + bv;
                            }
                        }
                    }
                }
            }
            Ok(Tensor::from_parts(vec![bsz, o, 2 * h, 2 * wd], out))
        }
        Op::MaxPool2d => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            let (lead, h, w) = spatial(op, inputs)?;
            let (oh, ow) = (h / 2, w / 2);
            if oh == 0 || ow == 0 {
                return Err(shape_err(op, inputs, "spatial extent below 2"));
            }
            let mut out = vec![0.0; lead * oh * ow];
            for p in 0..lead {
                let src = &x.data()[p * h * w..];
                for i in 0..oh {
                    for j in 0..ow {
                        let (idx, _) = pool_argmax(src, w, i, j);
                        out[p * oh * ow + i * ow + j] = src[idx];
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            let nd = shape.len();
            shape[nd - 2] = oh;
            shape[nd - 1] = ow;
            Ok(Tensor::from_parts(shape, out))
        }
        Op::Bilinear { out_h, out_w } => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            let (lead, h, w) = spatial(op, inputs)?;
            if *out_h == 0 || *out_w == 0 {
                return Err(shape_err(op, inputs, "output extent must be positive"));
            }
            let rows = bilinear_taps(h, *out_h);
            let cols = bilinear_taps(w, *out_w);
            let mut out = vec![0.0; lead * out_h * out_w];
            for p in 0..lead {
                let src = &x.data()[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
                    for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let top = lerp_clamped(src[r0 * w + c0], src[r0 * w + c1], fc);
                        let bot = lerp_clamped(src[r1 * w + c0], src[r1 * w + c1], fc);
                        dst[i * out_w + j] = lerp_clamped(top, bot, fr);
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            let nd = shape.len();
            shape[nd - 2] = *out_h;
            shape[nd - 1] = *out_w;
            Ok(Tensor::from_parts(shape, out))
        }
        Op::AdaptiveAvgPool2d { out_h, out_w } => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            let (lead, h, w) = spatial(op, inputs)?;
            if *out_h == 0 || *out_w == 0 {
                return Err(shape_err(op, inputs, "output extent must be positive"));
            }
            let mut out = vec![0.0; lead * out_h * out_w];
            for p in 0..lead {
                let src = &x.data()[p * h * w..];
                for i in 0..*out_h {
                    let (r0, r1) = pool_range(i, h, *out_h);
                    for j in 0..*out_w {
                        let (c0, c1) = pool_range(j, w, *out_w);
                        let mut s = 0.0f64;
                        for r in r0..r1 {
                            for c in c0..c1 {
                                s += src[r * w + c] as f64;
                            }
                        }
                        out[p * out_h * out_w + i * out_w + j] =
                            (s / ((r1 - r0) * (c1 - c0)) as f64) as f32;
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            let nd = shape.len();
            shape[nd - 2] = *out_h;
            shape[nd - 1] = *out_w;
            Ok(Tensor::from_parts(shape, out))
        }
        Op::Reshape(shape) => {
            arity(op, inputs, &[1])?;
            inputs[0].clone().reshape(shape.clone())
        }
        Op::Permute(axes) => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            check_perm(op, inputs, axes)?;
            Ok(permute(x, axes))
        }
        Op::Concat { axis } => {
            if inputs.is_empty() {
                return Err(shape_err(op, inputs, "no inputs"));
            }
            let first = inputs[0].shape();
            if *axis >= first.len() {
                return Err(shape_err(op, inputs, "axis out of range"));
            }
            let mut total = 0;
            for t in inputs {
                let s = t.shape();
                if s.len() != first.len()
                    || s.iter().enumerate().any(|(i, &e)| i != *axis && e != first[i])
                {
                    return Err(shape_err(op, inputs, "extents differ off the concat axis"));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = split_axis(first, *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let len = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Ok(Tensor::from_parts(shape, out))
        }
        Op::Slice { axis, start, end } => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            if *axis >= x.ndim() || start >= end || *end > x.shape()[*axis] {
                return Err(shape_err(op, inputs, &format!("bad slice {start}..{end} on axis {axis}")));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let width = (end - start) * inner;
            let mut out = Vec::with_capacity(outer * width);
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                out.extend_from_slice(&x.data()[base..base + width]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            Ok(Tensor::from_parts(shape, out))
        }
        Op::Dropout { p, key, counter } => {
            arity(op, inputs, &[1])?;
            if !(0.0..1.0).contains(p) {
                return Err(shape_err(op, inputs, "dropout probability must be in [0, 1)"));
            }
            let scale = 1.0 / (1.0 - p);
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| if dropout_keep(*p, *key, *counter, i) { v * scale } else { 0.0 })
                .collect();
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        }
        Op::Rope2d(table) => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            rope_check(op, inputs, table)?;
            Ok(rope_apply(x, table, 1.0))
        }
        Op::MaskReplace(mask) => {
            arity(op, inputs, &[2])?;
            let (x, m) = (inputs[0], inputs[1]);
            let d = *x.shape().last().unwrap_or(&0);
            if x.ndim() < 2 || m.shape() != [d] || x.len() / d.max(1) != mask.len() {
                return Err(shape_err(op, inputs, "expected x [.., d], m [d] and one flag per row"));
            }
            let mut data = x.data().to_vec();
            for (row, &masked) in data.chunks_mut(d).zip(mask.iter()) {
                if masked {
                    row.copy_from_slice(m.data());
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        }
        Op::GatherRows(idx) => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            if x.ndim() == 0 {
                return Err(shape_err(op, inputs, "scalar input"));
            }
            let rows = x.shape()[0];
            let width = x.len() / rows.max(1);
            let mut out = Vec::with_capacity(idx.len() * width);
            for &r in idx.iter() {
                if r >= rows {
                    return Err(shape_err(op, inputs, &format!("row index {r} out of range")));
                }
                out.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = idx.len();
            Ok(Tensor::from_parts(shape, out))
        }
        Op::CosineRows { eps } => {
            arity(op, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() || a.ndim() != 2 {
                return Err(shape_err(op, inputs, "expected two equal [m, D] inputs"));
            }
            let dd = a.shape()[1];
            let out = a
                .data()
                .chunks(dd)
                .zip(b.data().chunks(dd))
                .map(|(ra, rb)| {
                    let (dot, na, nb) = dot_norms(ra, rb);
                    (dot / (na * nb).max(*eps as f64)) as f32
                })
                .collect();
            Ok(Tensor::from_parts(vec![a.shape()[0]], out))
        }
        Op::BceWithLogits => {
            arity(op, inputs, &[2])?;
            let (x, y) = (inputs[0], inputs[1]);
            if x.shape() != y.shape() || x.is_empty() {
                return Err(shape_err(op, inputs, "logits and labels must share a non-empty shape"));
            }
            let mut s = 0.0f64;
            for (&l, &t) in x.data().iter().zip(y.data()) {
                s += (l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()) as f64;
            }
            Ok(Tensor::scalar((s / x.len() as f64) as f32))
        }
        Op::CrossEntropy(targets) => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            if x.ndim() != 2 || x.shape()[0] != targets.len() || x.shape()[0] == 0 {
                return Err(shape_err(op, inputs, "expected [M, C] logits and M targets"));
            }
            let c = x.shape()[1];
            let mut s = 0.0f64;
            for (row, &t) in x.data().chunks(c).zip(targets.iter()) {
                if t >= c {
                    return Err(shape_err(op, inputs, &format!("target class {t} >= {c}")));
                }
                s += logsumexp(row) - row[t] as f64;
            }
            Ok(Tensor::scalar((s / targets.len() as f64) as f32))
        }
    }
}

/// Gradients of a primitive's inputs given the upstream gradient of its
/// output. Entries are `None` for inputs that carry no gradient.
pub fn primitive_backward(op: &Op, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let output = forward_unchecked(op, inputs)?;
    let needs = default_needs(op, inputs.len());
    backward_with_output(op, inputs, &output, upstream, &needs)
}

/// Which inputs are differentiable by default.
pub(crate) fn default_needs(op: &Op, n: usize) -> Vec<bool> {
    match op {
        Op::BceWithLogits => vec![true, false],
        _ => vec![true; n],
    }
}

pub(crate) fn backward_with_output(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    if g.shape() != output.shape() {
        return Err(Error::shape(
            op.name(),
            format!("upstream gradient {:?} vs output {:?}", g.shape(), output.shape()),
        ));
    }
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    let mut grads: Vec<Option<Tensor>> = vec![None; inputs.len()];
    match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, m, k, n, b_batched) = matmul_dims(op, inputs)?;
            if need(0) {
                let mut ga = vec![0.0; a.len()];
                for bi in 0..batch {
                    let bo = if b_batched { bi * k * n } else { 0 };
                    // ga = g * b^T
                    gemm(m, n, k, &g.data()[bi * m * n..], (n, 1), &b.data()[bo..], (1, n), &mut ga[bi * m * k..], false);
                }
                grads[0] = Some(Tensor::from_parts(a.shape().to_vec(), ga));
            }
            if need(1) {
                let mut gb = vec![0.0; b.len()];
                for bi in 0..batch {
                    let bo = if b_batched { bi * k * n } else { 0 };
                    // gb = a^T * g
                    gemm(k, m, n, &a.data()[bi * m * k..], (1, k), &g.data()[bi * m * n..], (n, 1), &mut gb[bo..], !b_batched && bi > 0);
                }
                grads[1] = Some(Tensor::from_parts(b.shape().to_vec(), gb));
            }
        }
        Op::Add => {
            if need(0) {
                grads[0] = Some(g.clone());
            }
            if need(1) {
                grads[1] = Some(reduce_to_suffix(g.data(), inputs[1]));
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let bl = b.len();
            if need(0) {
                let data = g.data().iter().enumerate().map(|(i, &gv)| gv * b.data()[i % bl]).collect();
                grads[0] = Some(Tensor::from_parts(a.shape().to_vec(), data));
            }
            if need(1) {
                let prod: Vec<f32> = g.data().iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
                grads[1] = Some(reduce_to_suffix(&prod, b));
            }
        }
        Op::Scale(s) => {
            grads[0] = Some(g.map(|v| v * s));
        }
        Op::AddScalar(_) => {
            grads[0] = Some(g.clone());
        }
        Op::Linear => {
            let (x, w) = (inputs[0], inputs[1]);
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            let rows = x.len() / din.max(1);
            if need(0) {
                let mut gx = vec![0.0; x.len()];
                gemm(rows, dout, din, g.data(), (dout, 1), w.data(), (1, dout), &mut gx, false);
                grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), gx));
            }
            if need(1) {
                let mut gw = vec![0.0; w.len()];
                gemm(din, rows, dout, x.data(), (1, din), g.data(), (dout, 1), &mut gw, false);
                grads[1] = Some(Tensor::from_parts(w.shape().to_vec(), gw));
            }
            if inputs.len() > 2 && need(2) {
                grads[2] = Some(reduce_to_suffix(g.data(), inputs[2]));
            }
        }
        Op::LayerNorm { eps } => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let d = gamma.len();
            let mut gx = vec![0.0; x.len()];
            let mut ggamma = vec![0.0f64; d];
            let mut gbeta = vec![0.0f64; d];
            let mut xhat = vec![0.0f64; d];
            let mut gxhat = vec![0.0f64; d];
            for ((row, grow), out) in x.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d)) {
                let (mean, rstd) = row_moments(row, *eps);
                let (mut s1, mut s2) = (0.0f64, 0.0f64);
                for i in 0..d {
                    xhat[i] = (row[i] as f64 - mean) * rstd;
                    gxhat[i] = grow[i] as f64 * gamma.data()[i] as f64;
                    s1 += gxhat[i];
                    s2 += gxhat[i] * xhat[i];
                    ggamma[i] += grow[i] as f64 * xhat[i];
                    gbeta[i] += grow[i] as f64;
                }
                let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                for i in 0..d {
                    out[i] = (rstd * (gxhat[i] - m1 - xhat[i] * m2)) as f32;
                }
            }
            grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), gx));
            grads[1] = Some(Tensor::from_parts(vec![d], ggamma.iter().map(|&v| v as f32).collect()));
            grads[2] = Some(Tensor::from_parts(vec![d], gbeta.iter().map(|&v| v as f32).collect()));
        }
        Op::Softmax => {
            let d = *output.shape().last().unwrap();
            let mut gx = vec![0.0; output.len()];
            for ((y, gr), o) in output.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: f64 = y.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                for i in 0..d {
                    o[i] = y[i] * (gr[i] - dot as f32);
                }
            }
            grads[0] = Some(Tensor::from_parts(output.shape().to_vec(), gx));
        }
        Op::Silu => {
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| {
                    let s = sigmoid(v);
                    gv * s * (1.0 + v * (1.0 - s))
                })
                .collect();
            grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), data));
        }
        Op::Gelu => {
            let x = inputs[0];
            let data = x.data().iter().zip(g.data()).map(|(&v, &gv)| gv * gelu_grad(v)).collect();
            grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), data));
        }
        Op::Relu => {
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                .collect();
            grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), data));
        }
        Op::Mean { axis } => {
            let x = inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut gx = vec![0.0; x.len()];
            let inv = 1.0 / len as f32;
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        gx[(o * len + a) * inner + i] = g.data()[o * inner + i] * inv;
                    }
                }
            }
            grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::SumAll => {
            grads[0] = Some(Tensor::full(inputs[0].shape().to_vec(), g.item()));
        }
        Op::MeanAll => {
            let x = inputs[0];
            grads[0] = Some(Tensor::full(x.shape().to_vec(), g.item() / x.len() as f32));
        }
        Op::Conv2d { stride, padding } => {
            let (x, w) = (inputs[0], inputs[1]);
            let (bsz, geo) = conv_geom(op, inputs, *stride, *padding)?;
            let o = w.shape()[0];
            let ckk = geo.c * geo.kh * geo.kw;
            let plane = geo.oh * geo.ow;
            let chw = geo.c * geo.h * geo.w;
            let mut gx = if need(0) { vec![0.0; x.len()] } else { Vec::new() };
            let mut gw = vec![0.0; if need(1) { w.len() } else { 0 }];
            let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; ckk * plane] };
            let mut gcols = if geo.is_pointwise() || !need(0) { Vec::new() } else { vec![0.0; ckk * plane] };
            for b in 0..bsz {
                let gb = &g.data()[b * o * plane..(b + 1) * o * plane];
                let xb = &x.data()[b * chw..(b + 1) * chw];
                if need(1) {
                    let colref: &[f32] = if geo.is_pointwise() {
                        xb
                    } else {
                        geo.im2col(xb, &mut cols);
                        &cols
                    };
                    // gw += g_b * cols^T
                    gemm(o, plane, ckk, gb, (plane, 1), colref, (1, plane), &mut gw, b > 0);
                }
                if need(0) {
                    let gxb = &mut gx[b * chw..(b + 1) * chw];
                    if geo.is_pointwise() {
                        gemm(ckk, o, plane, w.data(), (1, ckk), gb, (plane, 1), gxb, false);
                    } else {
                        gemm(ckk, o, plane, w.data(), (1, ckk), gb, (plane, 1), &mut gcols, false);
                        geo.col2im(&gcols, gxb);
                    }
                }
            }
            if need(0) {
                grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), gx));
            }
            if need(1) {
                grads[1] = Some(Tensor::from_parts(w.shape().to_vec(), gw));
            }
            if inputs.len() > 2 && need(2) {
                grads[2] = Some(channel_sums(g, o));
            }
        }
        Op::ConvTranspose2d => {
            let (x, w) = (inputs[0], inputs[1]);
            let (bsz, c, h, wd, o) = deconv_dims(op, inputs)?;
            let hw = h * wd;
            let mut gtmp = vec![0.0; o * 4 * hw];
            let mut gx = if need(0) { vec![0.0; x.len()] } else { Vec::new() };
            let mut gw = vec![0.0; if need(1) { w.len() } else { 0 }];
            for b in 0..bsz {
                let gb = &g.data()[b * o * 4 * hw..(b + 1) * o * 4 * hw];
                for oc in 0..o {
                    for q in 0..4 {
                        let (di, dj) = (q / 2, q % 2);
                        let dst = &mut gtmp[(oc * 4 + q) * hw..(oc * 4 + q + 1) * hw];
                        for i in 0..h {
                            for j in 0..wd {
                                dst[i * wd + j] = gb[oc * 4 * hw + (2 * i + di) * 2 * wd + 2 * j + dj];
                            }
                        }
                    }
                }
                let xb = &x.data()[b * c * hw..(b + 1) * c * hw];
                if need(0) {
                    // gx[c, p] = sum_q w[c, q] * gtmp[q, p]
                    gemm(c, o * 4, hw, w.data(), (o * 4, 1), &gtmp, (hw, 1), &mut gx[b * c * hw..(b + 1) * c * hw], false);
                }
                if need(1) {
                    // gw[c, q] += sum_p x[c, p] * gtmp[q, p]
                    gemm(c, hw, o * 4, xb, (hw, 1), &gtmp, (1, hw), &mut gw, b > 0);
                }
            }
            if need(0) {
                grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), gx));
            }
            if need(1) {
                grads[1] = Some(Tensor::from_parts(w.shape().to_vec(), gw));
            }
            if inputs.len() > 2 && need(2) {
                grads[2] = Some(channel_sums(g, o));
            }
        }
        Op::MaxPool2d => {
            let x = inputs[0];
            let (lead, h, w) = spatial(op, inputs)?;
            let (oh, ow) = (h / 2, w / 2);
            let mut gx = vec![0.0; x.len()];
            for p in 0..lead {
                let src = &x.data()[p * h * w..];
                for i in 0..oh {
                    for j in 0..ow {
                        let (idx, _) = pool_argmax(src, w, i, j);
                        gx[p * h * w + idx] += g.data()[p * oh * ow + i * ow + j];
                    }
                }
            }
            grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::Bilinear { out_h, out_w } => {
            let x = inputs[0];
            let (lead, h, w) = spatial(op, inputs)?;
            let rows = bilinear_taps(h, *out_h);
            let cols = bilinear_taps(w, *out_w);
            let mut gx = vec![0.0; x.len()];
            for p in 0..lead {
                let gsrc = &g.data()[p * out_h * out_w..];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
                    for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let gv = gsrc[i * out_w + j];
                        let (gt, gbm) = (gv * (1.0 - fr), gv * fr);
                        dst[r0 * w + c0] += gt * (1.0 - fc);
                        dst[r0 * w + c1] += gt * fc;
                        dst[r1 * w + c0] += gbm * (1.0 - fc);
                        dst[r1 * w + c1] += gbm * fc;
                    }
                }
            }
            grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::AdaptiveAvgPool2d { out_h, out_w } => {
            let x = inputs[0];
            let (lead, h, w) = spatial(op, inputs)?;
            let mut gx = vec![0.0; x.len()];
            for p in 0..lead {
                for i in 0..*out_h {
                    let (r0, r1) = pool_range(i, h, *out_h);
                    for j in 0..*out_w {
                        let (c0, c1) = pool_range(j, w, *out_w);
                        let share = g.data()[p * out_h * out_w + i * out_w + j] / ((r1 - r0) * (c1 - c0)) as f32;
                        for r in r0..r1 {
                            for c in c0..c1 {
                                gx[p * h * w + r * w + c] += share;
                            }
                        }
                    }
                }
            }
            grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::Reshape(_) => {
            grads[0] = Some(g.clone().reshape(inputs[0].shape().to_vec())?);
        }
        Op::Permute(axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            grads[0] = Some(permute(g, &inv));
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = split_axis(output.shape(), *axis);
            let mut offset = 0;
            for (ti, t) in inputs.iter().enumerate() {
                let len = t.shape()[*axis];
                if need(ti) {
                    let mut part = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    grads[ti] = Some(Tensor::from_parts(t.shape().to_vec(), part));
                }
                offset += len;
            }
        }
        Op::Slice { axis, start, end } => {
            let x = inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let width = (end - start) * inner;
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                gx[base..base + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
            }
            grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::Dropout { p, key, counter } => {
            let scale = 1.0 / (1.0 - p);
            let data = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, &gv)| if dropout_keep(*p, *key, *counter, i) { gv * scale } else { 0.0 })
                .collect();
            grads[0] = Some(Tensor::from_parts(g.shape().to_vec(), data));
        }
        Op::Rope2d(table) => {
            grads[0] = Some(rope_apply(g, table, -1.0));
        }
        Op::MaskReplace(mask) => {
            let (x, m) = (inputs[0], inputs[1]);
            let d = m.len();
            let mut gx = g.data().to_vec();
            let mut gm = vec![0.0f64; d];
            for (row, &masked) in gx.chunks_mut(d).zip(mask.iter()) {
                if masked {
                    for (acc, v) in gm.iter_mut().zip(row.iter_mut()) {
                        *acc += *v as f64;
                        *v = 0.0;
                    }
                }
            }
            grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), gx));
            grads[1] = Some(Tensor::from_parts(vec![d], gm.iter().map(|&v| v as f32).collect()));
        }
        Op::GatherRows(idx) => {
            let x = inputs[0];
            let width = x.len() / x.shape()[0].max(1);
            let mut gx = vec![0.0; x.len()];
            for (k, &r) in idx.iter().enumerate() {
                for (dst, &src) in gx[r * width..(r + 1) * width].iter_mut().zip(&g.data()[k * width..(k + 1) * width]) {
                    *dst += src;
                }
            }
            grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::CosineRows { eps } => {
            let (a, b) = (inputs[0], inputs[1]);
            let dd = a.shape()[1];
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for (r, (ra, rb)) in a.data().chunks(dd).zip(b.data().chunks(dd)).enumerate() {
                let (dot, na, nb) = dot_norms(ra, rb);
                let gr = g.data()[r] as f64;
                let denom = na * nb;
                if denom > *eps as f64 {
                    let cos = dot / denom;
                    for i in 0..dd {
                        let (x, y) = (ra[i] as f64, rb[i] as f64);
                        ga[r * dd + i] = (gr * (y / denom - cos * x / (na * na))) as f32;
                        gb[r * dd + i] = (gr * (x / denom - cos * y / (nb * nb))) as f32;
                    }
                } else {
                    let inv = 1.0 / *eps as f64;
                    for i in 0..dd {
                        ga[r * dd + i] = (gr * rb[i] as f64 * inv) as f32;
                        gb[r * dd + i] = (gr * ra[i] as f64 * inv) as f32;
                    }
                }
            }
            grads[0] = Some(Tensor::from_parts(a.shape().to_vec(), ga));
            grads[1] = Some(Tensor::from_parts(b.shape().to_vec(), gb));
        }
        Op::BceWithLogits => {
            if need(1) {
                return Err(Error::NoGradient { op: op.name(), input: 1 });
            }
            let (x, y) = (inputs[0], inputs[1]);
            let scale = g.item() / x.len() as f32;
            let data = x.data().iter().zip(y.data()).map(|(&l, &t)| (sigmoid(l) - t) * scale).collect();
            grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), data));
        }
        Op::CrossEntropy(targets) => {
            let x = inputs[0];
            let c = x.shape()[1];
            let scale = g.item() as f64 / targets.len() as f64;
            let mut gx = vec![0.0; x.len()];
            for ((row, o), &t) in x.data().chunks(c).zip(gx.chunks_mut(c)).zip(targets.iter()) {
                let lse = logsumexp(row);
                for i in 0..c {
                    let p = (row[i] as f64 - lse).exp();
                    o[i] = ((p - if i == t { 1.0 } else { 0.0 }) * scale) as f32;
                }
            }
            grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), gx));
        }
    }
    for (i, slot) in grads.iter_mut().enumerate() {
        if !need(i) {
            *slot = None;
        }
    }
    Ok(grads)
}

fn matmul_dims(op: &Op, inputs: &[&Tensor]) -> Result<(usize, usize, usize, usize, bool)> {
    let (a, b) = (inputs[0], inputs[1]);
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(shape_err(op, inputs, "operands need at least two axes"));
    }
    let (m, k) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
    let (kb, n) = (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1]);
    if k != kb {
        return Err(shape_err(op, inputs, "inner dimensions differ"));
    }
    let batch: usize = a.shape()[..a.ndim() - 2].iter().product();
    let b_batched = b.ndim() > 2;
    if b_batched && a.shape()[..a.ndim() - 2] != b.shape()[..b.ndim() - 2] {
        return Err(shape_err(op, inputs, "batch dimensions differ"));
    }
    Ok((batch, m, k, n, b_batched))
}

fn conv_geom(op: &Op, inputs: &[&Tensor], stride: usize, pad: usize) -> Result<(usize, ConvGeom)> {
    let (x, w) = (inputs[0], inputs[1]);
    if x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1] || stride == 0 {
        return Err(shape_err(op, inputs, "expected x [B, C, H, W] and w [O, C, kh, kw]"));
    }
    if let Some(b) = inputs.get(2) {
        if b.shape() != [w.shape()[0]] {
            return Err(shape_err(op, inputs, "bias must be [O]"));
        }
    }
    let (h, wd, kh, kw) = (x.shape()[2], x.shape()[3], w.shape()[2], w.shape()[3]);
    let oh = conv_out(h, kh, stride, pad).ok_or_else(|| shape_err(op, inputs, "kernel larger than input"))?;
    let ow = conv_out(wd, kw, stride, pad).ok_or_else(|| shape_err(op, inputs, "kernel larger than input"))?;
    Ok((
        x.shape()[0],
        ConvGeom { c: x.shape()[1], h, w: wd, kh, kw, oh, ow, stride, pad },
    ))
}

fn deconv_dims(op: &Op, inputs: &[&Tensor]) -> Result<(usize, usize, usize, usize, usize)> {
    let (x, w) = (inputs[0], inputs[1]);
    if x.ndim() != 4 || w.ndim() != 4 || w.shape()[0] != x.shape()[1] || w.shape()[2..] != [2, 2] {
        return Err(shape_err(op, inputs, "expected x [B, C, H, W] and w [C, O, 2, 2]"));
    }
    if let Some(b) = inputs.get(2) {
        if b.shape() != [w.shape()[1]] {
            return Err(shape_err(op, inputs, "bias must be [O]"));
        }
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], w.shape()[1]))
}

fn spatial(op: &Op, inputs: &[&Tensor]) -> Result<(usize, usize, usize)> {
    let x = inputs[0];
    if x.ndim() < 2 {
        return Err(shape_err(op, inputs, "need at least two spatial axes"));
    }
    let (h, w) = (x.shape()[x.ndim() - 2], x.shape()[x.ndim() - 1]);
    if h == 0 || w == 0 {
        return Err(shape_err(op, inputs, "empty spatial extent"));
    }
    Ok((x.len() / (h * w), h, w))
}

fn pool_argmax(src: &[f32], w: usize, i: usize, j: usize) -> (usize, f32) {
    let mut best = (2 * i * w + 2 * j, f32::NEG_INFINITY);
    for di in 0..2 {
        for dj in 0..2 {
            let idx = (2 * i + di) * w + 2 * j + dj;
            if src[idx] > best.1 {
                best = (idx, src[idx]);
            }
        }
    }
    best
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_perm(op: &Op, inputs: &[&Tensor], axes: &[usize]) -> Result<()> {
    let n = inputs[0].ndim();
    let mut seen = vec![false; n];
    if axes.len() != n {
        return Err(shape_err(op, inputs, &format!("permutation {axes:?} has wrong rank")));
    }
    for &a in axes {
        if a >= n || seen[a] {
            return Err(shape_err(op, inputs, &format!("invalid permutation {axes:?}")));
        }
        seen[a] = true;
    }
    Ok(())
}

fn permute(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_strides = Tensor::strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    if nd == 0 {
        return x.clone();
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let last = nd - 1;
    let (last_len, last_stride) = (out_shape[last], src_strides[last]);
    while out.len() < n {
        for t in 0..last_len {
            out.push(x.data()[off + t * last_stride]);
        }
        // advance the multi-index over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn reduce_to_suffix(g: &[f32], target: &Tensor) -> Tensor {
    let n = target.len();
    let mut acc = vec![0.0f64; n];
    for (i, &v) in g.iter().enumerate() {
        acc[i % n] += v as f64;
    }
    Tensor::from_parts(target.shape().to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

fn channel_sums(g: &Tensor, channels: usize) -> Tensor {
    let (b, plane) = (g.shape()[0], g.len() / (g.shape()[0] * channels));
    let mut acc = vec![0.0f64; channels];
    for bi in 0..b {
        for (c, a) in acc.iter_mut().enumerate() {
            let base = (bi * channels + c) * plane;
            *a += g.data()[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    Tensor::from_parts(vec![channels], acc.into_iter().map(|v| v as f32).collect())
}

fn row_moments(row: &[f32], eps: f32) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps as f64).sqrt())
}

fn dot_norms(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    (dot, na.sqrt(), nb.sqrt())
}

fn logsumexp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln()
}

fn rope_check(op: &Op, inputs: &[&Tensor], table: &RopeTable) -> Result<()> {
    let x = inputs[0];
    if x.ndim() != 4 || x.shape()[2] != table.tokens || x.shape()[3] != 2 * table.pairs {
        return Err(shape_err(op, inputs, "expected [B, heads, tokens, dh] matching the rotation table"));
    }
    Ok(())
}

/// Rotates each pair `(2p, 2p+1)` of every token by `sign * angle`.
fn rope_apply(x: &Tensor, table: &RopeTable, sign: f32) -> Tensor {
    let dh = 2 * table.pairs;
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(dh).enumerate() {
        let t = r % table.tokens;
        let cos = &table.cos[t * table.pairs..(t + 1) * table.pairs];
        let sin = &table.sin[t * table.pairs..(t + 1) * table.pairs];
        for p in 0..table.pairs {
            let (c, s) = (cos[p], sign * sin[p]);
            let (a, b) = (row[2 * p], row[2 * p + 1]);
            row[2 * p] = a * c - b * s;
            row[2 * p + 1] = a * s + b * c;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = primitive_forward(&Op::Softmax, &[&t(&[3], &[0.0, 0.0, 0.0])]).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn silu_at_zero() {
        let y = primitive_forward(&Op::Silu, &[&t(&[1], &[0.0])]).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let x = t(&[1, 4], &[2.5; 4]);
        let gamma = Tensor::full([4], 1.0);
        let beta = Tensor::zeros([4]);
        let y = primitive_forward(&Op::LayerNorm { eps: 1e-6 }, &[&x, &gamma, &beta]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mul_backward_is_product_rule() {
        let x = t(&[2], &[3.0, -1.0]);
        let y = t(&[2], &[0.5, 4.0]);
        let g = t(&[2], &[2.0, 1.0]);
        let grads = primitive_backward(&Op::Mul, &[&x, &y], &g).unwrap();
        assert_eq!(grads[0].as_ref().unwrap().data(), &[1.0, 4.0]);
        assert_eq!(grads[1].as_ref().unwrap().data(), &[6.0, -1.0]);
    }

    #[test]
    fn relu_backward_dead_region() {
        let grads = primitive_backward(&Op::Relu, &[&t(&[2], &[-1.0, 2.0])], &t(&[2], &[5.0, 5.0])).unwrap();
        assert_eq!(grads[0].as_ref().unwrap().data(), &[0.0, 5.0]);
    }

    #[test]
    fn linear_bias_grad_sums_batch() {
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        let g = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let grads = primitive_backward(&Op::Linear, &[&x, &w, &b], &g).unwrap();
        assert_eq!(grads[2].as_ref().unwrap().data(), &[9.0, 12.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let err = primitive_forward(&Op::MatMul, &[&Tensor::zeros([2, 3]), &Tensor::zeros([4, 2])]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let err = primitive_forward(&Op::Scale(f32::MAX), &[&t(&[1], &[4.0])]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }

    #[test]
    fn bce_labels_have_no_gradient() {
        let x = t(&[2], &[0.1, 0.2]);
        let y = t(&[2], &[1.0, 0.0]);
        let out = forward_unchecked(&Op::BceWithLogits, &[&x, &y]).unwrap();
        let err = backward_with_output(&Op::BceWithLogits, &[&x, &y], &out, &Tensor::scalar(1.0), &[true, true]).unwrap_err();
        assert!(matches!(err, Error::NoGradient { input: 1, .. }));
    }

    #[test]
    fn dropout_scales_kept_values() {
        let x = Tensor::full([1000], 1.0);
        let y = primitive_forward(&Op::Dropout { p: 0.2, key: 7, counter: 0 }, &[&x]).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count();
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-6));
        assert!((700..900).contains(&kept), "{kept}");
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = primitive_forward(&Op::Permute(vec![1, 0]), &[&x]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let x3 = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let y3 = primitive_forward(&Op::Permute(vec![2, 0, 1]), &[&x3]).unwrap();
        assert_eq!(y3.shape(), &[4, 2, 3]);
        // y3[k, i, j] = x3[i, j, k]
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(y3.data()[k * 6 + i * 3 + j], x3.data()[i * 12 + j * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn conv_transpose_places_kernel_taps() {
        let x = t(&[1, 1, 1, 1], &[2.0]);
        let w = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = primitive_forward(&Op::ConvTranspose2d, &[&x, &w]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let x = Tensor::new(vec![1, 2, 4, 4], (0..32).map(|v| (v as f32 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::new(vec![3, 2, 3, 3], (0..54).map(|v| (v as f32 * 0.11).cos()).collect()).unwrap();
        let y = primitive_forward(&Op::Conv2d { stride: 1, padding: 1 }, &[&x, &w]).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        for o in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (yy, xx) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                if (0..4).contains(&yy) && (0..4).contains(&xx) {
                                    s += x.data()[c * 16 + yy as usize * 4 + xx as usize]
                                        * w.data()[((o * 2 + c) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                    }
                    assert!((y.data()[o * 16 + i * 4 + j] - s).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn adaptive_pool_with_more_bins_than_pixels() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = primitive_forward(&Op::AdaptiveAvgPool2d { out_h: 3, out_w: 3 }, &[&x]).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[4], 2.5);
        assert_eq!(y.data()[8], 4.0);
    }
}
