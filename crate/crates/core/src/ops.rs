//! Layer kernels: forward and backward passes on channels-last (`B x H x W x C`) tensors.
//!
//! These are plain functions over [`Tensor`]s. The autodiff graph in
//! [`crate::autograd`] records which kernel produced each node and calls the
//! matching backward function here.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Result, Tensor, TensorError};

/// Spatial padding convention for convolution and pooling windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    Valid,
    /// Zero padding so that `out = ceil(in / stride)`; an odd total puts the extra cell last.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    Relu,
    Tanh,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Output extent and padding along one spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub out: usize,
    pub pad_before: usize,
    pub pad_after: usize,
}

pub fn window_geometry(
    op: &'static str,
    axis: &'static str,
    input: usize,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<Geometry> {
    if window == 0 || stride == 0 {
        return Err(TensorError::Invalid {
            op,
            message: format!("window {window} and stride {stride} must be positive"),
        });
    }
    match padding {
        Padding::Valid => {
            if window > input {
                return Err(TensorError::Dimension {
                    op,
                    axis,
                    expected: window,
                    actual: input,
                });
            }
            Ok(Geometry {
                out: (input - window) / stride + 1,
                pad_before: 0,
                pad_after: 0,
            })
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + window).saturating_sub(input);
            let pad_before = total / 2;
            Ok(Geometry {
                out,
                pad_before,
                pad_after: total - pad_before,
            })
        }
    }
}

/// Maximum number of im2col elements materialised at once.
const TILE_ELEMS: usize = 1 << 21;

struct ConvShape {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    f: usize,
    stride: usize,
    gy: Geometry,
    gx: Geometry,
}

impl ConvShape {
    fn new<T: Real>(
        input: &Tensor<T>,
        kernels: &Tensor<T>,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (batch, h, w, c) = input.dims4("conv2d")?;
        kernels.expect_rank("conv2d", 4)?;
        let ks = kernels.shape();
        let (kh, kw, kc, f) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(TensorError::Dimension {
                op: "conv2d",
                axis: "channels",
                expected: kc,
                actual: c,
            });
        }
        let gy = window_geometry("conv2d", "height", h, kh, stride, padding)?;
        let gx = window_geometry("conv2d", "width", w, kw, stride, padding)?;
        Ok(Self {
            batch,
            h,
            w,
            c,
            kh,
            kw,
            f,
            stride,
            gy,
            gx,
        })
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn out_pixels(&self) -> usize {
        self.gy.out * self.gx.out
    }

    fn pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.stride == 1
            && self.gy.pad_before == 0
            && self.gx.pad_before == 0
    }

    fn tile_rows(&self) -> usize {
        (TILE_ELEMS / self.patch().max(1)).clamp(1, self.out_pixels())
    }

    /// Fill `cols` with patches for output pixels `r0..r0 + rows` of image `b`.
    fn im2col<T: Real>(&self, input: &[T], b: usize, r0: usize, rows: usize, cols: &mut [T]) {
        let patch = self.patch();
        let img = &input[b * self.h * self.w * self.c..(b + 1) * self.h * self.w * self.c];
        for r in 0..rows {
            let (oy, ox) = ((r0 + r) / self.gx.out, (r0 + r) % self.gx.out);
            let row = &mut cols[r * patch..(r + 1) * patch];
            for ky in 0..self.kh {
                let iy = (oy * self.stride + ky) as isize - self.gy.pad_before as isize;
                for kx in 0..self.kw {
                    let ix = (ox * self.stride + kx) as isize - self.gx.pad_before as isize;
                    let dst = &mut row[(ky * self.kw + kx) * self.c..(ky * self.kw + kx + 1) * self.c];
                    if iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * self.w + ix as usize) * self.c;
                        dst.copy_from_slice(&img[src..src + self.c]);
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], b: usize, r0: usize, rows: usize, grad: &mut [T]) {
        let patch = self.patch();
        let img = &mut grad[b * self.h * self.w * self.c..(b + 1) * self.h * self.w * self.c];
        for r in 0..rows {
            let (oy, ox) = ((r0 + r) / self.gx.out, (r0 + r) % self.gx.out);
            let row = &cols[r * patch..(r + 1) * patch];
            for ky in 0..self.kh {
                let iy = (oy * self.stride + ky) as isize - self.gy.pad_before as isize;
                if iy < 0 || iy as usize >= self.h {
                    continue;
                }
                for kx in 0..self.kw {
                    let ix = (ox * self.stride + kx) as isize - self.gx.pad_before as isize;
                    if ix < 0 || ix as usize >= self.w {
                        continue;
                    }
                    let src = &row[(ky * self.kw + kx) * self.c..(ky * self.kw + kx + 1) * self.c];
                    let dst = (iy as usize * self.w + ix as usize) * self.c;
                    for (d, &s) in img[dst..dst + self.c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// 2-D convolution. `input` is `B x H x W x C` (or `H x W x C`), `kernels` is `k x k x C x F`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    if input.rank() == 3 {
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        let out = conv2d(&input.clone().reshape(shape)?, kernels, bias, stride, padding)?;
        let s = out.shape()[1..].to_vec();
        return out.reshape(s);
    }
    let cs = ConvShape::new(input, kernels, stride, padding)?;
    if let Some(b) = bias {
        b.expect_shape("conv2d bias", &[cs.f])?;
    }
    let (patch, pixels) = (cs.patch(), cs.out_pixels());
    let mut out = vec![T::zero(); cs.batch * pixels * cs.f];
    if cs.pointwise() {
        T::gemm(
            cs.batch * pixels,
            cs.c,
            cs.f,
            input.data(),
            false,
            kernels.data(),
            false,
            T::zero(),
            &mut out,
        );
    } else {
        let tile = cs.tile_rows();
        let mut cols = vec![T::zero(); tile * patch];
        for b in 0..cs.batch {
            let mut r0 = 0;
            while r0 < pixels {
                let rows = tile.min(pixels - r0);
                cs.im2col(input.data(), b, r0, rows, &mut cols);
                let o = (b * pixels + r0) * cs.f;
                T::gemm(
                    rows,
                    patch,
                    cs.f,
                    &cols,
                    false,
                    kernels.data(),
                    false,
                    T::zero(),
                    &mut out[o..o + rows * cs.f],
                );
                r0 += rows;
            }
        }
    }
    if let Some(b) = bias {
        for px in out.chunks_mut(cs.f) {
            for (v, &bv) in px.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Tensor::new([cs.batch, cs.gy.out, cs.gx.out, cs.f], out)
}

/// Gradients of [`conv2d`] with respect to input, kernels and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let cs = ConvShape::new(input, kernels, stride, padding)?;
    grad_out.expect_shape("conv2d backward", &[cs.batch, cs.gy.out, cs.gx.out, cs.f])?;
    let (patch, pixels) = (cs.patch(), cs.out_pixels());
    let mut d_kernel = vec![T::zero(); patch * cs.f];
    let mut d_bias = vec![T::zero(); cs.f];
    for px in grad_out.data().chunks(cs.f) {
        for (d, &g) in d_bias.iter_mut().zip(px) {
            *d += g;
        }
    }
    let mut d_input = need_input.then(|| vec![T::zero(); input.len()]);
    if cs.pointwise() {
        let rows = cs.batch * pixels;
        T::gemm(cs.c, rows, cs.f, input.data(), true, grad_out.data(), false, T::zero(), &mut d_kernel);
        if let Some(di) = d_input.as_mut() {
            T::gemm(rows, cs.f, cs.c, grad_out.data(), false, kernels.data(), true, T::zero(), di);
        }
    } else {
        let tile = cs.tile_rows();
        let mut cols = vec![T::zero(); tile * patch];
        let mut dcols = vec![T::zero(); tile * patch];
        for b in 0..cs.batch {
            let mut r0 = 0;
            while r0 < pixels {
                let rows = tile.min(pixels - r0);
                let o = (b * pixels + r0) * cs.f;
                let dy = &grad_out.data()[o..o + rows * cs.f];
                cs.im2col(input.data(), b, r0, rows, &mut cols);
                T::gemm(patch, rows, cs.f, &cols, true, dy, false, T::one(), &mut d_kernel);
                if let Some(di) = d_input.as_mut() {
                    T::gemm(rows, cs.f, patch, dy, false, kernels.data(), true, T::zero(), &mut dcols);
                    cs.col2im(&dcols, b, r0, rows, di);
                }
                r0 += rows;
            }
        }
    }
    Ok((
        d_input
            .map(|d| Tensor::new(input.shape().to_vec(), d))
            .transpose()?,
        Tensor::new(kernels.shape().to_vec(), d_kernel)?,
        Tensor::new([cs.f], d_bias)?,
    ))
}

/// Result of a pooling pass; `argmax` holds the winning input index per output value for max pooling.
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Option<Vec<usize>>,
}

struct PoolShape {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    window: usize,
    stride: usize,
    gy: Geometry,
    gx: Geometry,
}

impl PoolShape {
    fn new<T: Real>(input: &Tensor<T>, window: usize, stride: usize, padding: Padding) -> Result<Self> {
        let (batch, h, w, c) = input.dims4("pool2d")?;
        Ok(Self {
            batch,
            h,
            w,
            c,
            window,
            stride,
            gy: window_geometry("pool2d", "height", h, window, stride, padding)?,
            gx: window_geometry("pool2d", "width", w, window, stride, padding)?,
        })
    }

    /// In-bounds input row and column ranges of the window for output `(oy, ox)`.
    fn window(&self, oy: usize, ox: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let y0 = (oy * self.stride) as isize - self.gy.pad_before as isize;
        let x0 = (ox * self.stride) as isize - self.gx.pad_before as isize;
        let clamp = |lo: isize, len: usize| {
            let a = lo.max(0) as usize;
            let b = ((lo + self.window as isize).max(0) as usize).min(len);
            a..b.max(a)
        };
        (clamp(y0, self.h), clamp(x0, self.w))
    }
}

/// Max or average pooling; average pooling divides by the number of in-bounds cells.
pub fn pool2d<T: Real>(
    input: &Tensor<T>,
    kind: PoolKind,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<Pooled<T>> {
    let ps = PoolShape::new(input, window, stride, padding)?;
    let (oh, ow, c) = (ps.gy.out, ps.gx.out, ps.c);
    let mut out = vec![T::zero(); ps.batch * oh * ow * c];
    let mut argmax = (kind == PoolKind::Max).then(|| vec![0usize; out.len()]);
    let data = input.data();
    for b in 0..ps.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, xs) = ps.window(oy, ox);
                let count = ys.len() * xs.len();
                if count == 0 {
                    return Err(TensorError::Invalid {
                        op: "pool2d",
                        message: "window lies entirely in padding".into(),
                    });
                }
                let o = ((b * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    let mut acc = T::zero();
                    for iy in ys.clone() {
                        for ix in xs.clone() {
                            let idx = ((b * ps.h + iy) * ps.w + ix) * c + ch;
                            let v = data[idx];
                            if best_idx == usize::MAX || v > best {
                                best = v;
                                best_idx = idx;
                            }
                            acc += v;
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out[o + ch] = best;
                            if let Some(a) = argmax.as_mut() {
                                a[o + ch] = best_idx;
                            }
                        }
                        PoolKind::Avg => out[o + ch] = acc / T::lit(count as f64),
                    }
                }
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new([ps.batch, oh, ow, c], out)?,
        argmax,
    })
}

pub fn pool2d_backward<T: Real>(
    input_shape: &[usize],
    kind: PoolKind,
    window: usize,
    stride: usize,
    padding: Padding,
    argmax: Option<&[usize]>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut grad = Tensor::zeros(input_shape.to_vec());
    match (kind, argmax) {
        (PoolKind::Max, Some(idx)) => {
            let g = grad.data_mut();
            for (&i, &d) in idx.iter().zip(grad_out.data()) {
                g[i] += d;
            }
        }
        (PoolKind::Max, None) => {
            return Err(TensorError::State("max-pool backward without argmax".into()))
        }
        (PoolKind::Avg, _) => {
            let ps = PoolShape::new(&grad, window, stride, padding)?;
            let (oh, ow, c) = (ps.gy.out, ps.gx.out, ps.c);
            let g = grad.data_mut();
            for b in 0..ps.batch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (ys, xs) = ps.window(oy, ox);
                        let inv = T::one() / T::lit((ys.len() * xs.len()) as f64);
                        let o = ((b * oh + oy) * ow + ox) * c;
                        for iy in ys.clone() {
                            for ix in xs.clone() {
                                let base = ((b * ps.h + iy) * ps.w + ix) * c;
                                for ch in 0..c {
                                    g[base + ch] += grad_out.data()[o + ch] * inv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Mean over the spatial axes: `B x H x W x C -> B x C`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = input.dims4("global_avg_pool")?;
    let inv = 1.0 / (h * w) as f64;
    let mut out = vec![T::zero(); b * c];
    for (bi, img) in input.data().chunks(h * w * c).enumerate() {
        let mut acc = vec![0.0f64; c];
        for px in img.chunks(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v.as_f64();
            }
        }
        for (o, a) in out[bi * c..(bi + 1) * c].iter_mut().zip(acc) {
            *o = T::lit(a * inv);
        }
    }
    Tensor::new([b, c], out)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    grad_out.expect_shape("global_avg_pool backward", &[b, c])?;
    let inv = T::one() / T::lit((h * w) as f64);
    let mut g = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        let src = &grad_out.data()[bi * c..(bi + 1) * c];
        for px in g[bi * h * w * c..(bi + 1) * h * w * c].chunks_mut(c) {
            for (d, &s) in px.iter_mut().zip(src) {
                *d = s * inv;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), g)
}

/// Fully connected layer: `out[b, j] = sum_i input[b, i] * weights[i, j] + bias[j]`.
///
/// A rank-1 input is treated as a batch of one and the result is rank 1.
pub fn dense<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    weights.expect_rank("dense", 2)?;
    let (n, m) = (weights.shape()[0], weights.shape()[1]);
    let (batch, inner) = match input.rank() {
        1 => (1, input.shape()[0]),
        2 => (input.shape()[0], input.shape()[1]),
        _ => {
            return Err(TensorError::Rank {
                op: "dense",
                expected: 2,
                shape: input.shape().to_vec(),
            })
        }
    };
    if inner != n {
        return Err(TensorError::Dimension {
            op: "dense",
            axis: "inner",
            expected: n,
            actual: inner,
        });
    }
    let mut out = vec![T::zero(); batch * m];
    if let Some(b) = bias {
        b.expect_shape("dense bias", &[m])?;
        for row in out.chunks_mut(m) {
            row.copy_from_slice(b.data());
        }
    }
    T::gemm(batch, n, m, input.data(), false, weights.data(), false, T::one(), &mut out);
    if input.rank() == 1 {
        Tensor::new([m], out)
    } else {
        Tensor::new([batch, m], out)
    }
}

/// Returns `(d_input, d_weights, d_bias)`.
pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, m) = (weights.shape()[0], weights.shape()[1]);
    let batch = input.len() / n;
    if grad_out.len() != batch * m {
        return Err(TensorError::Dimension {
            op: "dense backward",
            axis: "output",
            expected: batch * m,
            actual: grad_out.len(),
        });
    }
    let mut dx = vec![T::zero(); batch * n];
    T::gemm(batch, m, n, grad_out.data(), false, weights.data(), true, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); n * m];
    T::gemm(n, batch, m, input.data(), true, grad_out.data(), false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); m];
    for row in grad_out.data().chunks(m) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new([n, m], dw)?,
        Tensor::new([m], db)?,
    ))
}

/// Softmax along the final axis, shifted by the row maximum before exponentiation.
pub fn softmax<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let k = input.last_dim();
    if k == 0 || input.is_empty() {
        return Err(TensorError::Invalid {
            op: "softmax",
            message: "final axis must be non-empty".into(),
        });
    }
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = 0.0f64;
        let exps: Vec<f64> = row
            .iter()
            .map(|&v| {
                let e = (v - max).as_f64().exp();
                sum += e;
                e
            })
            .collect();
        for (o, e) in row.iter_mut().zip(exps) {
            *o = T::lit(e / sum);
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of softmax given its output `probs`.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let k = probs.last_dim();
    let mut g = grad_out.clone();
    for (gr, pr) in g.data_mut().chunks_mut(k).zip(probs.data().chunks(k)) {
        let dot: T = gr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
        for (gv, &p) in gr.iter_mut().zip(pr) {
            *gv = p * (*gv - dot);
        }
    }
    Ok(g)
}

pub fn activation<T: Real>(input: &Tensor<T>, kind: ActivationKind) -> Result<Tensor<T>> {
    match kind {
        ActivationKind::Relu => Ok(input.map(|v| v.max(T::zero()))),
        ActivationKind::Tanh => Ok(input.map(|v| v.tanh())),
        ActivationKind::Softmax => softmax(input),
    }
}

/// Residual join `y = F(x) + x`.
pub fn residual_add<T: Real>(block_output: &Tensor<T>, skip_input: &Tensor<T>) -> Result<Tensor<T>> {
    if block_output.shape() != skip_input.shape() {
        let (a, b) = (block_output.shape(), skip_input.shape());
        let axis = a.iter().zip(b).position(|(x, y)| x != y);
        return Err(TensorError::Dimension {
            op: "residual_add",
            axis: match axis {
                Some(i) if i + 1 == a.len() => "channels",
                Some(_) => "spatial",
                None => "rank",
            },
            expected: axis.map_or(a.len(), |i| a[i]),
            actual: axis.map_or(b.len(), |i| b[i]),
        });
    }
    block_output.add(skip_input)
}

/// Running statistics owned by a batch-normalisation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Saved state needed to differentiate a batch-normalisation pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    /// Centred input (infer mode) or normalised input (train mode).
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

pub struct BatchNormOutput<T> {
    pub output: Tensor<T>,
    pub cache: BatchNormCache<T>,
    /// Updated running statistics (train mode only).
    pub running: Option<BatchStats<T>>,
}

/// Batch normalisation over every axis except the last (channel) axis.
///
/// Train mode normalises by batch statistics and blends them into the running
/// statistics as `momentum * running + (1 - momentum) * batch`.
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &BatchStats<T>,
    mode: Mode,
    momentum: f64,
    epsilon: f64,
) -> Result<BatchNormOutput<T>> {
    let c = input.last_dim();
    gamma.expect_shape("batchnorm gamma", &[c])?;
    beta.expect_shape("batchnorm beta", &[c])?;
    if running.mean.len() != c || running.var.len() != c {
        return Err(TensorError::Dimension {
            op: "batchnorm",
            axis: "running statistics",
            expected: c,
            actual: running.mean.len(),
        });
    }
    let n = input.len() / c;
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0f64; c];
            for row in input.data().chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v.as_f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0f64; c];
            for row in input.data().chunks(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v.as_f64() - m;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            (mean, var)
        }
        Mode::Infer => (
            running.mean.iter().map(|v| v.as_f64()).collect(),
            running.var.iter().map(|v| v.as_f64()).collect(),
        ),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + epsilon).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
    let mut xhat = input.clone();
    let mut out = input.clone();
    for (xr, orow) in xhat.data_mut().chunks_mut(c).zip(out.data_mut().chunks_mut(c)) {
        for ch in 0..c {
            let centred = xr[ch] - mean_t[ch];
            let normed = centred * inv_std[ch];
            orow[ch] = gamma.data()[ch] * normed + beta.data()[ch];
            xr[ch] = if mode == Mode::Train { normed } else { centred };
        }
    }
    let running = (mode == Mode::Train).then(|| {
        let mo = T::lit(momentum);
        let blend = |r: &[T], b: &[f64]| -> Vec<T> {
            r.iter()
                .zip(b)
                .map(|(&r, &b)| mo * r + (T::one() - mo) * T::lit(b))
                .collect()
        };
        BatchStats {
            mean: blend(&running.mean, &mean),
            var: blend(&running.var, &var),
        }
    });
    Ok(BatchNormOutput {
        output: out,
        cache: BatchNormCache { xhat, inv_std, mode },
        running,
    })
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gamma.len();
    let n = grad_out.len() / c;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (gr, xr) in grad_out.data().chunks(c).zip(cache.xhat.data().chunks(c)) {
        for ch in 0..c {
            let normed = match cache.mode {
                Mode::Train => xr[ch],
                Mode::Infer => xr[ch] * cache.inv_std[ch],
            };
            dgamma[ch] += (gr[ch] * normed).as_f64();
            dbeta[ch] += gr[ch].as_f64();
        }
    }
    let mut dx = grad_out.clone();
    match cache.mode {
        Mode::Infer => {
            for row in dx.data_mut().chunks_mut(c) {
                for ch in 0..c {
                    row[ch] = row[ch] * gamma.data()[ch] * cache.inv_std[ch];
                }
            }
        }
        Mode::Train => {
            // dx = inv_std / n * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat)), dxhat = dy * gamma
            let nf = n as f64;
            for (row, xr) in dx.data_mut().chunks_mut(c).zip(cache.xhat.data().chunks(c)) {
                for ch in 0..c {
                    let g = gamma.data()[ch].as_f64();
                    let dxhat = row[ch].as_f64() * g;
                    let v = cache.inv_std[ch].as_f64() / nf
                        * (nf * dxhat - dbeta[ch] * g - xr[ch].as_f64() * dgamma[ch] * g);
                    row[ch] = T::lit(v);
                }
            }
        }
    }
    let to_t = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<_>>();
    Ok((dx, Tensor::new([c], to_t(dgamma))?, Tensor::new([c], to_t(dbeta))?))
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, otherwise `1 / (1 - p)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// Inverted dropout; identity in infer mode or when `p == 0`.
pub fn dropout<T: Real>(input: &Tensor<T>, p: f64, mode: Mode, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Invalid {
            op: "dropout",
            message: format!("probability {p} outside [0, 1)"),
        });
    }
    if mode == Mode::Infer || p == 0.0 {
        return Ok(input.clone());
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mask = dropout_mask::<T, _>(input.len(), p, &mut rng);
    let data = input.data().iter().zip(mask).map(|(&v, m)| v * m).collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Concatenate rank-equal tensors along the final axis.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or_else(|| TensorError::Invalid {
        op: "concat",
        message: "no inputs".into(),
    })?;
    let lead = &first.shape()[..first.rank() - 1];
    for t in inputs {
        if &t.shape()[..t.rank().max(1) - 1] != lead {
            return Err(TensorError::Dimension {
                op: "concat",
                axis: "leading",
                expected: lead.iter().product(),
                actual: t.len() / t.last_dim(),
            });
        }
    }
    let rows: usize = lead.iter().product();
    let total: usize = inputs.iter().map(|t| t.last_dim()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for t in inputs {
            let c = t.last_dim();
            out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, out)
}

pub fn concat_backward<T: Real>(widths: &[usize], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let total: usize = widths.iter().sum();
    let rows = grad_out.len() / total;
    let lead = &grad_out.shape()[..grad_out.rank() - 1];
    let mut parts: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
    for row in grad_out.data().chunks(total) {
        let mut off = 0;
        for (p, &w) in parts.iter_mut().zip(widths) {
            p.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(p, &w)| {
            let mut shape = lead.to_vec();
            shape.push(w);
            Tensor::new(shape, p)
        })
        .collect()
}

/// Mean negative log-likelihood of integer labels under `softmax(logits)`.
///
/// Returns the loss (accumulated in f64) and the probabilities.
pub fn cross_entropy_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    logits.expect_rank("cross_entropy", 2)?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(TensorError::Dimension {
            op: "cross_entropy",
            axis: "batch",
            expected: b,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::Invalid {
            op: "cross_entropy",
            message: format!("label {bad} outside [0, {k})"),
        });
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0f64;
    for (row, &l) in logits.data().chunks(k).zip(labels) {
        // log-sum-exp in f64 keeps the loss finite even when a probability underflows
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[l].as_f64();
    }
    Ok((loss / b as f64, probs))
}

/// Gradient of [`cross_entropy_loss`] with respect to the logits: `(probs - onehot) / B`.
pub fn cross_entropy_backward<T: Real>(probs: &Tensor<T>, labels: &[usize], upstream: T) -> Tensor<T> {
    let k = probs.last_dim();
    let scale = upstream / T::lit(labels.len() as f64);
    let mut g = probs.clone();
    for (row, &l) in g.data_mut().chunks_mut(k).zip(labels) {
        row[l] -= T::one();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    /// Quadruple-loop reference convolution for a single image.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], stride: usize, pad: (usize, usize), out: (usize, usize)) -> Vec<f64> {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, f) = (k.shape()[0], k.shape()[1], k.shape()[3]);
        let mut o = vec![0.0; out.0 * out.1 * f];
        for oy in 0..out.0 {
            for ox in 0..out.1 {
                for fi in 0..f {
                    let mut acc = b[fi];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad.0 as isize;
                            let ix = (ox * stride + kx) as isize - pad.1 as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            for ci in 0..c {
                                acc += x.data()[(iy as usize * w + ix as usize) * c + ci]
                                    * k.data()[((ky * kw + kx) * c + ci) * f + fi];
                            }
                        }
                    }
                    o[(oy * out.1 + ox) * f + fi] = acc;
                }
            }
        }
        o
    }

    #[test]
    fn conv_shapes_follow_padding_rules() {
        let x = Tensor::<f32>::zeros([1, 32, 32, 3]);
        let k = Tensor::<f32>::zeros([5, 5, 3, 6]);
        assert_eq!(conv2d(&x, &k, None, 1, Padding::Valid).unwrap().shape(), &[1, 28, 28, 6]);
        assert_eq!(conv2d(&x, &k, None, 1, Padding::Same).unwrap().shape(), &[1, 32, 32, 6]);
        let x = Tensor::<f32>::zeros([1, 7, 7, 3]);
        assert_eq!(conv2d(&x, &k, None, 2, Padding::Valid).unwrap().shape(), &[1, 2, 2, 6]);
        assert_eq!(conv2d(&x, &k, None, 2, Padding::Same).unwrap().shape(), &[1, 4, 4, 6]);
    }

    #[test]
    fn same_padding_puts_extra_cell_last() {
        let g = window_geometry("t", "h", 6, 2, 1, Padding::Same).unwrap();
        assert_eq!((g.out, g.pad_before, g.pad_after), (6, 0, 1));
        let g = window_geometry("t", "h", 224, 7, 2, Padding::Same).unwrap();
        assert_eq!((g.out, g.pad_before, g.pad_after), (112, 2, 3));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 8, 8, 3]);
        let k = Tensor::<f32>::zeros([3, 3, 2, 4]);
        let err = conv2d(&x, &k, None, 1, Padding::Valid).unwrap_err();
        assert!(matches!(err, TensorError::Dimension { axis: "channels", .. }));
        let k = Tensor::<f32>::zeros([9, 9, 3, 4]);
        let err = conv2d(&x, &k, None, 1, Padding::Valid).unwrap_err();
        assert!(matches!(err, TensorError::Dimension { axis: "height", .. }));
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = random(&[5, 5, 1], 1).cast::<f32>();
        let k = Tensor::new([1, 1, 1, 1], vec![1.0f32]).unwrap();
        let b = Tensor::new([1], vec![0.0f32]).unwrap();
        assert_eq!(conv2d(&x, &k, Some(&b), 1, Padding::Valid).unwrap(), x);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        for (seed, stride, padding) in [(3, 1, Padding::Valid), (4, 1, Padding::Same), (5, 2, Padding::Same), (6, 2, Padding::Valid)] {
            let x = random(&[6, 6, 2], seed);
            let k = random(&[3, 3, 2, 2], seed + 100);
            let b = random(&[2], seed + 200);
            let got = conv2d(&x, &k, Some(&b), stride, padding).unwrap();
            let gy = window_geometry("t", "h", 6, 3, stride, padding).unwrap();
            let want = conv_oracle(&x, &k, b.data(), stride, (gy.pad_before, gy.pad_before), (gy.out, gy.out));
            assert_eq!(got.len(), want.len());
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn pool_shapes_and_values() {
        let x = Tensor::<f32>::zeros([1, 28, 28, 6]);
        let p = pool2d(&x, PoolKind::Max, 2, 2, Padding::Valid).unwrap();
        assert_eq!(p.output.shape(), &[1, 14, 14, 6]);
        let c = Tensor::<f32>::full([2, 6, 6, 3], 0.75);
        let p = pool2d(&c, PoolKind::Avg, 2, 2, Padding::Valid).unwrap();
        assert!(p.output.data().iter().all(|&v| v == 0.75));
        let p = pool2d(&c, PoolKind::Avg, 3, 1, Padding::Same).unwrap();
        assert!(p.output.data().iter().all(|&v| (v - 0.75).abs() < 1e-7));
        assert!(pool2d(&Tensor::<f32>::zeros([1, 2, 2, 1]), PoolKind::Max, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn max_pool_matches_window_max() {
        let x = random(&[1, 4, 4, 1], 9);
        let p = pool2d(&x, PoolKind::Max, 2, 2, Padding::Valid).unwrap();
        let d = x.data();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(d[(oy * 2 + dy) * 4 + ox * 2 + dx]);
                    }
                }
                assert_eq!(p.output.data()[oy * 2 + ox], m);
            }
        }
    }

    #[test]
    fn dense_examples() {
        let x = Tensor::new([2], vec![1.0f32, 2.0]).unwrap();
        let w = Tensor::new([2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense(&x, &w, None).unwrap(), x);
        let b = Tensor::new([2], vec![1.0f32, 1.0]).unwrap();
        assert_eq!(dense(&x, &w, Some(&b)).unwrap().data(), &[2.0, 3.0]);
        let bad = Tensor::new([3, 2], vec![0.0f32; 6]).unwrap();
        assert!(matches!(dense(&x, &bad, None), Err(TensorError::Dimension { axis: "inner", .. })));
    }

    #[test]
    fn dense_matches_matvec_oracle() {
        let x = random(&[8], 11);
        let w = random(&[8, 5], 12);
        let b = random(&[5], 13);
        let got = dense(&x, &w, Some(&b)).unwrap();
        for j in 0..5 {
            let mut acc = b.data()[j];
            for i in 0..8 {
                acc += x.data()[i] * w.data()[i * 5 + j];
            }
            assert!((got.data()[j] - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_examples() {
        let z = Tensor::new([5], vec![0.0f32; 5]).unwrap();
        assert!(softmax(&z).unwrap().data().iter().all(|&p| (p - 0.2).abs() < 1e-7));
        let z = Tensor::new([5], vec![1.0f32, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = softmax(&z).unwrap();
        let e = std::f64::consts::E;
        let want = [e / (e + 4.0), 1.0 / (e + 4.0)];
        assert!((p.data()[0] as f64 - want[0]).abs() < 1e-6);
        assert!((p.data()[0] - 0.40461).abs() < 1e-4);
        assert!(p.data()[1..].iter().all(|&v| (v - 0.14885).abs() < 1e-4 && (v as f64 - want[1]).abs() < 1e-6));
        let r = activation(&Tensor::new([3], vec![-1.0f32, 0.0, 2.0]).unwrap(), ActivationKind::Relu).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn residual_add_checks_shapes() {
        let x = random(&[1, 4, 4, 3], 1);
        let zero = x.zeros_like();
        assert_eq!(residual_add(&zero, &x).unwrap(), x);
        let other = Tensor::<f64>::zeros([1, 4, 4, 5]);
        assert!(matches!(residual_add(&other, &x), Err(TensorError::Dimension { axis: "channels", .. })));
    }

    #[test]
    fn batchnorm_examples() {
        let stats = BatchStats { mean: vec![0.0f64; 2], var: vec![1.0; 2] };
        let gamma = Tensor::full([2], 1.0f64);
        let beta = Tensor::zeros([2]);
        let constant = Tensor::full([4, 3, 3, 2], 7.0f64);
        let out = batchnorm(&constant, &gamma, &beta, &stats, Mode::Train, 0.9, 1e-5).unwrap();
        assert!(out.output.data().iter().all(|v| v.abs() < 1e-6));

        let x = random(&[8, 3, 3, 2], 42).map(|v| 3.0 * v + 1.5);
        let out = batchnorm(&x, &gamma, &beta, &stats, Mode::Train, 0.9, 1e-12).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = out.output.data().iter().skip(ch).step_by(2).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
        }
        let running = out.running.unwrap();
        assert!(running.mean.iter().all(|m| m.abs() > 0.0));

        let beta5 = Tensor::full([2], 5.0f64);
        let out = batchnorm(&x, &gamma, &beta5, &stats, Mode::Train, 0.9, 1e-5).unwrap();
        let mean = out.output.data().iter().sum::<f64>() / out.output.len() as f64;
        assert!((mean - 5.0).abs() < 1e-4);

        let inf = batchnorm(&x, &gamma, &beta, &stats, Mode::Infer, 0.9, 0.0).unwrap();
        assert_eq!(inf.output, x);
        assert!(inf.running.is_none());
    }

    #[test]
    fn dropout_modes() {
        let x = random(&[1000], 5).cast::<f32>();
        assert_eq!(dropout(&x, 0.0, Mode::Train, 1).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, Mode::Infer, 1).unwrap(), x);
        assert!(dropout(&x, 1.0, Mode::Train, 1).is_err());
    }

    #[test]
    fn dropout_survival_statistics() {
        let x = Tensor::<f32>::full([100_000], 2.0);
        let y = dropout(&x, 0.5, Mode::Train, 7).unwrap();
        let survivors: Vec<f32> = y.data().iter().copied().filter(|&v| v != 0.0).collect();
        let frac = survivors.len() as f64 / 1e5;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
        let mean = y.sum_f64() / 1e5;
        assert!((mean - 2.0).abs() < 0.04, "{mean}");
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::<f32>::zeros([3, 5]);
        let (loss, _) = cross_entropy_loss(&uniform, &[0, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-9);
        let confident = Tensor::new([1, 3], vec![200.0f32, 0.0, 0.0]).unwrap();
        assert!(cross_entropy_loss(&confident, &[0]).unwrap().0 < 1e-12);
        assert!(cross_entropy_loss(&uniform, &[0, 5, 1]).is_err());

        let logits = random(&[4, 5], 77);
        let labels = [1, 0, 4, 2];
        let (loss, probs) = cross_entropy_loss(&logits, &labels).unwrap();
        let oracle: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -softmax(&logits).unwrap().data()[i * 5 + l].ln())
            .sum::<f64>()
            / 4.0;
        assert!((loss - oracle).abs() < 1e-6);
        assert_eq!(probs, softmax(&logits).unwrap());
    }

    #[test]
    fn concat_round_trip() {
        let a = random(&[2, 3, 3, 2], 1);
        let b = random(&[2, 3, 3, 4], 2);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3, 6]);
        let parts = concat_backward(&[2, 4], &c).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
