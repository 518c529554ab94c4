//! Forward and backward kernels for the fixed layer set.
//!
//! Convolution lowers each sample to an im2col matrix and accumulates
//! `bias + sum_k w_k * col_k` in the same `(in_channel, kh, kw)` order as a
//! direct six-loop convolution, so both agree bit-for-bit on valid padding.

use crate::error::{Error, Result};
use crate::tensor::{LayerKind, LayerParams, Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Passes `grad` where `x > 0`; the kink at exactly zero gets gradient zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(x, grad, "relu backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Valid,
    /// Zero padding keeping `out = ceil(in / stride)`; odd remainders pad
    /// the bottom/right side.
    Same,
}

/// Index arithmetic shared by the convolution kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: [usize; 3], weight_shape: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let [in_c, in_h, in_w] = input;
        if weight_shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv weights must be [out, in, kh, kw], got {weight_shape:?}"
            )));
        }
        let (out_c, w_in, k_h, k_w) = (weight_shape[0], weight_shape[1], weight_shape[2], weight_shape[3]);
        if w_in != in_c {
            return Err(Error::ShapeMismatch(format!(
                "input has {in_c} channels, weights expect {w_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        let (pad_top, pad_left, out_h, out_w) = match padding {
            Padding::Valid => {
                if k_h > in_h || k_w > in_w {
                    return Err(Error::ShapeMismatch(format!(
                        "kernel {k_h}x{k_w} does not fit input {in_h}x{in_w}"
                    )));
                }
                (0, 0, (in_h - k_h) / stride + 1, (in_w - k_w) / stride + 1)
            }
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + k_h).saturating_sub(in_h);
                let pad_w = ((out_w - 1) * stride + k_w).saturating_sub(in_w);
                (pad_h / 2, pad_w / 2, out_h, out_w)
            }
        };
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            k_h,
            k_w,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    /// Columns of the im2col matrix.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.out_c * self.positions()
    }

    /// Input coordinate feeding output `(oh, ow)` through kernel tap `(kh, kw)`.
    #[inline]
    fn source(&self, oh: usize, ow: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ih = (oh * self.stride + kh).checked_sub(self.pad_top)?;
        let iw = (ow * self.stride + kw).checked_sub(self.pad_left)?;
        (ih < self.in_h && iw < self.in_w).then_some((ih, iw))
    }
}

/// Lowers one sample `[C, H, W]` into `col[patch_len][positions]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let p_len = g.positions();
    for ci in 0..g.in_c {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let row = ((ci * g.k_h + kh) * g.k_w + kw) * p_len;
                let dst = &mut col[row..row + p_len];
                if g.stride == 1 && g.pad_top == 0 && g.pad_left == 0 {
                    for oh in 0..g.out_h {
                        let src = &plane[(oh + kh) * g.in_w + kw..(oh + kh) * g.in_w + kw + g.out_w];
                        dst[oh * g.out_w..(oh + 1) * g.out_w].copy_from_slice(src);
                    }
                } else {
                    for oh in 0..g.out_h {
                        for ow in 0..g.out_w {
                            dst[oh * g.out_w + ow] = match g.source(oh, ow, kh, kw) {
                                Some((ih, iw)) => plane[ih * g.in_w + iw],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back onto a `[C, H, W]` gradient buffer.
pub fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p_len = g.positions();
    for ci in 0..g.in_c {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let row = ((ci * g.k_h + kh) * g.k_w + kw) * p_len;
                let src = &col[row..row + p_len];
                if g.stride == 1 && g.pad_top == 0 && g.pad_left == 0 {
                    for oh in 0..g.out_h {
                        let dst = &mut plane[(oh + kh) * g.in_w + kw..(oh + kh) * g.in_w + kw + g.out_w];
                        for (d, &v) in dst.iter_mut().zip(&src[oh * g.out_w..(oh + 1) * g.out_w]) {
                            *d = *d + v;
                        }
                    }
                    continue;
                }
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        if let Some((ih, iw)) = g.source(oh, ow, kh, kw) {
                            plane[ih * g.in_w + iw] = plane[ih * g.in_w + iw] + src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Output tile width of [`gemm_acc`].
const TILE: usize = 32;

/// `out[i][j] += sum_l a[i][l] * b[l][j]` for `a: m x k`, `b: k x n`, all
/// row-major. Every output element accumulates its terms in increasing `l`,
/// one at a time, so results match a plain triple loop bit for bit.
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            unsafe { gemm_acc_avx2(a, b, m, k, n, out) };
            return;
        }
    }
    gemm_acc_impl(a, b, m, k, n, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_acc_avx2<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    gemm_acc_impl(a, b, m, k, n, out)
}

#[inline(always)]
fn gemm_acc_impl<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let mut j0 = 0;
    while j0 + TILE <= n {
        let mut i = 0;
        while i + 2 <= m {
            let mut acc0 = [T::zero(); TILE];
            let mut acc1 = [T::zero(); TILE];
            acc0.copy_from_slice(&out[i * n + j0..i * n + j0 + TILE]);
            acc1.copy_from_slice(&out[(i + 1) * n + j0..(i + 1) * n + j0 + TILE]);
            let (a0, a1) = (&a[i * k..i * k + k], &a[(i + 1) * k..(i + 1) * k + k]);
            for l in 0..k {
                let row: &[T; TILE] = b[l * n + j0..l * n + j0 + TILE].try_into().expect("tile");
                let (c0, c1) = (a0[l], a1[l]);
                for t in 0..TILE {
                    acc0[t] = acc0[t] + c0 * row[t];
                    acc1[t] = acc1[t] + c1 * row[t];
                }
            }
            out[i * n + j0..i * n + j0 + TILE].copy_from_slice(&acc0);
            out[(i + 1) * n + j0..(i + 1) * n + j0 + TILE].copy_from_slice(&acc1);
            i += 2;
        }
        if i < m {
            let mut acc = [T::zero(); TILE];
            acc.copy_from_slice(&out[i * n + j0..i * n + j0 + TILE]);
            for l in 0..k {
                let row: &[T; TILE] = b[l * n + j0..l * n + j0 + TILE].try_into().expect("tile");
                let c = a[i * k + l];
                for t in 0..TILE {
                    acc[t] = acc[t] + c * row[t];
                }
            }
            out[i * n + j0..i * n + j0 + TILE].copy_from_slice(&acc);
        }
        j0 += TILE;
    }
    if j0 < n {
        for i in 0..m {
            let dst = &mut out[i * n + j0..i * n + n];
            for l in 0..k {
                let c = a[i * k + l];
                for (d, &v) in dst.iter_mut().zip(&b[l * n + j0..l * n + n]) {
                    *d = *d + c * v;
                }
            }
        }
    }
}

/// `out[i][j] += dot(a[i], b[j])` for `a: m x k`, `b: n x k`.
fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            unsafe { gemm_nt_acc_avx2(a, b, m, n, k, out) };
            return;
        }
    }
    gemm_nt_acc_impl(a, b, m, n, k, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nt_acc_avx2<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    gemm_nt_acc_impl(a, b, m, n, k, out)
}

#[inline(always)]
fn gemm_nt_acc_impl<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = out[i * n + j] + dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with sixteen independent partial sums.
#[inline(always)]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let ca: &[T; LANES] = a[c * LANES..(c + 1) * LANES].try_into().expect("chunk");
        let cb: &[T; LANES] = b[c * LANES..(c + 1) * LANES].try_into().expect("chunk");
        for l in 0..LANES {
            acc[l] = acc[l] + ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail = tail + a[i] * b[i];
    }
    acc.iter().fold(T::zero(), |s, &v| s + v) + tail
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn check_conv_input<T: Scalar>(x: &Tensor<T>, p: &LayerParams<T>) -> Result<()> {
    if p.kind != LayerKind::Conv2d {
        return Err(Error::ShapeMismatch("conv2d needs Conv2d parameters".into()));
    }
    if x.ndim() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input must be [B, C, H, W], got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    check_conv_input(x, p)?;
    ConvGeometry::new([x.dim(1), x.dim(2), x.dim(3)], p.weights.shape(), stride, padding)
}

/// Cross-correlation plus per-channel bias.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &LayerParams<T>, stride: usize, padding: Padding) -> Result<Tensor<T>> {
    conv2d_lowered(x, p, stride, padding).map(|(out, _, _)| out)
}

/// [`conv2d`] that also returns the per-sample im2col buffers for reuse in
/// the backward pass.
pub fn conv2d_lowered<T: Scalar>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Vec<T>, ConvGeometry)> {
    let g = conv_geometry(x, p, stride, padding)?;
    let batch = x.dim(0);
    let (k_len, p_len) = (g.patch_len(), g.positions());
    let mut cols = vec![T::zero(); batch * k_len * p_len];
    let mut out = vec![T::zero(); batch * g.output_len()];
    let w = p.weights.data();
    let bias = p.bias.data();
    for b in 0..batch {
        let col = &mut cols[b * k_len * p_len..(b + 1) * k_len * p_len];
        im2col(x.sample(b), &g, col);
        let out_b = &mut out[b * g.output_len()..(b + 1) * g.output_len()];
        for co in 0..g.out_c {
            out_b[co * p_len..(co + 1) * p_len]
                .iter_mut()
                .for_each(|v| *v = bias[co]);
        }
        gemm_acc(w, col, g.out_c, k_len, p_len, out_b);
    }
    let out = Tensor::new(&[batch, g.out_c, g.out_h, g.out_w], out)?;
    Ok((out, cols, g))
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T = f32> {
    /// `None` when the caller did not request the input gradient.
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Conv2dGrads<T>> {
    let g = conv_geometry(x, p, stride, padding)?;
    let batch = x.dim(0);
    let (k_len, p_len) = (g.patch_len(), g.positions());
    let mut cols = vec![T::zero(); batch * k_len * p_len];
    for b in 0..batch {
        im2col(x.sample(b), &g, &mut cols[b * k_len * p_len..(b + 1) * k_len * p_len]);
    }
    conv2d_backward_lowered(&cols, &g, batch, p, grad_out, true)
}

/// Backward from cached im2col buffers.
pub fn conv2d_backward_lowered<T: Scalar>(
    cols: &[T],
    g: &ConvGeometry,
    batch: usize,
    p: &LayerParams<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<Conv2dGrads<T>> {
    let expected = [batch, g.out_c, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "conv2d upstream gradient {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let (k_len, p_len) = (g.patch_len(), g.positions());
    let w = p.weights.data();
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.out_c];
    let mut dx = need_input.then(|| vec![T::zero(); batch * g.input_len()]);
    let w_t = if need_input {
        transpose(w, g.out_c, k_len)
    } else {
        Vec::new()
    };
    let mut dcol = vec![T::zero(); if need_input { k_len * p_len } else { 0 }];
    for b in 0..batch {
        let col = &cols[b * k_len * p_len..(b + 1) * k_len * p_len];
        let dout = grad_out.sample(b);
        for co in 0..g.out_c {
            let drow = &dout[co * p_len..(co + 1) * p_len];
            db[co] = db[co] + drow.iter().fold(T::zero(), |a, &v| a + v);
        }
        gemm_nt_acc(dout, col, g.out_c, k_len, p_len, &mut dw);
        if let Some(dx) = dx.as_mut() {
            dcol.iter_mut().for_each(|v| *v = T::zero());
            gemm_acc(&w_t, dout, k_len, g.out_c, p_len, &mut dcol);
            col2im_add(&dcol, g, &mut dx[b * g.input_len()..(b + 1) * g.input_len()]);
        }
    }
    Ok(Conv2dGrads {
        input: dx
            .map(|d| Tensor::new(&[batch, g.in_c, g.in_h, g.in_w], d))
            .transpose()?,
        weights: Tensor::new(p.weights.shape(), dw)?,
        bias: Tensor::new(&[g.out_c], db)?,
    })
}

/// Windowed maximum. Trailing rows/columns that do not fill a whole window
/// are dropped. Returns the output and, per output element, the flat input
/// index of the first maximum in row-major window order.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.ndim() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "maxpool2d input must be [B, C, H, W], got {:?}",
            x.shape()
        )));
    }
    if window == 0 || stride == 0 {
        return Err(Error::InvalidConfig(
            "pooling window and stride must be positive".into(),
        ));
    }
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if window > h || window > w {
        return Err(Error::ShapeMismatch(format!("pool window {window} exceeds {h}x{w}")));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let data = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = base + i * stride * w + j * stride;
                let mut best = data[best_idx];
                for di in 0..window {
                    for dj in 0..window {
                        let idx = base + (i * stride + di) * w + j * stride + dj;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(&[b, c, oh, ow], out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::ShapeMismatch(
            "maxpool gradient does not match cached argmax".into(),
        ));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] = d[idx] + g;
    }
    Ok(dx)
}

/// Affine map `x W^T + b` over `[B, F]` inputs.
pub fn linear<T: Scalar>(x: &Tensor<T>, p: &LayerParams<T>) -> Result<Tensor<T>> {
    if p.kind != LayerKind::Linear {
        return Err(Error::ShapeMismatch("linear needs Linear parameters".into()));
    }
    if x.ndim() != 2 || x.dim(1) != p.in_features() {
        return Err(Error::ShapeMismatch(format!(
            "linear input {:?} against {} in_features",
            x.shape(),
            p.in_features()
        )));
    }
    let (batch, f_in, f_out) = (x.dim(0), p.in_features(), p.out_features());
    let w = p.weights.data();
    let bias = p.bias.data();
    let mut out: Vec<T> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
    gemm_acc(x.data(), &transpose(w, f_out, f_in), batch, f_in, f_out, &mut out);
    Tensor::new(&[batch, f_out], out)
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(x: &Tensor<T>, p: &LayerParams<T>, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (batch, f_in, f_out) = (x.dim(0), p.in_features(), p.out_features());
    if grad_out.shape() != [batch, f_out] {
        return Err(Error::ShapeMismatch(format!(
            "linear upstream gradient {:?}, expected [{batch}, {f_out}]",
            grad_out.shape()
        )));
    }
    let w = p.weights.data();
    let g = grad_out.data();
    let mut dw = vec![T::zero(); w.len()];
    gemm_acc(&transpose(g, batch, f_out), x.data(), f_out, batch, f_in, &mut dw);
    let mut db = vec![T::zero(); f_out];
    for gb in g.chunks_exact(f_out) {
        for (d, &v) in db.iter_mut().zip(gb) {
            *d = *d + v;
        }
    }
    let mut dx = vec![T::zero(); batch * f_in];
    gemm_acc(g, w, batch, f_out, f_in, &mut dx);
    Ok(LinearGrads {
        input: Tensor::new(x.shape(), dx)?,
        weights: Tensor::new(p.weights.shape(), dw)?,
        bias: Tensor::new(&[f_out], db)?,
    })
}

/// Mean over spatial positions: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "global_avg_pool input must be [B, C, H, W], got {:?}",
            x.shape()
        )));
    }
    let (b, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let n = T::of_f64(hw as f64);
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / n)
        .collect();
    Tensor::new(&[b, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input_shape.len() != 4 || grad_out.shape() != [input_shape[0], input_shape[1]] {
        return Err(Error::ShapeMismatch(format!(
            "global_avg_pool gradient {:?} for input {input_shape:?}",
            grad_out.shape()
        )));
    }
    let hw = input_shape[2] * input_shape[3];
    let n = T::of_f64(hw as f64);
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / n, hw))
        .collect();
    Tensor::new(input_shape, data)
}

/// Mean binary cross-entropy on raw logits, `max(z, 0) - z y + ln(1 + e^-|z|)`
/// per element. Returns the loss and its gradient `(sigmoid(z) - y) / B`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if logits.len() != labels.len() || logits.len() != logits.dim(0) {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} against labels {:?}",
            logits.shape(),
            labels.shape()
        )));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.data().iter().zip(labels.data()) {
        let (z, y) = (z.as_f64(), y.as_f64());
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.push(T::of_f64((sigmoid(z) - y) / n));
    }
    Ok((loss / n, Tensor::new(logits.shape(), grad)?))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `w <- w - lr * grad` for every tensor, then zeroes the gradients.
/// Rescales every gradient so that their joint L2 norm is at most
/// `max_norm`. Returns the norm before rescaling.
pub fn clip_grad_norm<T: Scalar>(params: &mut [&mut LayerParams<T>], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for (i, p) in params.iter().enumerate() {
        for (name, t) in [("weights", &p.weights), ("bias", &p.bias)] {
            let g = t
                .grad()
                .ok_or_else(|| Error::MissingGradient(format!("layer {i} {name}")))?;
            sq += g.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = T::of_f64(max_norm / norm);
        for p in params.iter_mut() {
            for t in [&mut p.weights, &mut p.bias] {
                t.grad_mut().iter_mut().for_each(|g| *g = *g * scale);
            }
        }
    }
    Ok(norm)
}

pub fn sgd_step<T: Scalar>(params: &mut [&mut LayerParams<T>], lr: f64) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if p.weights.grad().is_none() {
            return Err(Error::MissingGradient(format!("layer {i} weights")));
        }
        if p.bias.grad().is_none() {
            return Err(Error::MissingGradient(format!("layer {i} bias")));
        }
    }
    let lr = T::of_f64(lr);
    for p in params.iter_mut() {
        for t in [&mut p.weights, &mut p.bias] {
            let g = t.grad().expect("checked").to_vec();
            for (w, g) in t.data_mut().iter_mut().zip(&g) {
                *w = *w - lr * *g;
            }
            t.zero_grad();
        }
    }
    Ok(())
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
