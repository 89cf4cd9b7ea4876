//! Forward and backward kernels for the differentiable operations.
//!
//! Every kernel is a pure function of its inputs. Parallel sections split the
//! work over batch items and reduce per-item partial results in batch order,
//! so results do not depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Scalar, Shape, Tensor};

/// Upper bound on the number of elements in one im2col buffer.
const COLS_BUDGET: usize = 1 << 20;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, bias: Shape, stride: usize, pad: usize) -> Result<Self> {
        if input.c() != weight.c() {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input,
                right: weight,
            });
        }
        if bias.numel() != weight.n() {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: weight,
                right: bias,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let out_extent = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * pad;
            if k == 0 || padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::invalid(
                    "conv2d",
                    format!(
                        "output extent ({len} + 2*{pad} - {k})/{stride} + 1 is not a positive integer for input {input} and kernel {weight}"
                    ),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let oh = out_extent(input.h(), weight.h())?;
        let ow = out_extent(input.w(), weight.w())?;
        Ok(ConvGeom {
            n: input.n(),
            c_in: input.c(),
            h: input.h(),
            w: input.w(),
            c_out: weight.n(),
            kh: weight.h(),
            kw: weight.w(),
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_item(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn chunk(&self) -> usize {
        (COLS_BUDGET / self.k()).clamp(1, self.out_plane())
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.c_out, self.oh, self.ow)
    }
}

/// Output columns `[lo, hi)` of `[ox0, ox1)` whose input column
/// `ox * stride + kj - pad` falls inside the image.
fn valid_columns(g: &ConvGeom, kj: usize, ox0: usize, ox1: usize) -> (usize, usize) {
    let first = if g.pad > kj { (g.pad - kj).div_ceil(g.stride) } else { 0 };
    let end = if g.w + g.pad > kj {
        (g.w + g.pad - kj - 1) / g.stride + 1
    } else {
        0
    };
    let lo = first.clamp(ox0, ox1);
    (lo, end.clamp(lo, ox1))
}

/// Visit the row segments of output pixels `[p0, p0 + len)`: calls
/// `f(j, iy, ox0, ox1)` with `j` the offset of `ox0` inside the chunk and
/// `iy` the input row, which may fall outside the image.
fn for_each_segment(g: &ConvGeom, ki: usize, p0: usize, len: usize, mut f: impl FnMut(usize, isize, usize, usize)) {
    let mut p = p0;
    while p < p0 + len {
        let oy = p / g.ow;
        let ox0 = p % g.ow;
        let ox1 = g.ow.min(ox0 + (p0 + len - p));
        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
        f(p - p0, iy, ox0, ox1);
        p += ox1 - ox0;
    }
}

/// Gather the receptive-field patches of output pixels `[p0, p0 + len)` into
/// a `k x len` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, p0: usize, len: usize, cols: &mut [T]) {
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[r * len..(r + 1) * len];
                for_each_segment(g, ki, p0, len, |j, iy, ox0, ox1| {
                    let seg = &mut dst[j..j + ox1 - ox0];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        return;
                    }
                    let row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_columns(g, kj, ox0, ox1);
                    seg[..lo - ox0].fill(T::zero());
                    seg[hi - ox0..].fill(T::zero());
                    if lo < hi {
                        let ix0 = lo * g.stride + kj - g.pad;
                        let out = &mut seg[lo - ox0..hi - ox0];
                        if g.stride == 1 {
                            out.copy_from_slice(&row[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (o, v) in out.iter_mut().zip(row[ix0..].iter().step_by(g.stride)) {
                                *o = *v;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Scatter-add a `k x len` patch matrix back onto the input plane.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, p0: usize, len: usize, dx: &mut [T]) {
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[r * len..(r + 1) * len];
                for_each_segment(g, ki, p0, len, |j, iy, ox0, ox1| {
                    if iy < 0 || iy >= g.h as isize {
                        return;
                    }
                    let row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_columns(g, kj, ox0, ox1);
                    if lo < hi {
                        let ix0 = lo * g.stride + kj - g.pad;
                        let seg = &src[j + lo - ox0..j + hi - ox0];
                        for (o, &v) in row[ix0..].iter_mut().step_by(g.stride).zip(seg) {
                            *o = *o + v;
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeom,
) -> Tensor<T> {
    let mut out = Tensor::zeros(g.out_shape());
    let (k, plane) = (g.k(), g.out_plane());
    let w = weight.data();
    let x = input.data();
    out.data_mut()
        .par_chunks_mut(g.c_out * plane)
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x[n * g.in_item()..(n + 1) * g.in_item()];
            if g.is_pointwise() {
                gemm(
                    Mat::new(w, g.c_out, k),
                    Mat::new(x_n, k, plane),
                    T::zero(),
                    out_n,
                    plane,
                );
            } else {
                let chunk = g.chunk();
                let mut cols = vec![T::zero(); k * chunk];
                let mut p0 = 0;
                while p0 < plane {
                    let len = chunk.min(plane - p0);
                    im2col(x_n, g, p0, len, &mut cols[..k * len]);
                    gemm(
                        Mat::new(w, g.c_out, k),
                        Mat::new(&cols[..k * len], k, len),
                        T::zero(),
                        &mut out_n[p0..],
                        plane,
                    );
                    p0 += len;
                }
            }
            for (o, row) in out_n.chunks_mut(plane).enumerate() {
                let b = bias.data()[o];
                row.iter_mut().for_each(|v| *v = *v + b);
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let (k, plane) = (g.k(), g.out_plane());
    let w = weight.data();
    let x = input.data();
    let go = grad_out.data();

    let per_item: Vec<(Option<Vec<T>>, Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * g.in_item()..(n + 1) * g.in_item()];
            let go_n = &go[n * g.c_out * plane..(n + 1) * g.c_out * plane];
            let db: Vec<T> = go_n.chunks(plane).map(|row| row.iter().copied().sum()).collect();
            let mut dw = vec![T::zero(); g.c_out * k];
            let mut dx = need_input.then(|| vec![T::zero(); g.in_item()]);
            if g.is_pointwise() {
                gemm(
                    Mat::new(go_n, g.c_out, plane),
                    Mat::new(x_n, k, plane).t(),
                    T::zero(),
                    &mut dw,
                    k,
                );
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        Mat::new(w, g.c_out, k).t(),
                        Mat::new(go_n, g.c_out, plane),
                        T::zero(),
                        dx,
                        plane,
                    );
                }
            } else {
                let chunk = g.chunk();
                let mut cols = vec![T::zero(); k * chunk];
                let mut dcols = if need_input {
                    vec![T::zero(); k * chunk]
                } else {
                    Vec::new()
                };
                let mut p0 = 0;
                while p0 < plane {
                    let len = chunk.min(plane - p0);
                    let go_chunk = Mat::with_ld(&go_n[p0..], g.c_out, len, plane);
                    im2col(x_n, g, p0, len, &mut cols[..k * len]);
                    gemm(go_chunk, Mat::new(&cols[..k * len], k, len).t(), T::one(), &mut dw, k);
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            Mat::new(w, g.c_out, k).t(),
                            go_chunk,
                            T::zero(),
                            &mut dcols[..k * len],
                            len,
                        );
                        col2im(&dcols[..k * len], g, p0, len, dx);
                    }
                    p0 += len;
                }
            }
            (dx, dw, db)
        })
        .collect();

    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros(Shape::new(g.c_out, 1, 1, 1));
    let mut dinput = need_input.then(|| Tensor::zeros(input.shape()));
    for (n, (dx, dw, db)) in per_item.into_iter().enumerate() {
        for (acc, v) in dweight.data_mut().iter_mut().zip(dw) {
            *acc = *acc + v;
        }
        for (acc, v) in dbias.data_mut().iter_mut().zip(db) {
            *acc = *acc + v;
        }
        if let (Some(dinput), Some(dx)) = (dinput.as_mut(), dx) {
            dinput.data_mut()[n * g.in_item()..(n + 1) * g.in_item()].copy_from_slice(&dx);
        }
    }
    ConvGrads {
        input: dinput,
        weight: dweight,
        bias: dbias,
    }
}

pub(crate) fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("shape preserved")
}

/// 2x2 max pooling with stride 2. The returned offsets are `dy * 2 + dx` of
/// the winning element; ties go to the first element in row-major order.
pub(crate) fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u8>)> {
    let s = x.shape();
    if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
        return Err(Error::invalid(
            "maxpool2x2",
            format!("spatial extents of {s} must be even"),
        ));
    }
    let (oh, ow) = (s.h() / 2, s.w() / 2);
    let out_shape = Shape::new(s.n(), s.c(), oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    let src = x.data();
    for plane in src.chunks(s.plane()) {
        for oy in 0..oh {
            let r0 = &plane[2 * oy * s.w()..(2 * oy + 1) * s.w()];
            let r1 = &plane[(2 * oy + 1) * s.w()..(2 * oy + 2) * s.w()];
            for ox in 0..ow {
                let cand = [r0[2 * ox], r0[2 * ox + 1], r1[2 * ox], r1[2 * ox + 1]];
                let mut best = 0u8;
                for i in 1..4u8 {
                    if cand[i as usize] > cand[best as usize] {
                        best = i;
                    }
                }
                out.push(cand[best as usize]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, arg))
}

pub(crate) fn maxpool_backward<T: Scalar>(grad_out: &Tensor<T>, argmax: &[u8], input: Shape) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    let (oh, ow) = (input.h() / 2, input.w() / 2);
    let w = input.w();
    let go = grad_out.data();
    for (pi, plane) in dx.data_mut().chunks_mut(input.plane()).enumerate() {
        let base = pi * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = base + oy * ow + ox;
                let a = argmax[o] as usize;
                let (dy, dxx) = (a / 2, a % 2);
                let idx = (2 * oy + dy) * w + 2 * ox + dxx;
                plane[idx] = plane[idx] + go[o];
            }
        }
    }
    dx
}

pub(crate) fn upsample_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let out_shape = Shape::new(s.n(), s.c(), 2 * s.h(), 2 * s.w());
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks(s.plane().max(1)) {
        for y in 0..s.h() {
            let row = &plane[y * s.w()..(y + 1) * s.w()];
            for _ in 0..2 {
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("shape computed")
}

pub(crate) fn upsample_backward<T: Scalar>(grad_out: &Tensor<T>, input: Shape) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    let ow = 2 * input.w();
    let go = grad_out.data();
    for (pi, plane) in dx.data_mut().chunks_mut(input.plane().max(1)).enumerate() {
        let g = &go[pi * 4 * input.plane()..(pi + 1) * 4 * input.plane()];
        for y in 0..input.h() {
            for x in 0..input.w() {
                let (r0, r1) = (2 * y * ow, (2 * y + 1) * ow);
                plane[y * input.w() + x] = (g[r0 + 2 * x] + g[r0 + 2 * x + 1]) + (g[r1 + 2 * x] + g[r1 + 2 * x + 1]);
            }
        }
    }
    dx
}

pub(crate) fn concat_forward<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no parts"))?
        .shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: first,
                right: s,
            });
        }
        channels += s.c();
    }
    let out_shape = Shape::new(first.n(), channels, first.h(), first.w());
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n() {
        for p in parts {
            let item = p.shape().c() * p.shape().plane();
            out.extend_from_slice(&p.data()[n * item..(n + 1) * item]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub(crate) fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (c, plane) = (s.c(), s.plane());
    let mut out = Tensor::zeros(s);
    let src = x.data();
    for (item_in, item_out) in src.chunks(c * plane).zip(out.data_mut().chunks_mut(c * plane)) {
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(item_in[k * plane + p]);
            }
            let mut total = T::zero();
            for k in 0..c {
                let e = (item_in[k * plane + p] - m).exp();
                item_out[k * plane + p] = e;
                total = total + e;
            }
            for k in 0..c {
                item_out[k * plane + p] = item_out[k * plane + p] / total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(grad_out: &Tensor<T>, probs: &Tensor<T>) -> Tensor<T> {
    let s = probs.shape();
    let (c, plane) = (s.c(), s.plane());
    let mut dx = Tensor::zeros(s);
    let (go, pr) = (grad_out.data(), probs.data());
    for (i, item) in dx.data_mut().chunks_mut(c * plane).enumerate() {
        let base = i * c * plane;
        for p in 0..plane {
            let mut dot = T::zero();
            for k in 0..c {
                dot = dot + go[base + k * plane + p] * pr[base + k * plane + p];
            }
            for k in 0..c {
                let idx = k * plane + p;
                item[idx] = pr[base + idx] * (go[base + idx] - dot);
            }
        }
    }
    dx
}

/// Probability floor applied before taking the logarithm.
pub const CE_EPS: f64 = 1e-7;

pub(crate) fn check_targets(probs: Shape, targets: &[u8]) -> Result<()> {
    if probs.c() < 2 {
        return Err(Error::invalid(
            "cross_entropy_loss",
            format!("need at least 2 class channels, got {probs}"),
        ));
    }
    let expected = probs.n() * probs.plane();
    if targets.len() != expected {
        return Err(Error::invalid(
            "cross_entropy_loss",
            format!(
                "{} target ids for probabilities {probs} ({expected} pixels)",
                targets.len()
            ),
        ));
    }
    if let Some(bad) = targets.iter().find(|&&t| t as usize >= probs.c()) {
        return Err(Error::invalid(
            "cross_entropy_loss",
            format!("class id {bad} out of range for {} classes", probs.c()),
        ));
    }
    Ok(())
}

#[inline]
fn true_prob_index(s: Shape, pixel: usize, class: u8) -> usize {
    let plane = s.plane();
    let (n, p) = (pixel / plane, pixel % plane);
    (n * s.c() + class as usize) * plane + p
}

pub(crate) fn cross_entropy_forward<T: Scalar>(probs: &Tensor<T>, targets: &[u8]) -> T {
    let s = probs.shape();
    let eps = T::from_f64(CE_EPS);
    let total: T = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -probs.data()[true_prob_index(s, i, t)].max(eps).ln())
        .sum();
    total / T::from_f64(targets.len() as f64)
}

/// Mean of `logsumexp(z) - z_true` over pixels: the cross-entropy of the
/// softmax of `logits`, computed without forming probabilities. Its gradient
/// is exactly the fused `(p - onehot) / pixels`, and it needs no floor.
pub(crate) fn softmax_cross_entropy_forward<T: Scalar>(logits: &Tensor<T>, targets: &[u8]) -> T {
    let s = logits.shape();
    let (c, plane) = (s.c(), s.plane());
    let total: T = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let base = (i / plane) * c * plane + i % plane;
            let z = |k: usize| logits.data()[base + k * plane];
            let m = (1..c).map(z).fold(z(0), T::max);
            let sum: T = (0..c).map(|k| (z(k) - m).exp()).sum();
            m + sum.ln() - z(t as usize)
        })
        .sum();
    total / T::from_f64(targets.len() as f64)
}

/// Gradient of the mean cross-entropy with respect to the probabilities.
pub(crate) fn cross_entropy_backward<T: Scalar>(upstream: T, probs: &Tensor<T>, targets: &[u8]) -> Tensor<T> {
    let s = probs.shape();
    let eps = T::from_f64(CE_EPS);
    let scale = upstream / T::from_f64(targets.len() as f64);
    let mut dp = Tensor::zeros(s);
    for (i, &t) in targets.iter().enumerate() {
        let idx = true_prob_index(s, i, t);
        let p = probs.data()[idx];
        if p > eps {
            dp.data_mut()[idx] = -scale / p;
        }
    }
    dp
}

/// Fused softmax + cross-entropy gradient with respect to the logits:
/// `(p - onehot) / pixels`.
pub(crate) fn softmax_cross_entropy_backward<T: Scalar>(upstream: T, probs: &Tensor<T>, targets: &[u8]) -> Tensor<T> {
    let s = probs.shape();
    let scale = upstream / T::from_f64(targets.len() as f64);
    let mut d = probs.map(|p| p * scale);
    for (i, &t) in targets.iter().enumerate() {
        let idx = true_prob_index(s, i, t);
        d.data_mut()[idx] = d.data_mut()[idx] - scale;
    }
    d
}
