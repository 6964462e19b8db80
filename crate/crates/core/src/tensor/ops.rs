//! Forward kernels and their adjoints.
//!
//! Kernels parallelize over the batch (or over output channels for weight
//! gradients) but every output element is accumulated sequentially by one
//! thread, so results do not depend on the thread count.

use rayon::prelude::*;

use super::{ensure_same_shape, ConvSpec, Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn shape_err(op: &'static str, lhs: Shape, rhs: Shape) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    let [_, c, h, w] = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput {
            op: "conv2d",
            shape: input.shape(),
        });
    }
    if weights.shape() != spec.weight_shape(c) {
        return Err(shape_err("conv2d", input.shape(), weights.shape()));
    }
    match (bias, spec.has_bias) {
        (Some(b), true) if b.shape() == [1, spec.out_channels, 1, 1] => {}
        (None, false) => {}
        (Some(b), _) => return Err(shape_err("conv2d bias", weights.shape(), b.shape())),
        (None, true) => {
            return Err(Error::Contract(
                "conv2d: spec requires a bias tensor".into(),
            ));
        }
    }
    spec.output_hw(h, w).ok_or_else(|| {
        Error::Contract(format!(
            "conv2d: kernel {}x{} does not fit input {h}x{w} with padding ({}, {})",
            spec.kernel_h, spec.kernel_w, spec.pad_h, spec.pad_w
        ))
    })
}

/// Output positions `lo..hi` along one axis whose input tap `o*stride + k - pad`
/// falls inside `0..extent`.
#[inline]
fn valid_range(
    extent: usize,
    out_extent: usize,
    k: usize,
    pad: usize,
    stride: usize,
) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    if extent + pad <= k {
        return (0, 0);
    }
    let hi = ((extent - 1 + pad - k) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

/// Cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (oh_n, ow_n) = check_conv(input, weights, bias, spec)?;
    let [n, c, h, w] = input.shape();
    let o_n = spec.out_channels;
    let (kh_n, kw_n, s, ph, pw) = (
        spec.kernel_h,
        spec.kernel_w,
        spec.stride,
        spec.pad_h,
        spec.pad_w,
    );
    let mut out = Tensor::zeros([n, o_n, oh_n, ow_n]);
    let in_per = c * h * w;
    let out_per = o_n * oh_n * ow_n;
    if out_per == 0 {
        return Ok(out);
    }
    let x = input.data();
    let wt = weights.data();
    out.data_mut()
        .par_chunks_mut(out_per)
        .enumerate()
        .for_each(|(b, dst)| {
            let src = &x[b * in_per..(b + 1) * in_per];
            for o in 0..o_n {
                let plane = &mut dst[o * oh_n * ow_n..(o + 1) * oh_n * ow_n];
                if let Some(bias) = bias {
                    plane.fill(bias.data()[o]);
                }
                for ci in 0..c {
                    let chan = &src[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..kh_n {
                        let (oy_lo, oy_hi) = valid_range(h, oh_n, ky, ph, s);
                        for kx in 0..kw_n {
                            let wv = wt[((o * c + ci) * kh_n + ky) * kw_n + kx];
                            let (ox_lo, ox_hi) = valid_range(w, ow_n, kx, pw, s);
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - ph;
                                let row = &chan[iy * w..(iy + 1) * w];
                                let orow = &mut plane[oy * ow_n..(oy + 1) * ow_n];
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * row[ox * s + kx - pw];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let [n, c, h, w] = input.shape();
    let o_n = spec.out_channels;
    let (oh_n, ow_n) = spec
        .output_hw(h, w)
        .ok_or_else(|| Error::Contract("conv2d_backward: invalid geometry".into()))?;
    if grad_out.shape() != [n, o_n, oh_n, ow_n] {
        return Err(shape_err(
            "conv2d_backward",
            [n, o_n, oh_n, ow_n],
            grad_out.shape(),
        ));
    }
    let (kh_n, kw_n, s, ph, pw) = (
        spec.kernel_h,
        spec.kernel_w,
        spec.stride,
        spec.pad_h,
        spec.pad_w,
    );
    let in_per = c * h * w;
    let out_plane = oh_n * ow_n;
    let out_per = o_n * out_plane;
    let x = input.data();
    let wt = weights.data();
    let g = grad_out.data();

    let mut gin = Tensor::zeros(input.shape());
    gin.data_mut()
        .par_chunks_mut(in_per.max(1))
        .enumerate()
        .for_each(|(b, dst)| {
            let gsrc = &g[b * out_per..(b + 1) * out_per];
            for o in 0..o_n {
                let gplane = &gsrc[o * out_plane..(o + 1) * out_plane];
                for ci in 0..c {
                    let chan = &mut dst[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..kh_n {
                        let (oy_lo, oy_hi) = valid_range(h, oh_n, ky, ph, s);
                        for kx in 0..kw_n {
                            let wv = wt[((o * c + ci) * kh_n + ky) * kw_n + kx];
                            let (ox_lo, ox_hi) = valid_range(w, ow_n, kx, pw, s);
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - ph;
                                let grow = &gplane[oy * ow_n..(oy + 1) * ow_n];
                                let row = &mut chan[iy * w..(iy + 1) * w];
                                for ox in ox_lo..ox_hi {
                                    row[ox * s + kx - pw] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });

    let per_o = c * kh_n * kw_n;
    let mut gw = Tensor::zeros(weights.shape());
    gw.data_mut()
        .par_chunks_mut(per_o.max(1))
        .enumerate()
        .for_each(|(o, dst)| {
            for b in 0..n {
                let gplane = &g[b * out_per + o * out_plane..b * out_per + (o + 1) * out_plane];
                let src = &x[b * in_per..(b + 1) * in_per];
                for ci in 0..c {
                    let chan = &src[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..kh_n {
                        let (oy_lo, oy_hi) = valid_range(h, oh_n, ky, ph, s);
                        for kx in 0..kw_n {
                            let (ox_lo, ox_hi) = valid_range(w, ow_n, kx, pw, s);
                            let mut acc = T::zero();
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - ph;
                                let row = &chan[iy * w..(iy + 1) * w];
                                let grow = &gplane[oy * ow_n..(oy + 1) * ow_n];
                                for ox in ox_lo..ox_hi {
                                    acc += grow[ox] * row[ox * s + kx - pw];
                                }
                            }
                            dst[(ci * kh_n + ky) * kw_n + kx] += acc;
                        }
                    }
                }
            }
        });

    let gb = spec.has_bias.then(|| {
        let mut gb = Tensor::zeros([1, o_n, 1, 1]);
        for b in 0..n {
            for o in 0..o_n {
                let start = b * out_per + o * out_plane;
                let s: T = g[start..start + out_plane].iter().copied().sum();
                gb.data_mut()[o] += s;
            }
        }
        gb
    });

    Ok(Conv2dGrads {
        input: gin,
        weights: gw,
        bias: gb,
    })
}

/// Logistic function, evaluated with the branch that never exponentiates a
/// positive argument. Results are clamped into the open interval `(0, 1)`:
/// above roughly `x = 37` the exact value rounds to `1` in `f64`, so the
/// largest representable value below one is returned instead.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let one = T::one();
    let s = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let below_one = one - T::epsilon() / T::lit(2.0);
    s.max(T::min_positive_value()).min(below_one)
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// `grad_in = grad_out · s(1 - s)` given the forward output `s`.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_map(grad_out, "sigmoid_backward", |s, g| g * s * (T::one() - s))
}

fn check_broadcast<T: Scalar>(
    op: &'static str,
    feature: &Tensor<T>,
    map: &Tensor<T>,
) -> Result<()> {
    let [n, _, h, w] = feature.shape();
    if map.shape() != [n, 1, h, w] {
        return Err(shape_err(op, feature.shape(), map.shape()));
    }
    Ok(())
}

/// Multiplies every channel of `feature` by the single-channel `map`.
pub fn mul_broadcast<T: Scalar>(feature: &Tensor<T>, map: &Tensor<T>) -> Result<Tensor<T>> {
    check_broadcast("mul_broadcast", feature, map)?;
    let [_, _, h, w] = feature.shape();
    let mut out = feature.clone();
    let plane = h * w;
    if plane == 0 {
        return Ok(out);
    }
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let c = feature.shape()[1];
        let m = &map.data()[(i / c) * plane..(i / c + 1) * plane];
        for (v, &g) in chunk.iter_mut().zip(m) {
            *v *= g;
        }
    }
    Ok(out)
}

/// Returns `(d feature, d map)`.
pub fn mul_broadcast_backward<T: Scalar>(
    feature: &Tensor<T>,
    map: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_broadcast("mul_broadcast_backward", feature, map)?;
    ensure_same_shape("mul_broadcast_backward", feature, grad_out)?;
    let gf = mul_broadcast(grad_out, map)?;
    let [n, c, h, w] = feature.shape();
    let plane = h * w;
    let mut gm = Tensor::zeros(map.shape());
    for b in 0..n {
        let dst = &mut gm.data_mut()[b * plane..(b + 1) * plane];
        for ci in 0..c {
            let start = (b * c + ci) * plane;
            let f = &feature.data()[start..start + plane];
            let g = &grad_out.data()[start..start + plane];
            for ((d, &fv), &gv) in dst.iter_mut().zip(f).zip(g) {
                *d += fv * gv;
            }
        }
    }
    Ok((gf, gm))
}

/// Multiplies channel `c` of sample `n` by `scale[n, c]`.
pub fn channel_scale<T: Scalar>(input: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    if scale.shape() != [n, c, 1, 1] {
        return Err(shape_err("channel_scale", input.shape(), scale.shape()));
    }
    let mut out = input.clone();
    let plane = h * w;
    if plane == 0 {
        return Ok(out);
    }
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let k = scale.data()[i];
        chunk.iter_mut().for_each(|v| *v *= k);
    }
    Ok(out)
}

pub fn channel_scale_backward<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let gi = channel_scale(grad_out, scale)?;
    let [_, _, h, w] = input.shape();
    let plane = (h * w).max(1);
    let gs: Vec<T> = input
        .data()
        .chunks(plane)
        .zip(grad_out.data().chunks(plane))
        .map(|(x, g)| x.iter().zip(g).map(|(&a, &b)| a * b).sum())
        .collect();
    Ok((gi, Tensor::from_vec(scale.shape(), gs)?))
}

fn check_multiplier(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::config(
            "zoom_multiplier",
            format!("must be >= 2, got {m}"),
        ));
    }
    Ok(())
}

/// Places `input(n,c,h,w)` at `(n,c,m·h,m·w)` of an `m`-times larger grid; all
/// other positions are exactly zero.
pub fn upsample_zeros<T: Scalar>(input: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    check_multiplier(m)?;
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, m * h, m * w]);
    let ow = m * w;
    for nc in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(nc * m * h + m * y) * ow + m * x] =
                    input.data()[(nc * h + y) * w + x];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_zeros`]: stride-`m` subsampling of the output gradient.
pub fn upsample_zeros_backward<T: Scalar>(grad_out: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    check_multiplier(m)?;
    let [n, c, oh, ow] = grad_out.shape();
    if oh % m != 0 || ow % m != 0 {
        return Err(Error::Contract(format!(
            "upsample_zeros_backward: extents {oh}x{ow} not divisible by {m}"
        )));
    }
    let (h, w) = (oh / m, ow / m);
    Ok(Tensor::from_fn([n, c, h, w], |[b, ci, y, x]| {
        grad_out.at([b, ci, m * y, m * x])
    }))
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput {
            op: "global_avg_pool",
            shape: input.shape(),
        });
    }
    let denom = T::lit((h * w) as f64);
    let data = input
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: Shape,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape;
    if grad_out.shape() != [n, c, 1, 1] {
        return Err(shape_err(
            "global_avg_pool_backward",
            input_shape,
            grad_out.shape(),
        ));
    }
    let denom = T::lit((h * w) as f64);
    Ok(Tensor::from_fn(input_shape, |[b, ci, _, _]| {
        grad_out.at([b, ci, 0, 0]) / denom
    }))
}

/// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
/// Returns the pooled tensor and, per output element, the flat input offset
/// of the selected maximum (first in scan order on ties).
pub fn max_pool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.shape();
    if h < 2 || w < 2 {
        return Err(Error::EmptyInput {
            op: "max_pool2",
            shape: input.shape(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(out.len());
    let x = input.data();
    let mut k = 0;
    for nc in 0..n * c {
        let base = nc * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + (2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.data_mut()[k] = x[best];
                arg.push(best);
                k += 1;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2_backward<T: Scalar>(
    input_shape: Shape,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gin = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gin.data_mut()[i] += g;
    }
    gin
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, "relu_backward", |x, g| {
        if x > T::zero() {
            g
        } else {
            T::zero()
        }
    })
}

/// Fully connected layer. Each batch item of `input` is flattened to a
/// feature vector of length `F`; `weights` is `[O, F, 1, 1]`, `bias` is
/// `[1, O, 1, 1]`. Output is `[N, O, 1, 1]`.
pub fn dense<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let n = input.shape()[0];
    let f = input.sample_len();
    let [o_n, wf, kh, kw] = weights.shape();
    if wf != f || kh != 1 || kw != 1 {
        return Err(shape_err("dense", input.shape(), weights.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [1, o_n, 1, 1] {
            return Err(shape_err("dense bias", weights.shape(), b.shape()));
        }
    }
    let mut out = Vec::with_capacity(n * o_n);
    for b in 0..n {
        let x = input.sample(b);
        for o in 0..o_n {
            let row = &weights.data()[o * f..(o + 1) * f];
            let mut acc = bias.map_or(T::zero(), |bb| bb.data()[o]);
            for (&wv, &xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            out.push(acc);
        }
    }
    Tensor::from_vec([n, o_n, 1, 1], out)
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let n = input.shape()[0];
    let f = input.sample_len();
    let o_n = weights.shape()[0];
    if grad_out.shape() != [n, o_n, 1, 1] {
        return Err(shape_err(
            "dense_backward",
            [n, o_n, 1, 1],
            grad_out.shape(),
        ));
    }
    let mut gin = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weights.shape());
    let mut gb = Tensor::zeros([1, o_n, 1, 1]);
    for b in 0..n {
        let x = input.sample(b);
        for o in 0..o_n {
            let g = grad_out.data()[b * o_n + o];
            gb.data_mut()[o] += g;
            let row = &weights.data()[o * f..(o + 1) * f];
            let gi = &mut gin.data_mut()[b * f..(b + 1) * f];
            for (d, &wv) in gi.iter_mut().zip(row) {
                *d += g * wv;
            }
            let gwr = &mut gw.data_mut()[o * f..(o + 1) * f];
            for (d, &xv) in gwr.iter_mut().zip(x) {
                *d += g * xv;
            }
        }
    }
    Ok((gin, gw, gb))
}

/// Row-wise softmax of `[N, K, 1, 1]` logits, computed after subtracting the
/// row maximum.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.sample_len().max(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Mean cross-entropy of softmax(logits) against integer labels. Returns the
/// loss and the softmax probabilities (reused by the backward pass).
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let n = logits.shape()[0];
    let k = logits.sample_len();
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyInput {
            op: "softmax_cross_entropy",
            shape: logits.shape(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut loss = T::zero();
    for (b, &l) in labels.iter().enumerate() {
        let row = logits.sample(b);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        loss += lse - row[l];
    }
    Ok((loss / T::lit(n as f64), softmax(logits)))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    grad_loss: T,
) -> Tensor<T> {
    let n = probs.shape()[0];
    let k = probs.sample_len();
    let scale = grad_loss / T::lit(n as f64);
    let mut g = probs.clone();
    for (b, &l) in labels.iter().enumerate() {
        g.data_mut()[b * k + l] -= T::one();
    }
    g.data_mut().iter_mut().for_each(|v| *v *= scale);
    g
}
