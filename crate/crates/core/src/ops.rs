//! Forward and backward kernels on raw tensors. The tape in [`crate::tape`]
//! records which of these ran; nothing here knows about gradients flowing
//! through a graph.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::kernel::ConvGeometry;
use crate::tensor::{Real, Tensor};

/// Output positions `o` in `[lo, hi)` whose input `o * stride + k - pad`
/// lands inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if len + pad <= k {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

struct ConvShape {
    n: usize,
    t: usize,
    c: usize,
    h: usize,
    w: usize,
    ot: usize,
    oh: usize,
    ow: usize,
}

fn conv_shape<F: Real>(x: &Tensor<F>, g: &ConvGeometry) -> Result<ConvShape> {
    g.validate()?;
    let [n, t, c, h, w] = x.dims5()?;
    if c != g.in_channels {
        return Err(Error::shape(
            "conv",
            format!("input has {c} channels, kernel expects {}", g.in_channels),
        ));
    }
    let [ot, oh, ow] = g.output_dims(t, h, w)?;
    Ok(ConvShape { n, t, c, h, w, ot, oh, ow })
}

thread_local! {
    static FLIP_WEIGHT_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Negative-control hook: while set, this thread's convolution weight
/// gradients come out with the wrong sign.
#[doc(hidden)]
pub fn set_conv_sign_fault(on: bool) {
    FLIP_WEIGHT_GRAD.with(|f| f.set(on));
}

/// Grouped 3-d convolution with zero padding; temporal stride is always 1.
pub fn conv_forward<F: Real>(x: &Tensor<F>, weight: &[F], bias: Option<&[F]>, g: &ConvGeometry) -> Result<Tensor<F>> {
    let s = conv_shape(x, g)?;
    if weight.len() != g.weight_len() {
        return Err(Error::shape("conv", "weight length does not match geometry"));
    }
    let (ipg, opg) = (g.in_per_group(), g.out_per_group());
    let (kt, kh, kw) = (g.kernel_t, g.kernel_h, g.kernel_w);
    let (in_plane, out_plane) = (s.h * s.w, s.oh * s.ow);
    let o_ch = g.out_channels;
    let xd = x.data();
    let mut out = vec![F::zero(); s.n * s.ot * o_ch * out_plane];

    for b in 0..s.n {
        for to in 0..s.ot {
            for o in 0..o_ch {
                let grp = o / opg;
                let ob = ((b * s.ot + to) * o_ch + o) * out_plane;
                let dst = &mut out[ob..ob + out_plane];
                if let Some(bias) = bias {
                    dst.fill(bias[o]);
                }
                for ci in 0..ipg {
                    let c = grp * ipg + ci;
                    for dt in 0..kt {
                        let ti = to + dt;
                        if ti < g.pad_t || ti - g.pad_t >= s.t {
                            continue;
                        }
                        let ti = ti - g.pad_t;
                        let ib = ((b * s.t + ti) * s.c + c) * in_plane;
                        let src = &xd[ib..ib + in_plane];
                        let wb = ((o * ipg + ci) * kt + dt) * kh * kw;
                        for dh in 0..kh {
                            let (h_lo, h_hi) = valid_range(s.oh, s.h, g.stride_h, dh, g.pad_h);
                            for dw in 0..kw {
                                let wv = weight[wb + dh * kw + dw];
                                let (w_lo, w_hi) = valid_range(s.ow, s.w, g.stride_w, dw, g.pad_w);
                                if w_lo == w_hi {
                                    continue;
                                }
                                for oh in h_lo..h_hi {
                                    let ih = oh * g.stride_h + dh - g.pad_h;
                                    let row_in = &src[ih * s.w..(ih + 1) * s.w];
                                    let row_out = &mut dst[oh * s.ow..(oh + 1) * s.ow];
                                    if g.stride_w == 1 {
                                        let shift = dw as isize - g.pad_w as isize;
                                        let lo_in = (w_lo as isize + shift) as usize;
                                        let len = w_hi - w_lo;
                                        for (d, &v) in row_out[w_lo..w_hi].iter_mut().zip(&row_in[lo_in..lo_in + len]) {
                                            *d += wv * v;
                                        }
                                    } else {
                                        for ow in w_lo..w_hi {
                                            row_out[ow] += wv * row_in[ow * g.stride_w + dw - g.pad_w];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[s.n, s.ot, o_ch, s.oh, s.ow], out)
}

/// Accumulates input, weight and bias gradients of [`conv_forward`].
pub fn conv_backward<F: Real>(
    x: &Tensor<F>,
    weight: &[F],
    g: &ConvGeometry,
    grad_out: &[F],
    mut grad_x: Option<&mut [F]>,
    mut grad_w: Option<&mut [F]>,
    grad_b: Option<&mut [F]>,
) -> Result<()> {
    let s = conv_shape(x, g)?;
    let (ipg, opg) = (g.in_per_group(), g.out_per_group());
    let (kt, kh, kw) = (g.kernel_t, g.kernel_h, g.kernel_w);
    let (in_plane, out_plane) = (s.h * s.w, s.oh * s.ow);
    let o_ch = g.out_channels;
    let xd = x.data();
    let flip = FLIP_WEIGHT_GRAD.with(Cell::get);

    if let Some(gb) = grad_b {
        for b in 0..s.n {
            for to in 0..s.ot {
                for (o, acc) in gb.iter_mut().enumerate() {
                    let ob = ((b * s.ot + to) * o_ch + o) * out_plane;
                    *acc += grad_out[ob..ob + out_plane].iter().copied().sum::<F>();
                }
            }
        }
    }
    if grad_x.is_none() && grad_w.is_none() {
        return Ok(());
    }

    for b in 0..s.n {
        for to in 0..s.ot {
            for o in 0..o_ch {
                let grp = o / opg;
                let ob = ((b * s.ot + to) * o_ch + o) * out_plane;
                let go = &grad_out[ob..ob + out_plane];
                for ci in 0..ipg {
                    let c = grp * ipg + ci;
                    for dt in 0..kt {
                        let ti = to + dt;
                        if ti < g.pad_t || ti - g.pad_t >= s.t {
                            continue;
                        }
                        let ti = ti - g.pad_t;
                        let ib = ((b * s.t + ti) * s.c + c) * in_plane;
                        let wb = ((o * ipg + ci) * kt + dt) * kh * kw;
                        for dh in 0..kh {
                            let (h_lo, h_hi) = valid_range(s.oh, s.h, g.stride_h, dh, g.pad_h);
                            for dw in 0..kw {
                                let widx = wb + dh * kw + dw;
                                let wv = weight[widx];
                                let (w_lo, w_hi) = valid_range(s.ow, s.w, g.stride_w, dw, g.pad_w);
                                let mut acc = F::zero();
                                for oh in h_lo..h_hi {
                                    let ih = oh * g.stride_h + dh - g.pad_h;
                                    let row_base = ib + ih * s.w;
                                    for ow in w_lo..w_hi {
                                        let iw = ow * g.stride_w + dw - g.pad_w;
                                        let gv = go[oh * s.ow + ow];
                                        if let Some(gx) = grad_x.as_deref_mut() {
                                            gx[row_base + iw] += wv * gv;
                                        }
                                        acc += gv * xd[row_base + iw];
                                    }
                                }
                                if let Some(gw) = grad_w.as_deref_mut() {
                                    gw[widx] += if flip { -acc } else { acc };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Part shift along time: channels `[0, left)` read frame `t + 1`, channels
/// `[left, left + right)` read frame `t - 1`, the rest are untouched.
/// Vacated boundary frames are zero.
pub fn shift_forward<F: Real>(x: &Tensor<F>, left: usize, right: usize) -> Result<Tensor<F>> {
    let [n, t, c, h, w] = x.dims5()?;
    if left + right > c {
        return Err(Error::shape("temporal_shift", format!("bands {left}+{right} exceed {c} channels")));
    }
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![F::zero(); xd.len()];
    for b in 0..n {
        for ti in 0..t {
            for ch in 0..c {
                let src_t = if ch < left {
                    (ti + 1 < t).then_some(ti + 1)
                } else if ch < left + right {
                    ti.checked_sub(1)
                } else {
                    Some(ti)
                };
                if let Some(st) = src_t {
                    let dst = ((b * t + ti) * c + ch) * plane;
                    let src = ((b * t + st) * c + ch) * plane;
                    out[dst..dst + plane].copy_from_slice(&xd[src..src + plane]);
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Adjoint of [`shift_forward`]: the opposite shift.
pub fn shift_backward<F: Real>(grad_out: &Tensor<F>, left: usize, right: usize) -> Result<Tensor<F>> {
    let [n, t, c, h, w] = grad_out.dims5()?;
    let plane = h * w;
    let gd = grad_out.data();
    let mut gx = vec![F::zero(); gd.len()];
    for b in 0..n {
        for ti in 0..t {
            for ch in 0..c {
                let src_t = if ch < left {
                    (ti + 1 < t).then_some(ti + 1)
                } else if ch < left + right {
                    ti.checked_sub(1)
                } else {
                    Some(ti)
                };
                if let Some(st) = src_t {
                    let dst = ((b * t + ti) * c + ch) * plane;
                    let src = ((b * t + st) * c + ch) * plane;
                    for i in 0..plane {
                        gx[src + i] += gd[dst + i];
                    }
                }
            }
        }
    }
    Tensor::new(grad_out.shape(), gx)
}

pub fn spatial_mean<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [n, t, c, h, w] = x.dims5()?;
    let plane = h * w;
    let inv = F::one() / F::from_usize(plane).unwrap();
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<F>() * inv)
        .collect();
    Tensor::new(&[n, t, c, 1, 1], data)
}

pub fn time_mean<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [n, t, c, h, w] = x.dims5()?;
    let frame = c * h * w;
    let inv = F::one() / F::from_usize(t).unwrap();
    let xd = x.data();
    let mut out = vec![F::zero(); n * frame];
    for b in 0..n {
        for ti in 0..t {
            let src = &xd[(b * t + ti) * frame..(b * t + ti + 1) * frame];
            for (o, &v) in out[b * frame..(b + 1) * frame].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[n, 1, c, h, w], out)
}

/// Per-channel mean and biased variance over `N x T x H x W`.
pub fn channel_moments<F: Real>(x: &Tensor<F>) -> Result<(Vec<F>, Vec<F>)> {
    let [n, t, c, h, w] = x.dims5()?;
    let plane = h * w;
    let count = F::from_usize(n * t * plane).unwrap();
    let mut mean = vec![F::zero(); c];
    for (i, p) in x.data().chunks_exact(plane).enumerate() {
        mean[i % c] += p.iter().copied().sum::<F>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![F::zero(); c];
    for (i, p) in x.data().chunks_exact(plane).enumerate() {
        let m = mean[i % c];
        var[i % c] += p.iter().map(|&v| (v - m) * (v - m)).sum::<F>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, var))
}

/// `y = scale[c] * x + shift[c]`.
pub fn channel_affine<F: Real>(x: &Tensor<F>, scale: &[F], shift: &[F]) -> Result<Tensor<F>> {
    let [_, _, c, h, w] = x.dims5()?;
    let plane = h * w;
    let mut out = x.clone();
    for (i, p) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let (a, b) = (scale[i % c], shift[i % c]);
        p.iter_mut().for_each(|v| *v = a * *v + b);
    }
    Ok(out)
}

/// Max pooling with a square window; returns values and argmax offsets.
pub fn max_pool_forward<F: Real>(x: &Tensor<F>, k: usize, stride: usize, pad: usize) -> Result<(Tensor<F>, Vec<usize>)> {
    let [n, t, c, h, w] = x.dims5()?;
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape("max_pool", "window larger than padded input"));
    }
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * t * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..n * t * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = F::neg_infinity();
                let mut best_at = base;
                for di in 0..k {
                    for dj in 0..k {
                        let (y, x_) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                        if y < 0 || x_ < 0 || y >= h as isize || x_ >= w as isize {
                            continue;
                        }
                        let idx = base + y as usize * w + x_ as usize;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_at = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_at);
            }
        }
    }
    Ok((Tensor::new(&[n, t, c, oh, ow], out)?, arg))
}

/// Picks every `stride`-th pixel starting at the origin.
pub fn subsample_forward<F: Real>(x: &Tensor<F>, stride: usize) -> Result<Tensor<F>> {
    let [n, t, c, h, w] = x.dims5()?;
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let xd = x.data();
    let mut out = Vec::with_capacity(n * t * c * oh * ow);
    for plane in 0..n * t * c {
        for i in 0..oh {
            for j in 0..ow {
                out.push(xd[plane * h * w + i * stride * w + j * stride]);
            }
        }
    }
    Tensor::new(&[n, t, c, oh, ow], out)
}

pub fn concat_channels<F: Real>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let [n, t, _, h, w] = first.dims5()?;
    let mut total = 0;
    for p in parts {
        let [pn, pt, pc, ph, pw] = p.dims5()?;
        if (pn, pt, ph, pw) != (n, t, h, w) {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
        total += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * t * total * plane);
    for frame in 0..n * t {
        for p in parts {
            let len = p.shape()[2] * plane;
            out.extend_from_slice(&p.data()[frame * len..(frame + 1) * len]);
        }
    }
    Tensor::new(&[n, t, total, h, w], out)
}

/// Zero frames before and after along time.
pub fn pad_time<F: Real>(x: &Tensor<F>, before: usize, after: usize) -> Result<Tensor<F>> {
    let [n, t, c, h, w] = x.dims5()?;
    let frame = c * h * w;
    let nt = t + before + after;
    let mut out = vec![F::zero(); n * nt * frame];
    for b in 0..n {
        let src = &x.data()[b * t * frame..(b + 1) * t * frame];
        let dst = (b * nt + before) * frame;
        out[dst..dst + t * frame].copy_from_slice(src);
    }
    Tensor::new(&[n, nt, c, h, w], out)
}

pub fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax_rows<F: Real>(logits: &[F], k: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: F = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}
