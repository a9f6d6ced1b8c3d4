//! Direct-summation reference implementations. These index raw buffers by
//! hand and share no code with the library kernels.
#![allow(dead_code)]

use tea_core::block::{Block, Excite, Middle};
use tea_core::kernel::{ConvGeometry, ConvKernel};
use tea_core::me::{MotionExcitation, SqueezeExcite};
use tea_core::mta::{Aggregation, Mta};
use tea_core::{BatchNorm, Tensor};

pub fn idx5(s: &[usize], n: usize, t: usize, c: usize, h: usize, w: usize) -> usize {
    (((n * s[1] + t) * s[2] + c) * s[3] + h) * s[4] + w
}

/// 3-d grouped convolution, zero padding, one output element at a time.
pub fn naive_conv(x: &Tensor<f64>, weight: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let (n, t, h, w) = (s[0], s[1], s[3], s[4]);
    let ot = t + 2 * g.pad_t - g.kernel_t + 1;
    let oh = (h + 2 * g.pad_h - g.kernel_h) / g.stride_h + 1;
    let ow = (w + 2 * g.pad_w - g.kernel_w) / g.stride_w + 1;
    let ipg = g.in_channels / g.groups;
    let opg = g.out_channels / g.groups;
    let mut out = vec![0.0; n * ot * g.out_channels * oh * ow];
    let os = [n, ot, g.out_channels, oh, ow];
    for b in 0..n {
        for to in 0..ot {
            for o in 0..g.out_channels {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = bias.map_or(0.0, |bv| bv[o]);
                        for ci in 0..ipg {
                            let c = (o / opg) * ipg + ci;
                            for dt in 0..g.kernel_t {
                                for dh in 0..g.kernel_h {
                                    for dw in 0..g.kernel_w {
                                        let ti = to as isize + dt as isize - g.pad_t as isize;
                                        let hi = (i * g.stride_h + dh) as isize - g.pad_h as isize;
                                        let wi = (j * g.stride_w + dw) as isize - g.pad_w as isize;
                                        if ti < 0 || hi < 0 || wi < 0 || ti >= t as isize || hi >= h as isize || wi >= w as isize {
                                            continue;
                                        }
                                        let widx = (((o * ipg + ci) * g.kernel_t + dt) * g.kernel_h + dh) * g.kernel_w + dw;
                                        acc += weight[widx]
                                            * x.data()[idx5(&s, b, ti as usize, c, hi as usize, wi as usize)];
                                    }
                                }
                            }
                        }
                        out[idx5(&os, b, to, o, i, j)] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(&os, out).unwrap()
}

/// Per-channel 1-d temporal convolution with taps `k[c]`, zero ends.
pub fn naive_temporal(x: &Tensor<f64>, k: &[[f64; 3]]) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let mut out = vec![0.0; x.len()];
    for n in 0..s[0] {
        for t in 0..s[1] {
            for c in 0..s[2] {
                for h in 0..s[3] {
                    for w in 0..s[4] {
                        let mut acc = 0.0;
                        for (d, &tap) in k[c].iter().enumerate() {
                            let ti = t as isize + d as isize - 1;
                            if ti >= 0 && (ti as usize) < s[1] {
                                acc += tap * x.data()[idx5(&s, n, ti as usize, c, h, w)];
                            }
                        }
                        out[idx5(&s, n, t, c, h, w)] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(&s, out).unwrap()
}

pub fn naive_add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

pub fn naive_relu(a: &Tensor<f64>) -> Tensor<f64> {
    a.map(|v| v.max(0.0))
}

pub fn sigma(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Mean over each `H x W` plane.
pub fn naive_pool(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let mut out = Vec::new();
    for n in 0..s[0] {
        for t in 0..s[1] {
            for c in 0..s[2] {
                let mut acc = 0.0;
                for h in 0..s[3] {
                    for w in 0..s[4] {
                        acc += x.data()[idx5(&s, n, t, c, h, w)];
                    }
                }
                out.push(acc / (s[3] * s[4]) as f64);
            }
        }
    }
    Tensor::new(&[s[0], s[1], s[2], 1, 1], out).unwrap()
}

/// `x[n,t,c,h,w] * a[n,t,c]`.
pub fn naive_gate(x: &Tensor<f64>, a: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let mut out = x.clone();
    for n in 0..s[0] {
        for t in 0..s[1] {
            for c in 0..s[2] {
                let g = a.data()[(n * s[1] + t) * s[2] + c];
                for h in 0..s[3] {
                    for w in 0..s[4] {
                        out.data_mut()[idx5(&s, n, t, c, h, w)] *= g;
                    }
                }
            }
        }
    }
    out
}

pub fn channel_slice(x: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let mut out = Vec::new();
    for n in 0..s[0] {
        for t in 0..s[1] {
            for c in start..start + len {
                for h in 0..s[3] {
                    for w in 0..s[4] {
                        out.push(x.data()[idx5(&s, n, t, c, h, w)]);
                    }
                }
            }
        }
    }
    Tensor::new(&[s[0], s[1], len, s[3], s[4]], out).unwrap()
}

pub fn channel_concat(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let s = parts[0].shape().to_vec();
    let total: usize = parts.iter().map(|p| p.shape()[2]).sum();
    let mut out = Vec::new();
    for n in 0..s[0] {
        for t in 0..s[1] {
            for p in parts {
                let ps = p.shape();
                for c in 0..ps[2] {
                    for h in 0..s[3] {
                        for w in 0..s[4] {
                            out.push(p.data()[idx5(ps, n, t, c, h, w)]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[s[0], s[1], total, s[3], s[4]], out).unwrap()
}

/// ME written out term by term from its defining equations.
///
/// `w_red[m][c]`, `b_red[m]`, `w_trans[m][3][3]`, `w_exp[c][m]`, `b_exp[c]`.
pub struct MeWeights {
    pub w_red: Vec<Vec<f64>>,
    pub b_red: Vec<f64>,
    pub w_trans: Vec<[[f64; 3]; 3]>,
    pub w_exp: Vec<Vec<f64>>,
    pub b_exp: Vec<f64>,
}

/// Returns `(A, X + X . A)`; `A` is `[N, T, C]` flattened.
pub fn me_oracle(x: &Tensor<f64>, wt: &MeWeights) -> (Vec<f64>, Tensor<f64>) {
    let s = x.shape().to_vec();
    let (n, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let m = wt.b_red.len();
    // Xr[n][t][m][h][w]
    let xr = |b: usize, ti: usize, mi: usize, i: usize, j: usize| -> f64 {
        let mut acc = wt.b_red[mi];
        for ci in 0..c {
            acc += wt.w_red[mi][ci] * x.data()[idx5(&s, b, ti, ci, i, j)];
        }
        acc
    };
    let mut a = vec![0.0; n * t * c];
    for b in 0..n {
        for ti in 0..t {
            // spatially pooled motion per reduced channel
            let mut ms = vec![0.0; m];
            if ti + 1 < t {
                for (mi, msv) in ms.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for i in 0..h {
                        for j in 0..w {
                            let mut moved = 0.0;
                            for di in 0..3 {
                                for dj in 0..3 {
                                    let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                        moved += wt.w_trans[mi][di][dj] * xr(b, ti + 1, mi, ii as usize, jj as usize);
                                    }
                                }
                            }
                            acc += moved - xr(b, ti, mi, i, j);
                        }
                    }
                    *msv = acc / (h * w) as f64;
                }
            }
            for ci in 0..c {
                let mut e = wt.b_exp[ci];
                for (mi, &v) in ms.iter().enumerate() {
                    e += wt.w_exp[ci][mi] * v;
                }
                a[(b * t + ti) * c + ci] = 2.0 * sigma(e) - 1.0;
            }
        }
    }
    let mut out = x.clone();
    for b in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                let g = a[(b * t + ti) * c + ci];
                for i in 0..h {
                    for j in 0..w {
                        let k = idx5(&s, b, ti, ci, i, j);
                        out.data_mut()[k] = x.data()[k] + x.data()[k] * g;
                    }
                }
            }
        }
    }
    (a, out)
}

/// Hierarchical cascade built from the naive convs: `temps[i]` are
/// per-channel taps of fragment `i + 2`, `spats[i]` its 3x3 weights. With
/// `stride > 1` fragment 2's conv is strided and the other fragments are
/// subsampled before use.
pub fn mta_oracle(x: &Tensor<f64>, temps: &[Vec<[f64; 3]>], spats: &[Vec<f64>], stride: usize) -> Tensor<f64> {
    let c = x.shape()[2];
    let w = c / 4;
    let mut outs = vec![naive_subsample(&channel_slice(x, 0, w), stride)];
    let mut prev: Option<Tensor<f64>> = None;
    for i in 0..3 {
        let xi = channel_slice(x, (i + 1) * w, w);
        let (input, s) = match &prev {
            None => (xi, stride),
            Some(p) => (naive_add(&naive_subsample(&xi, stride), p), 1),
        };
        let g = ConvGeometry::spatial(w, w, 3, s);
        let y = naive_conv(&naive_temporal(&input, &temps[i]), &spats[i], None, &g);
        prev = Some(y.clone());
        outs.push(y);
    }
    channel_concat(&outs)
}

pub fn naive_subsample(x: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let (oh, ow) = (s[3].div_ceil(stride), s[4].div_ceil(stride));
    let mut out = Vec::new();
    for n in 0..s[0] {
        for t in 0..s[1] {
            for c in 0..s[2] {
                for i in 0..oh {
                    for j in 0..ow {
                        out.push(x.data()[idx5(&s, n, t, c, i * stride, j * stride)]);
                    }
                }
            }
        }
    }
    Tensor::new(&[s[0], s[1], s[2], oh, ow], out).unwrap()
}

/// Max over each window; padding never wins.
pub fn naive_max_pool(x: &Tensor<f64>, k: usize, stride: usize, pad: usize) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let (oh, ow) = ((s[3] + 2 * pad - k) / stride + 1, (s[4] + 2 * pad - k) / stride + 1);
    let mut out = Vec::new();
    for n in 0..s[0] {
        for t in 0..s[1] {
            for c in 0..s[2] {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for di in 0..k {
                            for dj in 0..k {
                                let (y, z) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                                if y >= 0 && z >= 0 && (y as usize) < s[3] && (z as usize) < s[4] {
                                    best = best.max(x.data()[idx5(&s, n, t, c, y as usize, z as usize)]);
                                }
                            }
                        }
                        out.push(best);
                    }
                }
            }
        }
    }
    Tensor::new(&[s[0], s[1], s[2], oh, ow], out).unwrap()
}

/// Biased per-channel mean and variance over `N, T, H, W`.
pub fn naive_moments(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape().to_vec();
    let count = (s[0] * s[1] * s[3] * s[4]) as f64;
    let mut mean = vec![0.0; s[2]];
    let mut var = vec![0.0; s[2]];
    for (c, m) in mean.iter_mut().enumerate() {
        let mut acc = 0.0;
        for n in 0..s[0] {
            for t in 0..s[1] {
                for h in 0..s[3] {
                    for w in 0..s[4] {
                        acc += x.data()[idx5(&s, n, t, c, h, w)];
                    }
                }
            }
        }
        *m = acc / count;
    }
    for (c, v) in var.iter_mut().enumerate() {
        let mut acc = 0.0;
        for n in 0..s[0] {
            for t in 0..s[1] {
                for h in 0..s[3] {
                    for w in 0..s[4] {
                        acc += (x.data()[idx5(&s, n, t, c, h, w)] - mean[c]).powi(2);
                    }
                }
            }
        }
        *v = acc / count;
    }
    (mean, var)
}

/// Res2Net cascade after one shared temporal conv.
pub fn res2net_oracle(x: &Tensor<f64>, temp: &[[f64; 3]], spats: &[Vec<f64>]) -> Tensor<f64> {
    let x = naive_temporal(x, temp);
    let c = x.shape()[2];
    let w = c / 4;
    let g = ConvGeometry::spatial(w, w, 3, 1);
    let mut outs = vec![channel_slice(&x, 0, w)];
    let mut prev: Option<Tensor<f64>> = None;
    for (i, sp) in spats.iter().enumerate() {
        let xi = channel_slice(&x, (i + 1) * w, w);
        let input = match &prev {
            None => xi,
            Some(p) => naive_add(&xi, p),
        };
        let y = naive_conv(&input, sp, None, &g);
        prev = Some(y.clone());
        outs.push(y);
    }
    channel_concat(&outs)
}

/// Inference-mode batch norm with the given statistics.
pub fn naive_bn(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let mut out = x.clone();
    for n in 0..s[0] {
        for t in 0..s[1] {
            for c in 0..s[2] {
                for h in 0..s[3] {
                    for w in 0..s[4] {
                        let k = idx5(&s, n, t, c, h, w);
                        out.data_mut()[k] = gamma[c] * (x.data()[k] - mean[c]) / (var[c] + eps).sqrt() + beta[c];
                    }
                }
            }
        }
    }
    out
}

/// Reference part shift by explicit index remapping.
pub fn shift_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let band = x.shape()[2] / 8;
    shift_bands_oracle(x, band, band)
}

/// Channels `[0, left)` read `t + 1`, `[left, left + right)` read `t - 1`.
pub fn shift_bands_oracle(x: &Tensor<f64>, left: usize, right: usize) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let mut out = Tensor::zeros(&s);
    for n in 0..s[0] {
        for t in 0..s[1] {
            for c in 0..s[2] {
                let src = if c < left {
                    t.checked_add(1).filter(|&u| u < s[1])
                } else if c < left + right {
                    t.checked_sub(1)
                } else {
                    Some(t)
                };
                if let Some(u) = src {
                    for h in 0..s[3] {
                        for w in 0..s[4] {
                            out.data_mut()[idx5(&s, n, t, c, h, w)] = x.data()[idx5(&s, n, u, c, h, w)];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn kconv(x: &Tensor<f64>, k: &ConvKernel<f64>) -> Tensor<f64> {
    naive_conv(x, k.weight.value.data(), k.bias.as_ref().map(|b| b.value.data()), &k.geom)
}

pub fn bn_eval(x: &Tensor<f64>, bn: &BatchNorm<f64>) -> Tensor<f64> {
    naive_bn(
        x,
        bn.gamma.value.data(),
        bn.beta.value.data(),
        &bn.running_mean,
        &bn.running_var,
        bn.eps,
    )
}

/// Reads the 1x1 and 3x3 weights of `me` into plain nested arrays.
pub fn me_weights(me: &MotionExcitation<f64>) -> MeWeights {
    let c = me.channels();
    let m = c / me.reduction();
    let red = me.conv_red.weight.value.data();
    let trans = me.conv_trans.weight.value.data();
    let exp = me.conv_exp.weight.value.data();
    MeWeights {
        w_red: (0..m).map(|i| red[i * c..(i + 1) * c].to_vec()).collect(),
        b_red: me.conv_red.bias.as_ref().unwrap().value.data().to_vec(),
        w_trans: (0..m)
            .map(|i| {
                let k = &trans[i * 9..(i + 1) * 9];
                [[k[0], k[1], k[2]], [k[3], k[4], k[5]], [k[6], k[7], k[8]]]
            })
            .collect(),
        w_exp: (0..c).map(|i| exp[i * m..(i + 1) * m].to_vec()).collect(),
        b_exp: me.conv_exp.bias.as_ref().unwrap().value.data().to_vec(),
    }
}

/// Per-channel taps of a channel-wise temporal kernel.
pub fn taps(k: &ConvKernel<f64>) -> Vec<[f64; 3]> {
    k.weight.value.data().chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect()
}

pub fn se_oracle(se: &SqueezeExcite<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let h = naive_relu(&kconv(&naive_pool(x), &se.fc1));
    let g = kconv(&h, &se.fc2).map(sigma);
    (g.clone(), naive_gate(x, &g))
}

/// MTA with eval-mode norms, written with the reference convs.
pub fn mta_module_oracle(m: &Mta<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let w = m.channels() / 4;
    let x = match m.aggregation() {
        Aggregation::ParallelRes2Net => kconv(x, &m.temporal[0].kernel),
        Aggregation::Hierarchical => x.clone(),
    };
    let mut outs = vec![naive_subsample(&channel_slice(&x, 0, w), m.stride())];
    let mut prev: Option<Tensor<f64>> = None;
    for i in 0..3 {
        let xi = channel_slice(&x, (i + 1) * w, w);
        let mut h = match &prev {
            None => xi,
            Some(p) => naive_add(&naive_subsample(&xi, m.stride()), p),
        };
        if m.aggregation() == Aggregation::Hierarchical {
            h = kconv(&h, &m.temporal[i].kernel);
        }
        let mut y = kconv(&h, &m.spatial[i]);
        if let Some(norms) = &m.norms {
            y = naive_relu(&bn_eval(&y, &norms[i]));
        }
        prev = Some(y.clone());
        outs.push(y);
    }
    channel_concat(&outs)
}

/// Eval-mode block forward composed from the reference pieces.
pub fn block_oracle(b: &Block<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut h = naive_relu(&bn_eval(&kconv(x, &b.conv1), &b.bn1));
    h = match &b.excite {
        Excite::None => h,
        Excite::Me { module, residual } => {
            let (a, out) = me_oracle(&h, &me_weights(module));
            if *residual {
                out
            } else {
                let s = h.shape();
                naive_gate(&h, &Tensor::new(&[s[0], s[1], s[2], 1, 1], a).unwrap())
            }
        }
        Excite::Se(se) => se_oracle(se, &h).1,
    };
    h = match &b.middle {
        Middle::Mta(m) => mta_module_oracle(m, &h),
        Middle::Conv { temporal, conv2, bn2 } => {
            if let Some(t) = temporal {
                h = kconv(&h, &t.kernel);
            }
            naive_relu(&bn_eval(&kconv(&h, conv2), bn2))
        }
    };
    let branch = bn_eval(&kconv(&h, &b.conv3), &b.bn3);
    let skip = match &b.shortcut {
        Some((conv, bn)) => bn_eval(&kconv(x, conv), bn),
        None => x.clone(),
    };
    naive_relu(&naive_add(&branch, &skip))
}
