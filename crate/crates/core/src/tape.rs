//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to produce input gradients. [`Tape::backward`] walks the nodes in
//! exact reverse order of recording.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernel::{ConvGeometry, ConvKernel};
use crate::ops;
use crate::param::{fresh_id, Param, ParamId};
use crate::tensor::{real, Real, Tensor};

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeometry },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulChannel { x: usize, a: usize },
    Affine { x: usize, scale: F },
    Sigmoid(usize),
    Relu(usize),
    SpatialMean(usize),
    TimeMean(usize),
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<F>, inv_std: Vec<F>, batch_stats: bool },
    SliceChannels { x: usize, start: usize },
    ConcatChannels(Vec<usize>),
    SliceTime { x: usize, start: usize },
    PadTime { x: usize, before: usize },
    Shift { x: usize, left: usize, right: usize },
    Subsample { x: usize, stride: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    Reshape(usize),
    Sum(usize),
    Mask { x: usize, mask: Vec<F> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<F> },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } => std::iter::once(*x).chain(std::iter::once(*w)).chain(*b).collect(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MulChannel { x, a } => vec![*x, *a],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatChannels(parts) => parts.clone(),
            Op::Affine { x, .. }
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::SpatialMean(x)
            | Op::TimeMean(x)
            | Op::SliceChannels { x, .. }
            | Op::SliceTime { x, .. }
            | Op::PadTime { x, .. }
            | Op::Shift { x, .. }
            | Op::Subsample { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mask { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub count: usize,
}

#[derive(Debug)]
pub struct Tape<F> {
    id: u64,
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    batch_stats: HashMap<u64, BatchStats<F>>,
    consumed: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            id: fresh_id(),
            nodes: Vec::new(),
            params: HashMap::new(),
            batch_stats: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter as a gradient-tracked leaf. Repeated calls with
    /// the same parameter return the same variable.
    pub fn param(&mut self, p: &Param<F>) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.leaf(p.value.clone(), true);
        self.params.insert(p.id(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        let i = self.check(v).expect("variable from another tape");
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub(crate) fn record_batch_stats(&mut self, key: u64, stats: BatchStats<F>) {
        self.batch_stats.insert(key, stats);
    }

    pub(crate) fn batch_stats(&self, key: u64) -> Option<&BatchStats<F>> {
        self.batch_stats.get(&key)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&self, a: usize, b: usize, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn conv(&mut self, x: Var, k: &ConvKernel<F>) -> Result<Var> {
        let w = self.param(&k.weight);
        let b = k.bias.as_ref().map(|b| self.param(b));
        self.conv_raw(x, w, b, k.geom)
    }

    /// Convolution with explicit weight and bias variables.
    pub fn conv_raw(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let bi = b.map(|b| self.check(b)).transpose()?;
        let out = ops::conv_forward(
            &self.nodes[xi].value,
            self.nodes[wi].value.data(),
            bi.map(|b| self.nodes[b].value.data()),
            &geom,
        )?;
        Ok(self.push(out, Op::Conv { x: xi, w: wi, b: bi, geom }))
    }

    /// 2-d convolution applied to every frame independently.
    pub fn conv2d(&mut self, x: Var, k: &ConvKernel<F>) -> Result<Var> {
        if k.geom.kernel_t != 1 || k.geom.pad_t != 0 {
            return Err(Error::shape("conv2d", "kernel has a temporal extent"));
        }
        self.conv(x, k)
    }

    /// Channel-wise 1-d convolution along time at every spatial site.
    pub fn temporal_conv1d_cw(&mut self, x: Var, k: &ConvKernel<F>) -> Result<Var> {
        let c = self.value(x).dims5()?[2];
        let g = &k.geom;
        if g.groups != c || !g.is_channel_wise() {
            return Err(Error::shape("temporal_conv1d_cw", format!("groups {} != channels {c}", g.groups)));
        }
        if g.kernel_h != 1 || g.kernel_w != 1 || g.kernel_t != 2 * g.pad_t + 1 {
            return Err(Error::shape("temporal_conv1d_cw", "kernel must be 1-d, odd and length-preserving"));
        }
        self.conv(x, k)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", ai, bi)?;
        let out = self.zip_map(ai, bi, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(ai, bi)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("sub", ai, bi)?;
        let out = self.zip_map(ai, bi, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(ai, bi)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("mul", ai, bi)?;
        let out = self.zip_map(ai, bi, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ai, bi)))
    }

    /// `x[n,t,c,h,w] * a[n,t,c,0,0]`.
    pub fn mul_broadcast_channel(&mut self, x: Var, a: Var) -> Result<Var> {
        let (xi, ai) = (self.check(x)?, self.check(a)?);
        let [n, t, c, h, w] = self.nodes[xi].value.dims5()?;
        if self.nodes[ai].value.shape() != [n, t, c, 1, 1] {
            return Err(Error::shape(
                "mul_broadcast_channel",
                format!("gate {:?} for input {:?}", self.nodes[ai].value.shape(), [n, t, c, h, w]),
            ));
        }
        let plane = h * w;
        let mut out = self.nodes[xi].value.clone();
        let gate = self.nodes[ai].value.data();
        for (p, &g) in out.data_mut().chunks_exact_mut(plane).zip(gate) {
            p.iter_mut().for_each(|v| *v *= g);
        }
        Ok(self.push(out, Op::MulChannel { x: xi, a: ai }))
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let (s, b) = (real::<F>(scale), real::<F>(shift));
        let out = self.nodes[xi].value.map(|v| s * v + b);
        Ok(self.push(out, Op::Affine { x: xi, scale: s }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.map(ops::sigmoid);
        Ok(self.push(out, Op::Sigmoid(xi)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.map(|v| if v > F::zero() { v } else { F::zero() });
        Ok(self.push(out, Op::Relu(xi)))
    }

    pub fn global_avg_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = ops::spatial_mean(&self.nodes[xi].value)?;
        Ok(self.push(out, Op::SpatialMean(xi)))
    }

    /// Mean over frames: `[N,T,C,H,W] -> [N,1,C,H,W]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = ops::time_mean(&self.nodes[xi].value)?;
        Ok(self.push(out, Op::TimeMean(xi)))
    }

    /// Per-channel normalisation. With `stats == None` the batch moments
    /// are used (training); otherwise the given `(mean, var)` are.
    /// Returns the batch moments when they were computed.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[F], &[F])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let xv = &self.nodes[xi].value;
        let [n, t, c, h, w] = xv.dims5()?;
        if self.nodes[gi].value.shape() != [c] || self.nodes[bi].value.shape() != [c] {
            return Err(Error::shape("batch_norm", format!("scale/shift must have length {c}")));
        }
        let eps = real::<F>(eps);
        let (mean, var, batch) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let (m, v) = ops::channel_moments(xv)?;
                let st = BatchStats {
                    mean: m.clone(),
                    var: v.clone(),
                    count: n * t * h * w,
                };
                (m, v, Some(st))
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let scale: Vec<F> = (0..c).map(|i| g[i] * inv_std[i]).collect();
        let shift: Vec<F> = (0..c).map(|i| b[i] - g[i] * inv_std[i] * mean[i]).collect();
        let out = ops::channel_affine(xv, &scale, &shift)?;
        let batch_stats = batch.is_some();
        let v = self.push(
            out,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                mean,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, batch))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.slice_channels(start, len)?;
        Ok(self.push(out, Op::SliceChannels { x: xi, start }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let tensors: Vec<&Tensor<F>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = ops::concat_channels(&tensors)?;
        Ok(self.push(out, Op::ConcatChannels(idx)))
    }

    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.slice_time(start, len)?;
        Ok(self.push(out, Op::SliceTime { x: xi, start }))
    }

    pub fn pad_time(&mut self, x: Var, before: usize, after: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let out = ops::pad_time(&self.nodes[xi].value, before, after)?;
        Ok(self.push(out, Op::PadTime { x: xi, before }))
    }

    /// Part shift with explicit band widths; see [`ops::shift_forward`].
    pub fn shift_bands(&mut self, x: Var, left: usize, right: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let out = ops::shift_forward(&self.nodes[xi].value, left, right)?;
        Ok(self.push(out, Op::Shift { x: xi, left, right }))
    }

    pub fn subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        let xi = self.check(x)?;
        if stride == 1 {
            return Ok(x);
        }
        let out = ops::subsample_forward(&self.nodes[xi].value, stride)?;
        Ok(self.push(out, Op::Subsample { x: xi, stride }))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let (out, argmax) = ops::max_pool_forward(&self.nodes[xi].value, k, stride, pad)?;
        Ok(self.push(out, Op::MaxPool { x: xi, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.reshape(shape)?;
        Ok(self.push(out, Op::Reshape(xi)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.sum());
        Ok(self.push(out, Op::Sum(xi)))
    }

    /// `sum(x * weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<F>) -> Result<Var> {
        let w = self.constant(weights.clone());
        let p = self.mul(x, w)?;
        self.sum(p)
    }

    /// Elementwise multiply by a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        let xi = self.check(x)?;
        if mask.len() != self.nodes[xi].value.len() {
            return Err(Error::shape("mask", "mask length differs from input"));
        }
        let mut out = self.nodes[xi].value.clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
        Ok(self.push(out, Op::Mask { x: xi, mask }))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `[N, K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let lv = &self.nodes[li].value;
        let &[n, k] = lv.shape() else {
            return Err(Error::shape("softmax_cross_entropy", format!("logits must be [N,K], got {:?}", lv.shape())));
        };
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let probs = ops::softmax_rows(lv.data(), k);
        let mut loss = F::zero();
        for (row, &label) in lv.data().chunks_exact(k).zip(labels) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            loss += lse - row[label];
        }
        loss /= F::from_usize(n).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Back-propagates from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        let li = self.check(loss)?;
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.nodes[li].value.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![F::one()]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape(), g)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients {
            tape: self.id,
            grads,
            params: self.params.iter().map(|(&k, v)| (k, v.index)).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        macro_rules! acc {
            ($j:expr) => {
                slot(grads, nodes, $j)
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let wd = nodes[*w].value.data();
                let mut gx = wants(*x).then(|| vec![F::zero(); nodes[*x].value.len()]);
                let mut gw = wants(*w).then(|| vec![F::zero(); wd.len()]);
                let mut gb = b.filter(|&b| wants(b)).map(|_| vec![F::zero(); geom.out_channels]);
                ops::conv_backward(&nodes[*x].value, wd, geom, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut())?;
                for (j, part) in [(Some(*x), gx), (Some(*w), gw), (*b, gb)] {
                    if let (Some(j), Some(part)) = (j, part) {
                        add_into(acc!(j), &part);
                    }
                }
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    if wants(j) {
                        add_into(acc!(j), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(acc!(*a), g);
                }
                if wants(*b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (&gv, &y))| *d += gv * y);
                }
                if wants(*b) {
                    acc!(*b).iter_mut().zip(g.iter().zip(av)).for_each(|(d, (&gv, &x))| *d += gv * x);
                }
            }
            Op::MulChannel { x, a } => {
                let xv = &nodes[*x].value;
                let [_, _, _, h, w] = xv.dims5()?;
                let plane = h * w;
                let gate = nodes[*a].value.data();
                if wants(*x) {
                    let gx = acc!(*x);
                    for ((d, gp), &s) in gx.chunks_exact_mut(plane).zip(g.chunks_exact(plane)).zip(gate) {
                        d.iter_mut().zip(gp).for_each(|(d, &gv)| *d += gv * s);
                    }
                }
                if wants(*a) {
                    let ga = acc!(*a);
                    for ((d, gp), xp) in ga.iter_mut().zip(g.chunks_exact(plane)).zip(xv.data().chunks_exact(plane)) {
                        *d += gp.iter().zip(xp).map(|(&gv, &xv)| gv * xv).sum::<F>();
                    }
                }
            }
            Op::Affine { x, scale } => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *scale);
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    acc!(*x)
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(d, (&gv, &s))| *d += gv * s * (F::one() - s));
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = nodes[*x].value.data();
                    acc!(*x).iter_mut().zip(g.iter().zip(xv)).for_each(|(d, (&gv, &v))| {
                        if v > F::zero() {
                            *d += gv
                        }
                    });
                }
            }
            Op::SpatialMean(x) => {
                if wants(*x) {
                    let [_, _, _, h, w] = nodes[*x].value.dims5()?;
                    let plane = h * w;
                    let inv = F::one() / F::from_usize(plane).unwrap();
                    for (d, &gv) in acc!(*x).chunks_exact_mut(plane).zip(g) {
                        d.iter_mut().for_each(|d| *d += gv * inv);
                    }
                }
            }
            Op::TimeMean(x) => {
                if wants(*x) {
                    let [n, t, c, h, w] = nodes[*x].value.dims5()?;
                    let frame = c * h * w;
                    let inv = F::one() / F::from_usize(t).unwrap();
                    let gx = acc!(*x);
                    for b in 0..n {
                        for ti in 0..t {
                            let dst = &mut gx[(b * t + ti) * frame..(b * t + ti + 1) * frame];
                            dst.iter_mut()
                                .zip(&g[b * frame..(b + 1) * frame])
                                .for_each(|(d, &gv)| *d += gv * inv);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let xv = &nodes[*x].value;
                let [n, t, c, h, w] = xv.dims5()?;
                let plane = h * w;
                let count = F::from_usize(n * t * plane).unwrap();
                let gam = nodes[*gamma].value.data();
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for (k, (gp, xp)) in g.chunks_exact(plane).zip(xv.data().chunks_exact(plane)).enumerate() {
                    let ch = k % c;
                    for (&gv, &v) in gp.iter().zip(xp) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * (v - mean[ch]) * inv_std[ch];
                    }
                }
                if wants(*gamma) {
                    add_into(acc!(*gamma), &sum_gx);
                }
                if wants(*beta) {
                    add_into(acc!(*beta), &sum_g);
                }
                if wants(*x) {
                    let gx = acc!(*x);
                    for (k, ((d, gp), xp)) in gx
                        .chunks_exact_mut(plane)
                        .zip(g.chunks_exact(plane))
                        .zip(xv.data().chunks_exact(plane))
                        .enumerate()
                    {
                        let ch = k % c;
                        let s = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                            for ((d, &gv), &v) in d.iter_mut().zip(gp).zip(xp) {
                                let xhat = (v - mean[ch]) * inv_std[ch];
                                *d += s * (gv - mg - xhat * mgx);
                            }
                        } else {
                            d.iter_mut().zip(gp).for_each(|(d, &gv)| *d += s * gv);
                        }
                    }
                }
            }
            Op::SliceChannels { x, start } => {
                if wants(*x) {
                    let [n, t, c, h, w] = nodes[*x].value.dims5()?;
                    let len = nodes[i].value.dims5()?[2];
                    let plane = h * w;
                    let gx = acc!(*x);
                    for frame in 0..n * t {
                        let dst = (frame * c + start) * plane;
                        let src = frame * len * plane;
                        add_into(&mut gx[dst..dst + len * plane], &g[src..src + len * plane]);
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let [n, t, total, h, w] = nodes[i].value.dims5()?;
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p].value.dims5()?[2];
                    if wants(p) {
                        let gp = acc!(p);
                        for frame in 0..n * t {
                            let src = (frame * total + offset) * plane;
                            let dst = frame * pc * plane;
                            add_into(&mut gp[dst..dst + pc * plane], &g[src..src + pc * plane]);
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceTime { x, start } => {
                if wants(*x) {
                    let [n, t, c, h, w] = nodes[*x].value.dims5()?;
                    let len = nodes[i].value.dims5()?[1];
                    let frame = c * h * w;
                    let gx = acc!(*x);
                    for b in 0..n {
                        let dst = (b * t + start) * frame;
                        let src = b * len * frame;
                        add_into(&mut gx[dst..dst + len * frame], &g[src..src + len * frame]);
                    }
                }
            }
            Op::PadTime { x, before } => {
                if wants(*x) {
                    let [n, t, c, h, w] = nodes[*x].value.dims5()?;
                    let nt = nodes[i].value.dims5()?[1];
                    let frame = c * h * w;
                    let gx = acc!(*x);
                    for b in 0..n {
                        let src = (b * nt + before) * frame;
                        add_into(&mut gx[b * t * frame..(b + 1) * t * frame], &g[src..src + t * frame]);
                    }
                }
            }
            Op::Shift { x, left, right } => {
                if wants(*x) {
                    let go = Tensor::new(nodes[i].value.shape(), g.to_vec())?;
                    let gx = ops::shift_backward(&go, *left, *right)?;
                    add_into(acc!(*x), gx.data());
                }
            }
            Op::Subsample { x, stride } => {
                if wants(*x) {
                    let [n, t, c, h, w] = nodes[*x].value.dims5()?;
                    let [_, _, _, oh, ow] = nodes[i].value.dims5()?;
                    let gx = acc!(*x);
                    for plane in 0..n * t * c {
                        for a in 0..oh {
                            for b in 0..ow {
                                gx[plane * h * w + a * stride * w + b * stride] += g[(plane * oh + a) * ow + b];
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let gx = acc!(*x);
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gx[src] += gv;
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    add_into(acc!(*x), g);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let gv = g[0];
                    acc!(*x).iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Mask { x, mask } => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g.iter().zip(mask)).for_each(|(d, (&gv, &m))| *d += gv * m);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if wants(*logits) {
                    let k = nodes[*logits].value.shape()[1];
                    let scale = g[0] / F::from_usize(labels.len()).unwrap();
                    let gl = acc!(*logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { F::one() } else { F::zero() };
                            gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a, F: Real>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], j: usize) -> &'a mut Vec<F> {
    let len = nodes[j].value.len();
    grads[j].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    tape: u64,
    grads: Vec<Option<Tensor<F>>>,
    params: HashMap<ParamId, usize>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn param(&self, p: &Param<F>) -> Option<&Tensor<F>> {
        self.params.get(&p.id()).and_then(|&i| self.grads[i].as_ref())
    }
}
