//! Multiple temporal aggregation: a four-fragment hierarchical cascade of
//! (temporal, spatial) sub-convolutions.
//!
//! ```text
//! Xo1 = X1
//! Xo2 = spa * (temp * X2)
//! Xoi = spa * (temp * (Xi + Xo(i-1)))     i = 3, 4
//! ```
//!
//! The Res2Net baseline runs one full-width temporal conv first and keeps
//! the cascade purely spatial.
//!
//! With spatial stride `s`, fragment 1 is subsampled, fragment 2's spatial
//! conv carries the stride, and fragments 3 and 4 subsample their own slice
//! before adding the (already strided) previous output.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::kernel::{ConvGeometry, ConvKernel};
use crate::nn::{BatchNorm, Mode};
use crate::param::{Module, Param};
use crate::shift::{TemporalConv, TemporalFlavor};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const FRAGMENTS: usize = 4;
/// Largest response counted as "no signal" by the impulse probes.
pub const PROBE_THRESHOLD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Temporal conv inside every fragment.
    Hierarchical,
    /// One shared temporal conv, then spatial-only fragments.
    ParallelRes2Net,
}

/// Options shared by forward passes of blocks and networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOpts {
    pub mode: Mode,
    /// Replace shift-initialised temporal convs by the shift operator.
    pub substitute_shift: bool,
}

impl RunOpts {
    pub fn train() -> Self {
        RunOpts {
            mode: Mode::Train,
            substitute_shift: false,
        }
    }

    pub fn eval() -> Self {
        RunOpts {
            mode: Mode::Eval,
            substitute_shift: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mta<F> {
    channels: usize,
    stride: usize,
    aggregation: Aggregation,
    /// Three per-fragment convs, or one full-width conv for the Res2Net form.
    pub temporal: Vec<TemporalConv<F>>,
    pub spatial: Vec<ConvKernel<F>>,
    /// BN + ReLU after each spatial sub-conv when present.
    pub norms: Option<Vec<BatchNorm<F>>>,
}

fn fragment_width(channels: usize) -> Result<usize> {
    if channels == 0 || channels % FRAGMENTS != 0 {
        return Err(Error::Config(format!("MTA needs a channel count divisible by 4, got {channels}")));
    }
    Ok(channels / FRAGMENTS)
}

impl<F: Real> Mta<F> {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        stride: usize,
        aggregation: Aggregation,
        flavor: TemporalFlavor,
        activations: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = fragment_width(channels)?;
        let temporal = match aggregation {
            Aggregation::Hierarchical => (0..3)
                .map(|_| TemporalConv::new(w, flavor, rng))
                .collect::<Result<Vec<_>>>()?,
            Aggregation::ParallelRes2Net => vec![TemporalConv::new(channels, flavor, rng)?],
        };
        let spatial = (0..3)
            .map(|i| ConvKernel::he(ConvGeometry::spatial(w, w, 3, if i == 0 { stride } else { 1 }), false, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(channels, stride, aggregation, temporal, spatial, activations)
    }

    /// Bare cascade with Gaussian weights of standard deviation `std`.
    pub fn random<R: Rng + ?Sized>(channels: usize, aggregation: Aggregation, std: f64, rng: &mut R) -> Result<Self> {
        let w = fragment_width(channels)?;
        let temporal = match aggregation {
            Aggregation::Hierarchical => (0..3)
                .map(|_| TemporalConv::random(w, std, rng))
                .collect::<Result<Vec<_>>>()?,
            Aggregation::ParallelRes2Net => vec![TemporalConv::random(channels, std, rng)?],
        };
        let spatial = (0..3)
            .map(|_| ConvKernel::randn(ConvGeometry::spatial(w, w, 3, 1), false, std, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(channels, 1, aggregation, temporal, spatial, false)
    }

    /// Builds from explicit kernels; validates widths and strides.
    pub fn assemble(
        channels: usize,
        stride: usize,
        aggregation: Aggregation,
        mut temporal: Vec<TemporalConv<F>>,
        mut spatial: Vec<ConvKernel<F>>,
        activations: bool,
    ) -> Result<Self> {
        let w = fragment_width(channels)?;
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let want_t = match aggregation {
            Aggregation::Hierarchical => (3, w),
            Aggregation::ParallelRes2Net => (1, channels),
        };
        if temporal.len() != want_t.0 || temporal.iter().any(|t| t.channels() != want_t.1) {
            return Err(Error::Config("temporal sub-convs do not match the fragment layout".into()));
        }
        if spatial.len() != 3 {
            return Err(Error::Config("MTA needs three spatial sub-convs".into()));
        }
        for (i, k) in spatial.iter().enumerate() {
            let g = k.geom;
            let s = if i == 0 { stride } else { 1 };
            if g.in_channels != w || g.out_channels != w || g.kernel_t != 1 || g.stride_h != s || g.stride_w != s {
                return Err(Error::Config(format!("spatial sub-conv {} has the wrong geometry", i + 2)));
            }
        }
        for (i, t) in temporal.iter_mut().enumerate() {
            t.scope(&format!("temporal{}", i + 2));
        }
        if aggregation == Aggregation::ParallelRes2Net {
            temporal[0].params_mut().into_iter().for_each(|p| p.name = p.name.replace("temporal2", "temporal"));
        }
        for (i, k) in spatial.iter_mut().enumerate() {
            k.scope(&format!("spatial{}", i + 2));
        }
        let norms = activations.then(|| {
            (0..3)
                .map(|i| {
                    let mut bn = BatchNorm::new(w);
                    bn.scope(&format!("bn{}", i + 2));
                    bn
                })
                .collect()
        });
        Ok(Mta {
            channels,
            stride,
            aggregation,
            temporal,
            spatial,
            norms,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var, opts: RunOpts) -> Result<Var> {
        let c = tape.value(x).dims5()?[2];
        if c != self.channels {
            return Err(Error::shape("mta", format!("input has {c} channels, module expects {}", self.channels)));
        }
        let w = self.channels / FRAGMENTS;
        let x = match self.aggregation {
            Aggregation::ParallelRes2Net => self.temporal[0].forward(tape, x, opts.substitute_shift)?,
            Aggregation::Hierarchical => x,
        };
        let first = tape.slice_channels(x, 0, w)?;
        let mut outs = vec![tape.subsample(first, self.stride)?];
        let mut prev: Option<Var> = None;
        for i in 0..3 {
            let xi = tape.slice_channels(x, (i + 1) * w, w)?;
            let mut h = match prev {
                None => xi,
                Some(p) => {
                    let xi = tape.subsample(xi, self.stride)?;
                    tape.add(xi, p)?
                }
            };
            if self.aggregation == Aggregation::Hierarchical {
                h = self.temporal[i].forward(tape, h, opts.substitute_shift)?;
            }
            let mut y = tape.conv2d(h, &self.spatial[i])?;
            if let Some(norms) = &self.norms {
                y = norms[i].forward(tape, y, opts.mode)?;
                y = tape.relu(y)?;
            }
            outs.push(y);
            prev = Some(y);
        }
        tape.concat_channels(&outs)
    }

    pub fn cast<G: Real>(&self) -> Mta<G> {
        Mta {
            channels: self.channels,
            stride: self.stride,
            aggregation: self.aggregation,
            temporal: self.temporal.iter().map(TemporalConv::cast).collect(),
            spatial: self.spatial.iter().map(ConvKernel::cast).collect(),
            norms: self.norms.as_ref().map(|n| n.iter().map(BatchNorm::cast).collect()),
        }
    }
}

impl<F: Real> Module<F> for Mta<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v: Vec<&Param<F>> = self.temporal.iter().flat_map(|t| t.params()).collect();
        v.extend(self.spatial.iter().flat_map(|k| k.params()));
        if let Some(n) = &self.norms {
            v.extend(n.iter().flat_map(|b| b.params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v: Vec<&mut Param<F>> = self.temporal.iter_mut().flat_map(|t| t.params_mut()).collect();
        v.extend(self.spatial.iter_mut().flat_map(|k| k.params_mut()));
        if let Some(n) = &mut self.norms {
            v.extend(n.iter_mut().flat_map(|b| b.params_mut()));
        }
        v
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<F>> {
        match &mut self.norms {
            Some(n) => n.iter_mut().collect(),
            None => Vec::new(),
        }
    }
}

/// Per-fragment temporal radius: perturbs one channel of every fragment at
/// the centre frame and reports, per output fragment, the largest frame
/// offset whose response moved by more than [`PROBE_THRESHOLD`].
pub fn probe_temporal_rf<F: Real>(m: &Mta<F>, t: usize) -> Result<[usize; FRAGMENTS]> {
    if t < 7 {
        return Err(Error::Config(format!("probe needs at least 7 frames for radius 3, got {t}")));
    }
    let (h, w) = (5, 5);
    let t0 = t / 2;
    let responses = probe(m, t, h, w, |x, width| {
        for f in 0..FRAGMENTS {
            for p in 0..h * w {
                let idx = (t0 * m.channels + f * width) * h * w + p;
                x[idx] += F::one();
            }
        }
    })?;
    let mut radii = [0; FRAGMENTS];
    for (f, r) in radii.iter_mut().enumerate() {
        for ti in 0..t {
            if responses.fragment_frame(f, ti) {
                *r = (*r).max(ti.abs_diff(t0));
            }
        }
    }
    Ok(radii)
}

/// Per-fragment spatial radius (Chebyshev, in pixels) from a single-pixel
/// perturbation at the centre of a one-frame input.
pub fn probe_spatial_rf<F: Real>(m: &Mta<F>, size: usize) -> Result<[usize; FRAGMENTS]> {
    if m.stride != 1 {
        return Err(Error::Config("spatial probe needs a stride-1 module".into()));
    }
    if size < 7 {
        return Err(Error::Config(format!("probe needs at least 7 pixels for radius 3, got {size}")));
    }
    let c0 = size / 2;
    let responses = probe(m, 1, size, size, |x, width| {
        for f in 0..FRAGMENTS {
            x[(f * width) * size * size + c0 * size + c0] += F::one();
        }
    })?;
    let mut radii = [0; FRAGMENTS];
    for (f, r) in radii.iter_mut().enumerate() {
        for (i, j) in responses.fragment_pixels(f, 0) {
            *r = (*r).max(i.abs_diff(c0).max(j.abs_diff(c0)));
        }
    }
    Ok(radii)
}

struct ProbeResponse {
    diff: Vec<f64>,
    t: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl ProbeResponse {
    fn fragment_frame(&self, f: usize, ti: usize) -> bool {
        !self.fragment_pixels(f, ti).is_empty()
    }

    fn fragment_pixels(&self, f: usize, ti: usize) -> Vec<(usize, usize)> {
        let width = self.c / FRAGMENTS;
        let plane = self.h * self.w;
        let mut hits = Vec::new();
        for ch in f * width..(f + 1) * width {
            let base = (ti * self.c + ch) * plane;
            for p in 0..plane {
                if self.diff[base + p].abs() > PROBE_THRESHOLD {
                    hits.push((p / self.w, p % self.w));
                }
            }
        }
        debug_assert!(ti < self.t);
        hits
    }
}

fn probe<F: Real>(m: &Mta<F>, t: usize, h: usize, w: usize, perturb: impl Fn(&mut [F], usize)) -> Result<ProbeResponse> {
    let c = m.channels;
    let mut rng = StdRng::seed_from_u64(0x7ea);
    let base = Tensor::<F>::randn(&[1, t, c, h, w], 1.0, &mut rng);
    let mut bumped = base.clone();
    perturb(bumped.data_mut(), c / FRAGMENTS);
    let run = |x: Tensor<F>| -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let y = m.forward(&mut tape, xv, RunOpts::eval())?;
        Ok(tape.value(y).clone())
    };
    let (y0, y1) = (run(base)?, run(bumped)?);
    let diff = y1
        .data()
        .iter()
        .zip(y0.data())
        .map(|(a, b)| a.to_f64_lossy() - b.to_f64_lossy())
        .collect();
    Ok(ProbeResponse { diff, t, c, h, w })
}

/// Closed-form parameter count of an MTA module with BN after each
/// spatial sub-conv.
pub fn mta_param_count(channels: usize, with_norms: bool) -> usize {
    let w = channels / FRAGMENTS;
    3 * 9 * w * w + 3 * 3 * w + if with_norms { 3 * 2 * w } else { 0 }
}
