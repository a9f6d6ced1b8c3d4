//! Network specs, the weightless layer graph used for analysis, and the
//! materialised network with video-level prediction.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{Block, BlockSpec, BlockVariant, TemporalExtent};
use crate::error::{Error, Result};
use crate::kernel::{ConvGeometry, ConvKernel};
use crate::mta::{Aggregation, RunOpts, FRAGMENTS};
use crate::nn::BatchNorm;
use crate::param::{Module, Param};
use crate::shift::TemporalFlavor;
use crate::tape::{Tape, Var};
use crate::tensor::{real, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 3x3 stride-2 max pool after the stem conv.
    pub max_pool: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub bottleneck: usize,
    pub out_channels: usize,
    /// Applied by the first block of the stage.
    pub stride: usize,
}

fn default_fallback() -> BlockVariant {
    BlockVariant::Plain2d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input: InputSpec,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub classes: usize,
    pub variant: BlockVariant,
    pub flavor: TemporalFlavor,
    pub reduction: usize,
    #[serde(default)]
    pub me_batch_norm: bool,
    #[serde(default)]
    pub dropout: f64,
    /// Stages built with `variant` (true) or `fallback` (false).
    #[serde(default)]
    pub stage_mask: Option<Vec<bool>>,
    #[serde(default = "default_fallback")]
    pub fallback: BlockVariant,
}

const RESNET50_LAYOUT: [usize; 4] = [3, 4, 6, 3];

fn resnet50_stages(bottleneck: [usize; 4]) -> Vec<StageSpec> {
    RESNET50_LAYOUT
        .iter()
        .zip(bottleneck)
        .enumerate()
        .map(|(i, (&blocks, b))| StageSpec {
            blocks,
            bottleneck: b,
            out_channels: 256 << i,
            stride: if i == 0 { 1 } else { 2 },
        })
        .collect()
}

impl NetworkSpec {
    /// Standard ResNet-50 with plain 2-d bottlenecks.
    pub fn resnet50_2d() -> Self {
        NetworkSpec {
            name: "resnet50-2d".into(),
            input: InputSpec {
                frames: 8,
                height: 224,
                width: 224,
                channels: 3,
            },
            stem: StemSpec {
                channels: 64,
                kernel: 7,
                stride: 2,
                max_pool: true,
            },
            stages: resnet50_stages([64, 128, 256, 512]),
            classes: 1000,
            variant: BlockVariant::Plain2d,
            flavor: TemporalFlavor::ShiftInit,
            reduction: 16,
            me_batch_norm: false,
            dropout: 0.5,
            stage_mask: None,
            fallback: default_fallback(),
        }
    }

    /// ResNet-50 with TEA blocks on the Res2Net 26w x 4s bottleneck widths.
    pub fn resnet50_tea() -> Self {
        NetworkSpec {
            name: "resnet50-tea".into(),
            stages: resnet50_stages([104, 208, 416, 832]),
            variant: BlockVariant::Tea,
            reduction: 8,
            ..Self::resnet50_2d()
        }
    }

    /// Two-stage network for 16x16 synthetic clips.
    pub fn toy(variant: BlockVariant) -> Self {
        NetworkSpec {
            name: "toy".into(),
            input: InputSpec {
                frames: 8,
                height: 16,
                width: 16,
                channels: 3,
            },
            stem: StemSpec {
                channels: 16,
                kernel: 3,
                stride: 2,
                max_pool: false,
            },
            stages: vec![
                StageSpec {
                    blocks: 1,
                    bottleneck: 8,
                    out_channels: 16,
                    stride: 1,
                },
                StageSpec {
                    blocks: 1,
                    bottleneck: 16,
                    out_channels: 32,
                    stride: 2,
                },
            ],
            classes: 4,
            variant,
            flavor: TemporalFlavor::ShiftInit,
            reduction: 8,
            me_batch_norm: false,
            dropout: 0.5,
            stage_mask: None,
            fallback: default_fallback(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "resnet50-2d" => Ok(Self::resnet50_2d()),
            "resnet50-tea" => Ok(Self::resnet50_tea()),
            "toy" => Ok(Self::toy(BlockVariant::Tea)),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected resnet50-2d, resnet50-tea or toy)"
            ))),
        }
    }

    pub fn with_input(mut self, frames: usize, height: usize, width: usize) -> Self {
        self.input.frames = frames;
        self.input.height = height;
        self.input.width = width;
        self
    }

    pub fn stage_variant(&self, stage: usize) -> BlockVariant {
        match &self.stage_mask {
            Some(mask) if !mask.get(stage).copied().unwrap_or(true) => self.fallback,
            _ => self.variant,
        }
    }

    /// Block specs in network order, with their names.
    pub fn block_specs(&self) -> Vec<(String, BlockSpec)> {
        let mut out = Vec::new();
        let mut cin = self.stem.channels;
        for (si, st) in self.stages.iter().enumerate() {
            for bi in 0..st.blocks {
                let spec = BlockSpec {
                    variant: self.stage_variant(si),
                    flavor: self.flavor,
                    in_channels: cin,
                    bottleneck: st.bottleneck,
                    out_channels: st.out_channels,
                    stride: if bi == 0 { st.stride } else { 1 },
                    reduction: self.reduction,
                    me_batch_norm: self.me_batch_norm,
                };
                out.push((format!("layer{}.{}", si + 1, bi), spec));
                cin = st.out_channels;
            }
        }
        out
    }

    fn stem_geometry(&self) -> ConvGeometry {
        ConvGeometry::spatial(self.input.channels, self.stem.channels, self.stem.kernel, self.stem.stride)
    }

    pub fn validate(&self) -> Result<()> {
        let inp = &self.input;
        if inp.frames == 0 || inp.height == 0 || inp.width == 0 || inp.channels == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.blocks == 0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.stem.kernel % 2 == 0 || self.stem.channels == 0 || self.stem.stride == 0 {
            return Err(Error::Config("stem needs an odd kernel and positive width/stride".into()));
        }
        if let Some(mask) = &self.stage_mask {
            if mask.len() != self.stages.len() {
                return Err(Error::Config(format!(
                    "stage mask has {} entries for {} stages",
                    mask.len(),
                    self.stages.len()
                )));
            }
        }
        for (name, b) in self.block_specs() {
            b.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        build_graph(self).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    TemporalConv,
    BatchNorm,
    Relu,
    MaxPool,
    SpatialPool,
    /// Frame differencing inside ME.
    TemporalDiff,
    Sigmoid,
    Scale,
    Add,
    Mul,
    Subsample,
    Concat,
    Linear,
    /// Average of per-frame predictions.
    Consensus,
}

impl LayerKind {
    /// Operators that mix information across frames inside the trunk.
    pub fn is_temporal(self) -> bool {
        matches!(self, LayerKind::TemporalConv | LayerKind::TemporalDiff)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    /// `[T, C, H, W]` of one clip.
    pub out_shape: [usize; 4],
    pub macs: u64,
    pub params: u64,
    pub aux_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockNode {
    pub name: String,
    pub variant: BlockVariant,
    pub extent: TemporalExtent,
    /// Per-fragment temporal radius when the block has an MTA middle.
    pub fragment_radii: Option<[usize; FRAGMENTS]>,
}

/// Weightless layer graph of a network for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub input: InputSpec,
    pub layers: Vec<LayerNode>,
    pub blocks: Vec<BlockNode>,
}

impl Graph {
    pub fn temporal_ops(&self) -> usize {
        self.layers.iter().filter(|l| l.kind.is_temporal()).count()
    }
}

struct GraphBuilder {
    layers: Vec<LayerNode>,
}

type Shape4 = [usize; 4];

fn numel(s: Shape4) -> u64 {
    s.iter().map(|&v| v as u64).product()
}

impl GraphBuilder {
    fn push(&mut self, name: String, kind: LayerKind, out: Shape4, macs: u64, params: u64, aux: u64) -> Shape4 {
        self.layers.push(LayerNode {
            name,
            kind,
            out_shape: out,
            macs,
            params,
            aux_ops: aux,
        });
        out
    }

    fn conv(&mut self, name: String, kind: LayerKind, g: ConvGeometry, bias: bool, x: Shape4) -> Result<Shape4> {
        g.validate()?;
        if x[1] != g.in_channels {
            return Err(Error::Config(format!("{name}: {} channels into a {}-channel conv", x[1], g.in_channels)));
        }
        let [t, h, w] = g.output_dims(x[0], x[2], x[3])?;
        let out = [t, g.out_channels, h, w];
        let macs = g.macs(t, h, w);
        Ok(self.push(name, kind, out, macs, g.num_params(bias), 0))
    }

    fn bn(&mut self, name: String, x: Shape4) -> Shape4 {
        self.push(name, LayerKind::BatchNorm, x, 0, 2 * x[1] as u64, 2 * numel(x))
    }

    fn elementwise(&mut self, name: String, kind: LayerKind, x: Shape4) -> Shape4 {
        self.push(name, kind, x, 0, 0, numel(x))
    }

    fn pool(&mut self, name: String, x: Shape4) -> Shape4 {
        self.push(name, LayerKind::SpatialPool, [x[0], x[1], 1, 1], 0, 0, numel(x))
    }

    fn subsample(&mut self, name: String, x: Shape4, stride: usize) -> Shape4 {
        if stride == 1 {
            return x;
        }
        let out = [x[0], x[1], x[2].div_ceil(stride), x[3].div_ceil(stride)];
        self.push(name, LayerKind::Subsample, out, 0, 0, 0)
    }

    fn me(&mut self, p: &str, c: usize, r: usize, bn: bool, x: Shape4) -> Result<Shape4> {
        let mid = c / r;
        let mut xr = self.conv(format!("{p}.conv_red"), LayerKind::Conv, ConvGeometry::pointwise(c, mid), true, x)?;
        if bn {
            xr = self.bn(format!("{p}.bn_red"), xr);
        }
        if x[0] > 1 {
            let moved = [x[0] - 1, mid, x[2], x[3]];
            let g = ConvGeometry::depthwise(mid, 3);
            self.conv(format!("{p}.conv_trans"), LayerKind::Conv, g, false, moved)?;
            self.elementwise(format!("{p}.diff"), LayerKind::TemporalDiff, moved);
        }
        let ms = self.pool(format!("{p}.pool"), xr);
        let mut e = self.conv(format!("{p}.conv_exp"), LayerKind::Conv, ConvGeometry::pointwise(mid, c), true, ms)?;
        if bn {
            e = self.bn(format!("{p}.bn_exp"), e);
        }
        self.elementwise(format!("{p}.sigmoid"), LayerKind::Sigmoid, e);
        self.elementwise(format!("{p}.scale"), LayerKind::Scale, e);
        Ok(x)
    }

    fn temporal(&mut self, name: String, c: usize, flavor: TemporalFlavor, x: Shape4) -> Result<Shape4> {
        let g = match flavor {
            TemporalFlavor::Conv => ConvGeometry::temporal_dense(c, 3),
            _ => ConvGeometry::temporal_cw(c, 3),
        };
        self.conv(name, LayerKind::TemporalConv, g, false, x)
    }

    fn mta(&mut self, p: &str, b: &BlockSpec, agg: Aggregation, x: Shape4) -> Result<Shape4> {
        let w = b.bottleneck / FRAGMENTS;
        if agg == Aggregation::ParallelRes2Net {
            self.temporal(format!("{p}.temporal"), b.bottleneck, b.flavor, x)?;
        }
        let frag = [x[0], w, x[2], x[3]];
        let mut out = self.subsample(format!("{p}.sub1"), frag, b.stride);
        let mut prev: Option<Shape4> = None;
        for i in 2..=FRAGMENTS {
            let mut h = frag;
            if let Some(pv) = prev {
                h = self.subsample(format!("{p}.sub{i}"), frag, b.stride);
                self.elementwise(format!("{p}.add{i}"), LayerKind::Add, pv);
                h = [h[0], h[1], pv[2], pv[3]];
            }
            if agg == Aggregation::Hierarchical {
                h = self.temporal(format!("{p}.temporal{i}"), w, b.flavor, h)?;
            }
            let s = if i == 2 { b.stride } else { 1 };
            let y = self.conv(format!("{p}.spatial{i}"), LayerKind::Conv, ConvGeometry::spatial(w, w, 3, s), false, h)?;
            self.bn(format!("{p}.bn{i}"), y);
            self.elementwise(format!("{p}.relu{i}"), LayerKind::Relu, y);
            prev = Some(y);
            out = y;
        }
        let cat = [out[0], b.bottleneck, out[2], out[3]];
        Ok(self.push(format!("{p}.concat"), LayerKind::Concat, cat, 0, 0, 0))
    }

    fn block(&mut self, p: &str, b: &BlockSpec, x: Shape4) -> Result<Shape4> {
        let v = b.variant;
        let h = self.conv(format!("{p}.conv1"), LayerKind::Conv, ConvGeometry::pointwise(b.in_channels, b.bottleneck), false, x)?;
        self.bn(format!("{p}.bn1"), h);
        let mut h = self.elementwise(format!("{p}.relu1"), LayerKind::Relu, h);
        if v.has_me() {
            h = self.me(&format!("{p}.me"), b.bottleneck, b.reduction, b.me_batch_norm, h)?;
            let kind = if v == BlockVariant::MeNoResidual { "excite" } else { "excite_residual" };
            self.elementwise(format!("{p}.me.{kind}"), LayerKind::Mul, h);
            if v != BlockVariant::MeNoResidual {
                self.elementwise(format!("{p}.me.add"), LayerKind::Add, h);
            }
        } else if v.has_se() {
            let mid = b.bottleneck / b.reduction;
            let s = self.pool(format!("{p}.se.pool"), h);
            let s = self.conv(format!("{p}.se.fc1"), LayerKind::Conv, ConvGeometry::pointwise(b.bottleneck, mid), true, s)?;
            self.elementwise(format!("{p}.se.relu"), LayerKind::Relu, s);
            let s = self.conv(format!("{p}.se.fc2"), LayerKind::Conv, ConvGeometry::pointwise(mid, b.bottleneck), true, s)?;
            self.elementwise(format!("{p}.se.sigmoid"), LayerKind::Sigmoid, s);
            self.elementwise(format!("{p}.se.excite"), LayerKind::Mul, h);
        }
        h = if v.has_mta() {
            let agg = if v == BlockVariant::P21dRes2net {
                Aggregation::ParallelRes2Net
            } else {
                Aggregation::Hierarchical
            };
            self.mta(&format!("{p}.mta"), b, agg, h)?
        } else {
            if v.is_p21d() {
                h = self.temporal(format!("{p}.temporal"), b.bottleneck, b.flavor, h)?;
            }
            let g = ConvGeometry::spatial(b.bottleneck, b.bottleneck, 3, b.stride);
            let y = self.conv(format!("{p}.conv2"), LayerKind::Conv, g, false, h)?;
            self.bn(format!("{p}.bn2"), y);
            self.elementwise(format!("{p}.relu2"), LayerKind::Relu, y)
        };
        let y = self.conv(format!("{p}.conv3"), LayerKind::Conv, ConvGeometry::pointwise(b.bottleneck, b.out_channels), false, h)?;
        self.bn(format!("{p}.bn3"), y);
        if b.has_projection() {
            let g = ConvGeometry::spatial(b.in_channels, b.out_channels, 1, b.stride);
            let s = self.conv(format!("{p}.shortcut.conv"), LayerKind::Conv, g, false, x)?;
            self.bn(format!("{p}.shortcut.bn"), s);
        }
        self.elementwise(format!("{p}.add"), LayerKind::Add, y);
        Ok(self.elementwise(format!("{p}.relu"), LayerKind::Relu, y))
    }
}

/// Symbolic layer graph of `spec` for a single clip; allocates no weights.
pub fn build_graph(spec: &NetworkSpec) -> Result<Graph> {
    let inp = spec.input;
    let mut gb = GraphBuilder { layers: Vec::new() };
    let x = [inp.frames, inp.channels, inp.height, inp.width];
    let mut h = gb.conv("stem.conv".into(), LayerKind::Conv, spec.stem_geometry(), false, x)?;
    gb.bn("stem.bn".into(), h);
    gb.elementwise("stem.relu".into(), LayerKind::Relu, h);
    if spec.stem.max_pool {
        if h[2] + 2 < 3 || h[3] + 2 < 3 {
            return Err(Error::Config("input too small for the stem max pool".into()));
        }
        let out = [h[0], h[1], (h[2] - 1) / 2 + 1, (h[3] - 1) / 2 + 1];
        h = gb.push("stem.maxpool".into(), LayerKind::MaxPool, out, 0, 0, numel(out) * 9);
    }
    let mut blocks = Vec::new();
    for (name, b) in spec.block_specs() {
        b.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        h = gb.block(&name, &b, h)?;
        let fragment_radii = match b.variant {
            v if !v.has_mta() => None,
            BlockVariant::P21dRes2net => Some([1; FRAGMENTS]),
            _ => Some([0, 1, 2, 3]),
        };
        blocks.push(BlockNode {
            name,
            variant: b.variant,
            extent: b.variant.temporal_extent(),
            fragment_radii,
        });
    }
    let pooled = gb.pool("head.pool".into(), h);
    let k = spec.classes;
    let logits = [pooled[0], k, 1, 1];
    gb.push(
        "head.fc".into(),
        LayerKind::Linear,
        logits,
        (pooled[0] * pooled[1] * k) as u64,
        (pooled[1] * k + k) as u64,
        0,
    );
    gb.push("head.consensus".into(), LayerKind::Consensus, [1, k, 1, 1], 0, 0, numel(logits));
    Ok(Graph {
        input: inp,
        layers: gb.layers,
        blocks,
    })
}

/// Materialised network.
#[derive(Clone, Debug)]
pub struct Network<F> {
    spec: NetworkSpec,
    pub stem: ConvKernel<F>,
    pub stem_bn: BatchNorm<F>,
    pub blocks: Vec<Block<F>>,
    pub fc: ConvKernel<F>,
}

/// Either a materialised network or its weightless graph.
#[derive(Clone, Debug)]
pub enum Built<F> {
    Network(Network<F>),
    Graph(Graph),
}

pub fn build_network<F: Real>(spec: &NetworkSpec, materialize: bool, seed: u64) -> Result<Built<F>> {
    if materialize {
        Network::build(spec, seed).map(Built::Network)
    } else {
        spec.validate()?;
        build_graph(spec).map(Built::Graph)
    }
}

impl<F: Real> Network<F> {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stem = ConvKernel::he(spec.stem_geometry(), false, &mut rng)?;
        stem.scope("stem.conv");
        let mut stem_bn = BatchNorm::new(spec.stem.channels);
        stem_bn.scope("stem.bn");
        let mut blocks = Vec::new();
        for (name, b) in spec.block_specs() {
            let mut blk = Block::new(b, &mut rng)?;
            blk.scope(&name);
            blocks.push(blk);
        }
        let last = spec.stages.last().map(|s| s.out_channels).unwrap_or(spec.stem.channels);
        let mut fc = ConvKernel::randn(ConvGeometry::pointwise(last, spec.classes), true, 0.01, &mut rng)?;
        fc.bias.as_mut().unwrap().value.data_mut().fill(F::zero());
        fc.scope("head.fc");
        Ok(Network {
            spec: spec.clone(),
            stem,
            stem_bn,
            blocks,
            fc,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Per-frame logits `[N, T, K, 1, 1]`. `dropout` supplies the mask RNG
    /// in training; `None` disables dropout.
    pub fn frame_logits(&self, tape: &mut Tape<F>, x: Var, opts: RunOpts, dropout: Option<&mut dyn RngCore>) -> Result<Var> {
        let [_, _, c, h, w] = tape.value(x).dims5()?;
        let inp = self.spec.input;
        if c != inp.channels {
            return Err(Error::shape("network", format!("input has {c} channels, network expects {}", inp.channels)));
        }
        if (h, w) != (inp.height, inp.width) {
            return Err(Error::shape(
                "network",
                format!("input is {h}x{w}, network expects {}x{}", inp.height, inp.width),
            ));
        }
        let y = tape.conv2d(x, &self.stem)?;
        let y = self.stem_bn.forward(tape, y, opts.mode)?;
        let mut y = tape.relu(y)?;
        if self.spec.stem.max_pool {
            y = tape.max_pool(y, 3, 2, 1)?;
        }
        for blk in &self.blocks {
            y = blk.forward(tape, y, opts)?;
        }
        let mut pooled = tape.global_avg_pool_spatial(y)?;
        if let Some(rng) = dropout {
            let p = self.spec.dropout;
            if p > 0.0 {
                let keep = real::<F>(1.0 / (1.0 - p));
                let n = tape.value(pooled).len();
                let mask = (0..n).map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep }).collect();
                pooled = tape.mask(pooled, mask)?;
            }
        }
        tape.conv2d(pooled, &self.fc)
    }

    /// Video logits `[N, K]`: per-frame logits averaged over time.
    pub fn logits(&self, tape: &mut Tape<F>, x: Var, opts: RunOpts, dropout: Option<&mut dyn RngCore>) -> Result<Var> {
        let fl = self.frame_logits(tape, x, opts, dropout)?;
        let n = tape.value(fl).shape()[0];
        let m = tape.mean_time(fl)?;
        tape.reshape(m, &[n, self.spec.classes])
    }

    /// Class scores of one clip `[1, T, C, H, W]` in eval mode.
    pub fn predict_video(&self, clip: &Tensor<F>) -> Result<Vec<F>> {
        if clip.dims5()?[0] != 1 {
            return Err(Error::shape("predict_video", "expects a single clip"));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(clip.clone(), false);
        let y = self.logits(&mut tape, x, RunOpts::eval(), None)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Folds batch statistics recorded on `tape` into running estimates.
    pub fn absorb_batch_stats(&mut self, tape: &Tape<F>) {
        for bn in self.batch_norms_mut() {
            bn.absorb(tape);
        }
    }

    pub fn cast<G: Real>(&self) -> Network<G> {
        Network {
            spec: self.spec.clone(),
            stem: self.stem.cast(),
            stem_bn: self.stem_bn.cast(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            fc: self.fc.cast(),
        }
    }
}

impl<F: Real> Module<F> for Network<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.stem.params();
        v.extend(self.stem_bn.params());
        v.extend(self.blocks.iter().flat_map(|b| b.params()));
        v.extend(self.fc.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.stem.params_mut();
        v.extend(self.stem_bn.params_mut());
        v.extend(self.blocks.iter_mut().flat_map(|b| b.params_mut()));
        v.extend(self.fc.params_mut());
        v
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<F>> {
        let mut v = vec![&mut self.stem_bn];
        v.extend(self.blocks.iter_mut().flat_map(|b| b.batch_norms_mut()));
        v
    }
}

/// Measured dependency extent of per-frame logits on input frames: perturbs
/// the centre input frame of a random clip and reports how far before
/// (`future`) and after (`past`) it the eval-mode frame logits move.
pub fn probe_network_extent<F: Real>(net: &Network<F>, frames: usize, seed: u64) -> Result<TemporalExtent> {
    let inp = net.spec().input;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, frames, inp.channels, inp.height, inp.width];
    let base = Tensor::<F>::randn(&shape, 1.0, &mut rng);
    let t0 = frames / 2;
    let frame = inp.channels * inp.height * inp.width;
    let mut bumped = base.clone();
    for v in &mut bumped.data_mut()[t0 * frame..(t0 + 1) * frame] {
        *v += real::<F>(rng.gen_range(0.5..1.5));
    }
    let run = |x: Tensor<F>| -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let y = net.frame_logits(&mut tape, xv, RunOpts::eval(), None)?;
        Ok(tape.value(y).clone())
    };
    let (y0, y1) = (run(base)?, run(bumped)?);
    let k = net.spec().classes;
    let (mut past, mut future) = (0, 0);
    for t in 0..frames {
        let moved = (0..k).any(|j| {
            let i = t * k + j;
            (y1.data()[i].to_f64_lossy() - y0.data()[i].to_f64_lossy()).abs() > 1e-9
        });
        if moved {
            if t >= t0 {
                past = past.max(t - t0);
            } else {
                future = future.max(t0 - t);
            }
        }
    }
    let radius = past.min(future);
    Ok(TemporalExtent { radius, past, future })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet50_tea_has_sixteen_blocks() {
        let g = build_graph(&NetworkSpec::resnet50_tea()).unwrap();
        assert_eq!(g.blocks.len(), 16);
        assert!(g.blocks.iter().all(|b| b.variant == BlockVariant::Tea));
    }

    #[test]
    fn plain_graph_has_no_temporal_ops() {
        let g = build_graph(&NetworkSpec::toy(BlockVariant::Plain2d)).unwrap();
        assert_eq!(g.temporal_ops(), 0);
        let g = build_graph(&NetworkSpec::toy(BlockVariant::Tea)).unwrap();
        assert!(g.temporal_ops() > 0);
    }

    #[test]
    fn graph_params_match_materialised_network() {
        for v in BlockVariant::ALL {
            let mut spec = NetworkSpec::toy(v);
            spec.reduction = 4;
            let g = build_graph(&spec).unwrap();
            let net = Network::<f32>::build(&spec, 1).unwrap();
            let counted: u64 = g.layers.iter().map(|l| l.params).sum();
            assert_eq!(counted as usize, net.num_params(), "{v:?}");
        }
    }

    #[test]
    fn validation_catches_bad_specs() {
        let mut s = NetworkSpec::toy(BlockVariant::Tea);
        s.stages[0].bottleneck = 6;
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::toy(BlockVariant::Tea);
        s.stage_mask = Some(vec![true]);
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::toy(BlockVariant::Tea);
        s.input.height = 0;
        assert!(s.validate().is_err());
        assert!(NetworkSpec::preset("vgg").is_err());
    }

    #[test]
    fn stage_mask_uses_fallback() {
        let mut s = NetworkSpec::resnet50_tea();
        s.stage_mask = Some(vec![false, true, false, false]);
        s.fallback = BlockVariant::P21dResnet;
        let g = build_graph(&s).unwrap();
        let tea = g.blocks.iter().filter(|b| b.variant == BlockVariant::Tea).count();
        assert_eq!(tea, 4);
    }

    #[test]
    fn spec_json_round_trip() {
        let s = NetworkSpec::resnet50_tea();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<NetworkSpec>(&json).unwrap(), s);
    }
}
