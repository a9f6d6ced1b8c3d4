//! Bottleneck residual blocks: the TEA block and the ablation baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ConvGeometry, ConvKernel};
use crate::me::{MotionExcitation, SqueezeExcite};
use crate::mta::{Aggregation, Mta, RunOpts};
use crate::nn::BatchNorm;
use crate::param::{Module, Param};
use crate::shift::{TemporalConv, TemporalFlavor};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BlockVariant {
    /// ME after conv1, MTA in place of the 3x3.
    Tea,
    /// Temporal conv after conv1, then the 3x3.
    P21dResnet,
    /// Shared temporal conv, then a spatial-only Res2Net cascade.
    P21dRes2net,
    MtaOnly,
    /// (2+1)D ResNet with ME after conv1.
    MeOnly,
    /// (2+1)D ResNet with per-frame SE after conv1.
    P21dSenet,
    /// ME-only with `X . A` in place of `X + X . A`.
    MeNoResidual,
    Plain2d,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 8] = [
        BlockVariant::Tea,
        BlockVariant::P21dResnet,
        BlockVariant::P21dRes2net,
        BlockVariant::MtaOnly,
        BlockVariant::MeOnly,
        BlockVariant::P21dSenet,
        BlockVariant::MeNoResidual,
        BlockVariant::Plain2d,
    ];

    pub fn has_me(self) -> bool {
        matches!(self, BlockVariant::Tea | BlockVariant::MeOnly | BlockVariant::MeNoResidual)
    }

    pub fn has_se(self) -> bool {
        self == BlockVariant::P21dSenet
    }

    pub fn has_mta(self) -> bool {
        matches!(self, BlockVariant::Tea | BlockVariant::MtaOnly | BlockVariant::P21dRes2net)
    }

    /// Blocks whose middle is temporal conv + 3x3.
    pub fn is_p21d(self) -> bool {
        matches!(
            self,
            BlockVariant::P21dResnet | BlockVariant::MeOnly | BlockVariant::P21dSenet | BlockVariant::MeNoResidual
        )
    }

    pub fn has_temporal(self) -> bool {
        self != BlockVariant::Plain2d
    }

    /// Temporal receptive field of one block: aggregation radius from the
    /// temporal convolutions, plus how many frames back and ahead an output
    /// frame depends on (ME reads frame `t + 1`).
    pub fn temporal_extent(self) -> TemporalExtent {
        let radius = match self {
            BlockVariant::Tea | BlockVariant::MtaOnly => 3,
            BlockVariant::Plain2d => 0,
            _ => 1,
        };
        TemporalExtent {
            radius,
            past: radius,
            future: radius + usize::from(self.has_me()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalExtent {
    pub radius: usize,
    pub past: usize,
    pub future: usize,
}

/// Shape-level description of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub variant: BlockVariant,
    pub flavor: TemporalFlavor,
    pub in_channels: usize,
    pub bottleneck: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub reduction: usize,
    pub me_batch_norm: bool,
}

impl BlockSpec {
    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.bottleneck;
        if self.in_channels == 0 || b == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(Error::Config("block widths and stride must be positive".into()));
        }
        if self.variant.has_mta() && b % 4 != 0 {
            return Err(Error::Config(format!("{:?} needs a bottleneck divisible by 4, got {b}", self.variant)));
        }
        if (self.variant.has_me() || self.variant.has_se())
            && (self.reduction == 0 || b % self.reduction != 0 || b < self.reduction)
        {
            return Err(Error::Config(format!(
                "{:?} needs reduction {} to divide bottleneck {b}",
                self.variant, self.reduction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Excite<F> {
    None,
    Me { module: MotionExcitation<F>, residual: bool },
    Se(SqueezeExcite<F>),
}

#[derive(Clone, Debug)]
pub enum Middle<F> {
    Mta(Mta<F>),
    /// Optional temporal conv followed by a 3x3 conv, BN, ReLU.
    Conv {
        temporal: Option<TemporalConv<F>>,
        conv2: ConvKernel<F>,
        bn2: BatchNorm<F>,
    },
}

#[derive(Clone, Debug)]
pub struct Block<F> {
    spec: BlockSpec,
    pub conv1: ConvKernel<F>,
    pub bn1: BatchNorm<F>,
    pub excite: Excite<F>,
    pub middle: Middle<F>,
    pub conv3: ConvKernel<F>,
    pub bn3: BatchNorm<F>,
    pub shortcut: Option<(ConvKernel<F>, BatchNorm<F>)>,
}

fn named<M: Module<F>, F: Real>(mut m: M, name: &str) -> M {
    m.scope(name);
    m
}

impl<F: Real> Block<F> {
    pub fn new<R: Rng + ?Sized>(spec: BlockSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (cin, b, cout, s) = (spec.in_channels, spec.bottleneck, spec.out_channels, spec.stride);
        let conv1 = named(ConvKernel::he(ConvGeometry::pointwise(cin, b), false, rng)?, "conv1");
        let bn1 = named(BatchNorm::new(b), "bn1");
        let excite = match spec.variant {
            v if v.has_me() => Excite::Me {
                module: named(MotionExcitation::new(b, spec.reduction, spec.me_batch_norm, rng)?, "me"),
                residual: v != BlockVariant::MeNoResidual,
            },
            BlockVariant::P21dSenet => Excite::Se(named(SqueezeExcite::new(b, spec.reduction, rng)?, "se")),
            _ => Excite::None,
        };
        let middle = if spec.variant.has_mta() {
            let agg = if spec.variant == BlockVariant::P21dRes2net {
                Aggregation::ParallelRes2Net
            } else {
                Aggregation::Hierarchical
            };
            Middle::Mta(named(Mta::new(b, s, agg, spec.flavor, true, rng)?, "mta"))
        } else {
            let temporal = if spec.variant.is_p21d() {
                Some(named(TemporalConv::new(b, spec.flavor, rng)?, "temporal"))
            } else {
                None
            };
            Middle::Conv {
                temporal,
                conv2: named(ConvKernel::he(ConvGeometry::spatial(b, b, 3, s), false, rng)?, "conv2"),
                bn2: named(BatchNorm::new(b), "bn2"),
            }
        };
        let conv3 = named(ConvKernel::he(ConvGeometry::pointwise(b, cout), false, rng)?, "conv3");
        let bn3 = named(BatchNorm::new(cout), "bn3");
        let shortcut = if spec.has_projection() {
            Some((
                named(ConvKernel::he(ConvGeometry::spatial(cin, cout, 1, s), false, rng)?, "shortcut.conv"),
                named(BatchNorm::new(cout), "shortcut.bn"),
            ))
        } else {
            None
        };
        Ok(Block {
            spec,
            conv1,
            bn1,
            excite,
            middle,
            conv3,
            bn3,
            shortcut,
        })
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    /// Residual branch before the final addition.
    pub fn branch(&self, tape: &mut Tape<F>, x: Var, opts: RunOpts) -> Result<Var> {
        let c = tape.value(x).dims5()?[2];
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "block",
                format!("input has {c} channels, block expects {}", self.spec.in_channels),
            ));
        }
        let h = tape.conv2d(x, &self.conv1)?;
        let h = self.bn1.forward(tape, h, opts.mode)?;
        let mut h = tape.relu(h)?;
        h = match &self.excite {
            Excite::None => h,
            Excite::Me { module, residual: true } => module.forward(tape, h, opts.mode)?,
            Excite::Me { module, residual: false } => module.forward_no_residual(tape, h, opts.mode)?,
            Excite::Se(se) => se.forward(tape, h)?,
        };
        h = match &self.middle {
            Middle::Mta(m) => m.forward(tape, h, opts)?,
            Middle::Conv { temporal, conv2, bn2 } => {
                if let Some(t) = temporal {
                    h = t.forward(tape, h, opts.substitute_shift)?;
                }
                let h = tape.conv2d(h, conv2)?;
                let h = bn2.forward(tape, h, opts.mode)?;
                tape.relu(h)?
            }
        };
        let h = tape.conv2d(h, &self.conv3)?;
        self.bn3.forward(tape, h, opts.mode)
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var, opts: RunOpts) -> Result<Var> {
        let branch = self.branch(tape, x, opts)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = tape.conv2d(x, conv)?;
                bn.forward(tape, s, opts.mode)?
            }
            None => x,
        };
        let y = tape.add(branch, skip)?;
        tape.relu(y)
    }

    /// All temporal convolutions in this block.
    pub fn temporal_convs(&self) -> Vec<&TemporalConv<F>> {
        match &self.middle {
            Middle::Mta(m) => m.temporal.iter().collect(),
            Middle::Conv { temporal, .. } => temporal.iter().collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Block<G> {
        Block {
            spec: self.spec,
            conv1: self.conv1.cast(),
            bn1: self.bn1.cast(),
            excite: match &self.excite {
                Excite::None => Excite::None,
                Excite::Me { module, residual } => Excite::Me {
                    module: module.cast(),
                    residual: *residual,
                },
                Excite::Se(se) => Excite::Se(se.cast()),
            },
            middle: match &self.middle {
                Middle::Mta(m) => Middle::Mta(m.cast()),
                Middle::Conv { temporal, conv2, bn2 } => Middle::Conv {
                    temporal: temporal.as_ref().map(TemporalConv::cast),
                    conv2: conv2.cast(),
                    bn2: bn2.cast(),
                },
            },
            conv3: self.conv3.cast(),
            bn3: self.bn3.cast(),
            shortcut: self.shortcut.as_ref().map(|(c, b)| (c.cast(), b.cast())),
        }
    }
}

impl<F: Real> Module<F> for Block<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.conv1.params();
        v.extend(self.bn1.params());
        match &self.excite {
            Excite::None => {}
            Excite::Me { module, .. } => v.extend(module.params()),
            Excite::Se(se) => v.extend(se.params()),
        }
        match &self.middle {
            Middle::Mta(m) => v.extend(m.params()),
            Middle::Conv { temporal, conv2, bn2 } => {
                if let Some(t) = temporal {
                    v.extend(t.params());
                }
                v.extend(conv2.params());
                v.extend(bn2.params());
            }
        }
        v.extend(self.conv3.params());
        v.extend(self.bn3.params());
        if let Some((c, b)) = &self.shortcut {
            v.extend(c.params());
            v.extend(b.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        match &mut self.excite {
            Excite::None => {}
            Excite::Me { module, .. } => v.extend(module.params_mut()),
            Excite::Se(se) => v.extend(se.params_mut()),
        }
        match &mut self.middle {
            Middle::Mta(m) => v.extend(m.params_mut()),
            Middle::Conv { temporal, conv2, bn2 } => {
                if let Some(t) = temporal {
                    v.extend(t.params_mut());
                }
                v.extend(conv2.params_mut());
                v.extend(bn2.params_mut());
            }
        }
        v.extend(self.conv3.params_mut());
        v.extend(self.bn3.params_mut());
        if let Some((c, b)) = &mut self.shortcut {
            v.extend(c.params_mut());
            v.extend(b.params_mut());
        }
        v
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<F>> {
        let mut v = vec![&mut self.bn1];
        if let Excite::Me { module, .. } = &mut self.excite {
            v.extend(module.batch_norms_mut());
        }
        match &mut self.middle {
            Middle::Mta(m) => v.extend(m.batch_norms_mut()),
            Middle::Conv { bn2, .. } => v.push(bn2),
        }
        v.push(&mut self.bn3);
        if let Some((_, b)) = &mut self.shortcut {
            v.push(b);
        }
        v
    }
}
