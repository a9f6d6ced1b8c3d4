//! Motion excitation and the squeeze-excite baseline.
//!
//! ME reduces channels, differences each frame's transformed successor
//! against itself, pools the difference spatially and turns it into
//! per-channel gates in `(-1, 1)`:
//!
//! ```text
//! Xr      = conv_red * X
//! M(t)    = conv_trans * Xr(t+1) - Xr(t),   M(T) = 0
//! A       = 2 sigmoid(conv_exp * pool(M)) - 1
//! out     = X + X . A
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel::{ConvGeometry, ConvKernel};
use crate::nn::{BatchNorm, Mode};
use crate::param::{Module, Param};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_REDUCTION: usize = 16;

#[derive(Clone, Debug)]
pub struct MotionExcitation<F> {
    channels: usize,
    reduction: usize,
    pub conv_red: ConvKernel<F>,
    /// Channel-wise 3x3 on the reduced features.
    pub conv_trans: ConvKernel<F>,
    pub conv_exp: ConvKernel<F>,
    /// Optional norms after `conv_red` and `conv_exp`.
    pub norms: Option<(BatchNorm<F>, BatchNorm<F>)>,
}

fn check_reduction(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels < reduction || channels % reduction != 0 {
        return Err(Error::Config(format!(
            "reduction {reduction} must divide channel count {channels}"
        )));
    }
    Ok(channels / reduction)
}

impl<F: Real> MotionExcitation<F> {
    /// He-initialised reductions, identity `conv_trans`.
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, batch_norm: bool, rng: &mut R) -> Result<Self> {
        let mid = check_reduction(channels, reduction)?;
        let mut conv_red = ConvKernel::he(ConvGeometry::pointwise(channels, mid), true, rng)?;
        let mut conv_trans = ConvKernel::identity(ConvGeometry::depthwise(mid, 3))?;
        let mut conv_exp = ConvKernel::he(ConvGeometry::pointwise(mid, channels), true, rng)?;
        conv_red.scope("conv_red");
        conv_trans.scope("conv_trans");
        conv_exp.scope("conv_exp");
        let norms = batch_norm.then(|| {
            let (mut a, mut b) = (BatchNorm::new(mid), BatchNorm::new(channels));
            a.scope("bn_red");
            b.scope("bn_exp");
            (a, b)
        });
        Ok(MotionExcitation {
            channels,
            reduction,
            conv_red,
            conv_trans,
            conv_exp,
            norms,
        })
    }

    /// Assembles a module from explicit kernels.
    pub fn from_kernels(conv_red: ConvKernel<F>, conv_trans: ConvKernel<F>, conv_exp: ConvKernel<F>) -> Result<Self> {
        let channels = conv_red.geom.in_channels;
        let mid = conv_red.geom.out_channels;
        let reduction = channels / mid.max(1);
        if check_reduction(channels, reduction)? != mid {
            return Err(Error::Config(format!("{channels} -> {mid} is not an integer reduction")));
        }
        let g = conv_trans.geom;
        if !g.is_channel_wise() || g.out_channels != mid || g.kernel_t != 1 {
            return Err(Error::Config("conv_trans must be a channel-wise 2-d kernel on the reduced width".into()));
        }
        if conv_exp.geom.in_channels != mid || conv_exp.geom.out_channels != channels {
            return Err(Error::Config("conv_exp must map the reduced width back to the input width".into()));
        }
        let mut me = MotionExcitation {
            channels,
            reduction,
            conv_red,
            conv_trans,
            conv_exp,
            norms: None,
        };
        me.conv_red.scope("conv_red");
        me.conv_trans.scope("conv_trans");
        me.conv_exp.scope("conv_exp");
        Ok(me)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    /// Zeroes `conv_exp` so the attention is identically zero.
    pub fn zero_excitation(&mut self) {
        for p in self.conv_exp.params_mut() {
            p.value.data_mut().fill(F::zero());
        }
    }

    /// Motion features `M`, shape `[N, T, C/r, H, W]`, last step zero.
    pub fn motion(&self, tape: &mut Tape<F>, x: Var, mode: Mode) -> Result<Var> {
        let [n, t, c, h, w] = tape.value(x).dims5()?;
        if c != self.channels {
            return Err(Error::shape("me", format!("input has {c} channels, module expects {}", self.channels)));
        }
        let mut xr = tape.conv2d(x, &self.conv_red)?;
        if let Some((bn, _)) = &self.norms {
            xr = bn.forward(tape, xr, mode)?;
        }
        if t == 1 {
            let mid = self.channels / self.reduction;
            return Ok(tape.constant(Tensor::zeros(&[n, 1, mid, h, w])));
        }
        let next = tape.slice_time(xr, 1, t - 1)?;
        let cur = tape.slice_time(xr, 0, t - 1)?;
        let moved = tape.conv2d(next, &self.conv_trans)?;
        let diff = tape.sub(moved, cur)?;
        tape.pad_time(diff, 0, 1)
    }

    /// Attention `A`, shape `[N, T, C, 1, 1]`.
    pub fn attention(&self, tape: &mut Tape<F>, x: Var, mode: Mode) -> Result<Var> {
        let m = self.motion(tape, x, mode)?;
        let ms = tape.global_avg_pool_spatial(m)?;
        let mut e = tape.conv2d(ms, &self.conv_exp)?;
        if let Some((_, bn)) = &self.norms {
            e = bn.forward(tape, e, mode)?;
        }
        let s = tape.sigmoid(e)?;
        tape.affine(s, 2.0, -1.0)
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var, mode: Mode) -> Result<Var> {
        let a = self.attention(tape, x, mode)?;
        let excited = tape.mul_broadcast_channel(x, a)?;
        tape.add(x, excited)
    }

    pub fn forward_no_residual(&self, tape: &mut Tape<F>, x: Var, mode: Mode) -> Result<Var> {
        let a = self.attention(tape, x, mode)?;
        tape.mul_broadcast_channel(x, a)
    }

    pub fn cast<G: Real>(&self) -> MotionExcitation<G> {
        MotionExcitation {
            channels: self.channels,
            reduction: self.reduction,
            conv_red: self.conv_red.cast(),
            conv_trans: self.conv_trans.cast(),
            conv_exp: self.conv_exp.cast(),
            norms: self.norms.as_ref().map(|(a, b)| (a.cast(), b.cast())),
        }
    }
}

impl<F: Real> Module<F> for MotionExcitation<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.conv_red.params();
        v.extend(self.conv_trans.params());
        v.extend(self.conv_exp.params());
        if let Some((a, b)) = &self.norms {
            v.extend(a.params());
            v.extend(b.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.conv_red.params_mut();
        v.extend(self.conv_trans.params_mut());
        v.extend(self.conv_exp.params_mut());
        if let Some((a, b)) = &mut self.norms {
            v.extend(a.params_mut());
            v.extend(b.params_mut());
        }
        v
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<F>> {
        match &mut self.norms {
            Some((a, b)) => vec![a, b],
            None => Vec::new(),
        }
    }
}

/// Per-frame squeeze-excite: `X . sigmoid(fc2 relu(fc1 pool(X)))`.
#[derive(Clone, Debug)]
pub struct SqueezeExcite<F> {
    channels: usize,
    pub fc1: ConvKernel<F>,
    pub fc2: ConvKernel<F>,
}

impl<F: Real> SqueezeExcite<F> {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let mid = check_reduction(channels, reduction)?;
        let mut fc1 = ConvKernel::he(ConvGeometry::pointwise(channels, mid), true, rng)?;
        let mut fc2 = ConvKernel::he(ConvGeometry::pointwise(mid, channels), true, rng)?;
        fc1.scope("fc1");
        fc2.scope("fc2");
        Ok(SqueezeExcite { channels, fc1, fc2 })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Gate `s` in `(0, 1)`, shape `[N, T, C, 1, 1]`.
    pub fn gate(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let c = tape.value(x).dims5()?[2];
        if c != self.channels {
            return Err(Error::shape("se", format!("input has {c} channels, module expects {}", self.channels)));
        }
        let s = tape.global_avg_pool_spatial(x)?;
        let s = tape.conv2d(s, &self.fc1)?;
        let s = tape.relu(s)?;
        let s = tape.conv2d(s, &self.fc2)?;
        tape.sigmoid(s)
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let s = self.gate(tape, x)?;
        tape.mul_broadcast_channel(x, s)
    }

    pub fn cast<G: Real>(&self) -> SqueezeExcite<G> {
        SqueezeExcite {
            channels: self.channels,
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

impl<F: Real> Module<F> for SqueezeExcite<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}
