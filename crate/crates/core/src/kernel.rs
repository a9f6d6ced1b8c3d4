//! Convolution kernels over `[N, T, C, H, W]` activations.
//!
//! A single grouped 3-d geometry covers every convolution the blocks need:
//! 2-d spatial convs have `kernel_t == 1`, channel-wise temporal convs have
//! `kernel_h == kernel_w == 1` and `groups == channels`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Module, Param};
use crate::tensor::{real, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel_t: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_t: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    /// Spatial `k x k` convolution with "same" padding for stride 1.
    pub fn spatial(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        ConvGeometry {
            in_channels,
            out_channels,
            groups: 1,
            kernel_t: 1,
            kernel_h: k,
            kernel_w: k,
            stride_h: stride,
            stride_w: stride,
            pad_t: 0,
            pad_h: (k - 1) / 2,
            pad_w: (k - 1) / 2,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::spatial(in_channels, out_channels, 1, 1)
    }

    /// Channel-wise `k x k` spatial convolution.
    pub fn depthwise(channels: usize, k: usize) -> Self {
        ConvGeometry {
            groups: channels,
            ..Self::spatial(channels, channels, k, 1)
        }
    }

    /// Channel-wise temporal convolution, zero padded so `T` is preserved.
    pub fn temporal_cw(channels: usize, k: usize) -> Self {
        ConvGeometry {
            in_channels: channels,
            out_channels: channels,
            groups: channels,
            kernel_t: k,
            kernel_h: 1,
            kernel_w: 1,
            stride_h: 1,
            stride_w: 1,
            pad_t: (k - 1) / 2,
            pad_h: 0,
            pad_w: 0,
        }
    }

    /// Dense (all channels mixed) temporal convolution.
    pub fn temporal_dense(channels: usize, k: usize) -> Self {
        ConvGeometry {
            groups: 1,
            ..Self::temporal_cw(channels, k)
        }
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn taps(&self) -> usize {
        self.kernel_t * self.kernel_h * self.kernel_w
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_per_group(),
            self.kernel_t,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_per_group() * self.taps()
    }

    pub fn is_channel_wise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.groups > 0
            && self.in_channels > 0
            && self.out_channels > 0
            && self.in_channels % self.groups == 0
            && self.out_channels % self.groups == 0
            && self.taps() > 0
            && self.stride_h > 0
            && self.stride_w > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid convolution geometry {self:?}")))
        }
    }

    /// Output `[T, H, W]` for an input of `[T, H, W]`.
    pub fn output_dims(&self, t: usize, h: usize, w: usize) -> Result<[usize; 3]> {
        let out = |len: usize, pad: usize, k: usize, stride: usize| -> Option<usize> {
            let padded = len + 2 * pad;
            (padded >= k).then(|| (padded - k) / stride + 1)
        };
        match (
            out(t, self.pad_t, self.kernel_t, 1),
            out(h, self.pad_h, self.kernel_h, self.stride_h),
            out(w, self.pad_w, self.kernel_w, self.stride_w),
        ) {
            (Some(t), Some(h), Some(w)) if t > 0 && h > 0 && w > 0 => Ok([t, h, w]),
            _ => Err(Error::shape(
                "conv",
                format!("kernel does not fit input [T={t}, H={h}, W={w}]: {self:?}"),
            )),
        }
    }

    /// Multiply-accumulates for one output volume of `[T, H, W]`.
    pub fn macs(&self, out_t: usize, out_h: usize, out_w: usize) -> u64 {
        (self.out_channels * out_t * out_h * out_w) as u64 * (self.in_per_group() * self.taps()) as u64
    }

    pub fn num_params(&self, bias: bool) -> u64 {
        (self.weight_len() + if bias { self.out_channels } else { 0 }) as u64
    }
}

#[derive(Clone, Debug)]
pub struct ConvKernel<F> {
    pub geom: ConvGeometry,
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
}

impl<F: Real> ConvKernel<F> {
    pub fn from_weights(geom: ConvGeometry, weight: Tensor<F>, bias: Option<Tensor<F>>) -> Result<Self> {
        geom.validate()?;
        if weight.shape() != geom.weight_shape() {
            return Err(Error::shape(
                "conv kernel",
                format!("weight shape {:?} != {:?}", weight.shape(), geom.weight_shape()),
            ));
        }
        if let Some(b) = &bias {
            if b.shape() != [geom.out_channels] {
                return Err(Error::shape("conv kernel", format!("bias shape {:?}", b.shape())));
            }
        }
        Ok(ConvKernel {
            geom,
            weight: Param::new("weight", weight),
            bias: bias.map(|b| Param::new("bias", b)),
        })
    }

    pub fn zeros(geom: ConvGeometry, bias: bool) -> Result<Self> {
        Self::from_weights(
            geom,
            Tensor::zeros(&geom.weight_shape()),
            bias.then(|| Tensor::zeros(&[geom.out_channels])),
        )
    }

    /// Fan-in scaled Gaussian weights (He init), zero bias.
    pub fn he<R: Rng + ?Sized>(geom: ConvGeometry, bias: bool, rng: &mut R) -> Result<Self> {
        geom.validate()?;
        let fan_in = (geom.in_per_group() * geom.taps()) as f64;
        let w = Tensor::randn(&geom.weight_shape(), (2.0 / fan_in).sqrt(), rng);
        Self::from_weights(geom, w, bias.then(|| Tensor::zeros(&[geom.out_channels])))
    }

    /// Gaussian weights and bias with a fixed standard deviation.
    pub fn randn<R: Rng + ?Sized>(geom: ConvGeometry, bias: bool, std: f64, rng: &mut R) -> Result<Self> {
        geom.validate()?;
        let w = Tensor::randn(&geom.weight_shape(), std, rng);
        let b = bias.then(|| Tensor::randn(&[geom.out_channels], std, rng));
        Self::from_weights(geom, w, b)
    }

    /// Every output channel copies its own input channel (centre tap = 1).
    pub fn identity(geom: ConvGeometry) -> Result<Self> {
        if !geom.is_channel_wise() {
            return Err(Error::Config("identity kernel needs a channel-wise geometry".into()));
        }
        let mut k = Self::zeros(geom, false)?;
        let centre = (geom.kernel_t / 2) * geom.kernel_h * geom.kernel_w
            + (geom.kernel_h / 2) * geom.kernel_w
            + geom.kernel_w / 2;
        let taps = geom.taps();
        for c in 0..geom.out_channels {
            k.weight.value.data_mut()[c * taps + centre] = F::one();
        }
        Ok(k)
    }

    /// Channel-wise temporal kernel with per-channel taps `rows[c]`.
    pub fn temporal_from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        let geom = ConvGeometry::temporal_cw(rows.len(), 3);
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| real::<F>(v))).collect();
        Self::from_weights(geom, Tensor::new(&geom.weight_shape(), data)?, None)
    }

    pub fn cast<G: Real>(&self) -> ConvKernel<G> {
        ConvKernel {
            geom: self.geom,
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(|b| b.cast()),
        }
    }
}

impl<F: Real> Module<F> for ConvKernel<F> {
    fn params(&self) -> Vec<&Param<F>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}
