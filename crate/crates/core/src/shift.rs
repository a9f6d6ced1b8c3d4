//! Part temporal shift and the fixed kernels that reproduce it as a
//! channel-wise temporal convolution.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ConvGeometry, ConvKernel};
use crate::ops;
use crate::param::{Module, Param};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Taps for a channel reading frame `t + 1`, `t - 1`, and `t`.
pub const ROW_LEFT: [f64; 3] = [0.0, 0.0, 1.0];
pub const ROW_RIGHT: [f64; 3] = [1.0, 0.0, 0.0];
pub const ROW_KEEP: [f64; 3] = [0.0, 1.0, 0.0];

/// Shifts the first `C/8` channels left (toward `t - 1`, reading `t + 1`)
/// and the next `C/8` right; boundaries are zero-filled.
pub fn temporal_shift<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let c = x.dims5()?[2];
    if c < 8 {
        return Err(Error::shape("temporal_shift", format!("needs at least 8 channels, got {c}")));
    }
    ops::shift_forward(x, c / 8, c / 8)
}

fn rows_for_bands(c: usize, left: usize, right: usize) -> Vec<[f64; 3]> {
    (0..c)
        .map(|ch| {
            if ch < left {
                ROW_LEFT
            } else if ch < left + right {
                ROW_RIGHT
            } else {
                ROW_KEEP
            }
        })
        .collect()
}

/// The kernel equal to [`temporal_shift`] on `C` channels.
pub fn shift_init_kernel<F: Real>(c: usize) -> Result<ConvKernel<F>> {
    if c < 8 || c % 8 != 0 {
        return Err(Error::Config(format!("shift bands need a channel count divisible by 8, got {c}")));
    }
    ConvKernel::temporal_from_rows(&rows_for_bands(c, c / 8, c / 8))
}

/// Band widths used when shift-initialising a width that need not be a
/// multiple of 8: `C/8` each, at least one channel.
pub fn shift_bands(c: usize) -> (usize, usize) {
    let band = (c / 8).max(1);
    let left = band.min(c);
    (left, band.min(c - left))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalFlavor {
    /// Dense `C -> C` temporal convolution.
    Conv,
    /// Channel-wise, randomly initialised.
    Cw,
    /// Channel-wise, initialised to the part shift.
    ShiftInit,
}

/// Learnable temporal convolution (kernel 3, pad 1) that remembers when it
/// was shift-initialised, so it can be swapped for the shift operator.
#[derive(Clone, Debug)]
pub struct TemporalConv<F> {
    pub kernel: ConvKernel<F>,
    bands: Option<(usize, usize)>,
}

impl<F: Real> TemporalConv<F> {
    pub fn new<R: Rng + ?Sized>(channels: usize, flavor: TemporalFlavor, rng: &mut R) -> Result<Self> {
        let (kernel, bands) = match flavor {
            TemporalFlavor::Conv => (ConvKernel::he(ConvGeometry::temporal_dense(channels, 3), false, rng)?, None),
            TemporalFlavor::Cw => (ConvKernel::he(ConvGeometry::temporal_cw(channels, 3), false, rng)?, None),
            TemporalFlavor::ShiftInit => {
                let (l, r) = shift_bands(channels);
                (ConvKernel::temporal_from_rows(&rows_for_bands(channels, l, r))?, Some((l, r)))
            }
        };
        Ok(TemporalConv { kernel, bands })
    }

    /// Channel-wise kernel with i.i.d. Gaussian taps.
    pub fn random<R: Rng + ?Sized>(channels: usize, std: f64, rng: &mut R) -> Result<Self> {
        Ok(TemporalConv {
            kernel: ConvKernel::randn(ConvGeometry::temporal_cw(channels, 3), false, std, rng)?,
            bands: None,
        })
    }

    pub fn from_kernel(kernel: ConvKernel<F>) -> Result<Self> {
        let g = kernel.geom;
        if g.kernel_t != 3 || g.pad_t != 1 || g.kernel_h != 1 || g.kernel_w != 1 || g.in_channels != g.out_channels {
            return Err(Error::Config("temporal conv must be a length-preserving 3-tap kernel".into()));
        }
        Ok(TemporalConv { kernel, bands: None })
    }

    pub fn channels(&self) -> usize {
        self.kernel.geom.out_channels
    }

    /// Shift bands when this conv was built shift-initialised.
    pub fn shift_bands(&self) -> Option<(usize, usize)> {
        self.bands
    }

    /// Runs the convolution, or the equivalent shift when `substitute` is set
    /// and the kernel started as a shift.
    pub fn forward(&self, tape: &mut Tape<F>, x: Var, substitute: bool) -> Result<Var> {
        match self.bands {
            Some((l, r)) if substitute => tape.shift_bands(x, l, r),
            _ if self.kernel.geom.is_channel_wise() => tape.temporal_conv1d_cw(x, &self.kernel),
            _ => tape.conv(x, &self.kernel),
        }
    }

    pub fn cast<G: Real>(&self) -> TemporalConv<G> {
        TemporalConv {
            kernel: self.kernel.cast(),
            bands: self.bands,
        }
    }
}

impl<F: Real> Module<F> for TemporalConv<F> {
    fn params(&self) -> Vec<&Param<F>> {
        self.kernel.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.kernel.params_mut()
    }
}

/// Outcome of comparing [`temporal_shift`] with its conv form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub seed: u64,
    pub cases: usize,
    pub max_abs_diff: f64,
    /// `[N, T, C, H, W]` of the case with the largest difference.
    pub worst_shape: Option<[usize; 5]>,
}

/// Runs `cases` random `f32` inputs through both the shift and the
/// shift-initialised conv. Each case draws `C` from `channels`, `T` from
/// `frames`, and small batch and spatial sizes.
pub fn equivalence_sweep(channels: &[usize], frames: &[usize], cases: usize, seed: u64) -> Result<EquivalenceReport> {
    if channels.is_empty() || frames.is_empty() {
        return Err(Error::Config("equivalence sweep needs channel and frame choices".into()));
    }
    if let Some(&c) = channels.iter().find(|&&c| c < 8 || c % 8 != 0) {
        return Err(Error::Config(format!("channel count must be a positive multiple of 8, got {c}")));
    }
    if frames.contains(&0) {
        return Err(Error::Config("frame count must be positive".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = EquivalenceReport {
        seed,
        cases,
        max_abs_diff: 0.0,
        worst_shape: None,
    };
    for _ in 0..cases {
        let shape = [
            rng.gen_range(1..=2),
            frames[rng.gen_range(0..frames.len())],
            channels[rng.gen_range(0..channels.len())],
            rng.gen_range(1..=5),
            rng.gen_range(1..=5),
        ];
        let x = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
        let shifted = temporal_shift(&x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let y = tape.temporal_conv1d_cw(xv, &shift_init_kernel(shape[2])?)?;
        let d = shifted.max_abs_diff(tape.value(y))?;
        if report.worst_shape.is_none() || d > report.max_abs_diff {
            report.max_abs_diff = d;
            report.worst_shape = Some(shape);
        }
    }
    Ok(report)
}
