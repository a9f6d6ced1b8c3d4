//! Batch normalisation and the train/eval switch.

use crate::error::Result;
use crate::param::{fresh_id, Module, Param};
use crate::tape::{Tape, Var};
use crate::tensor::{real, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated by [`BatchNorm::absorb`].
    Train,
    /// Running statistics.
    Eval,
}

/// Per-channel batch normalisation over `N x T x H x W` (frames are batch).
#[derive(Clone, Debug)]
pub struct BatchNorm<F> {
    key: u64,
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub eps: f64,
    pub momentum: f64,
}

impl<F: Real> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            key: fresh_id(),
            gamma: Param::new("bn.weight", Tensor::ones(&[channels])),
            beta: Param::new("bn.bias", Tensor::zeros(&[channels])),
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Names under which the running statistics are stored.
    pub fn buffer_names(&self) -> (String, String) {
        let stem = self.gamma.name.strip_suffix("weight").unwrap_or(&self.gamma.name);
        (format!("{stem}running_mean"), format!("{stem}running_var"))
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, g, b, None, self.eps)?;
                if let Some(stats) = stats {
                    tape.record_batch_stats(self.key, stats);
                }
                Ok(y)
            }
            Mode::Eval => {
                let (y, _) = tape.batch_norm(x, g, b, Some((&self.running_mean, &self.running_var)), self.eps)?;
                Ok(y)
            }
        }
    }

    /// Folds the batch statistics this layer recorded on `tape` into the
    /// running estimates (unbiased variance, exponential average).
    pub fn absorb(&mut self, tape: &Tape<F>) {
        let Some(st) = tape.batch_stats(self.key) else { return };
        let m = real::<F>(self.momentum);
        let keep = F::one() - m;
        let correction = if st.count > 1 {
            real::<F>(st.count as f64 / (st.count - 1) as f64)
        } else {
            F::one()
        };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = keep * self.running_mean[c] + m * st.mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * st.var[c] * correction;
        }
    }

    pub fn cast<G: Real>(&self) -> BatchNorm<G> {
        let conv = |v: &[F]| v.iter().map(|x| G::from_f64_lossy(x.to_f64_lossy())).collect();
        BatchNorm {
            key: fresh_id(),
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

impl<F: Real> Module<F> for BatchNorm<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<F>> {
        vec![self]
    }
}
