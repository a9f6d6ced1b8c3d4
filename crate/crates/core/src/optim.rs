//! SGD with momentum and L2 weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tape::Gradients;
use crate::tensor::{real, Real};

#[derive(Clone, Debug)]
pub struct SgdState<F> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<F>>,
}

impl<F: Real> SgdState<F> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "sgd needs lr > 0, momentum in [0,1), wd >= 0; got {learning_rate}, {momentum}, {weight_decay}"
            )));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&[F]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// `v <- m v - lr (g + wd p)`, `p <- p + v`. Parameters without a
    /// gradient on this step are left untouched.
    pub fn step(&mut self, params: Vec<&mut Param<F>>, grads: &Gradients<F>) {
        let (lr, m, wd) = (real::<F>(self.learning_rate), real::<F>(self.momentum), real::<F>(self.weight_decay));
        for p in params {
            let Some(g) = grads.param(p) else { continue };
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![F::zero(); p.value.len()]);
            for ((w, &gv), vel) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vel = m * *vel - lr * (gv + wd * *w);
                *w += *vel;
            }
        }
    }
}

pub fn sgd_step<F: Real>(params: Vec<&mut Param<F>>, grads: &Gradients<F>, state: &mut SgdState<F>) {
    state.step(params, grads);
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = step as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}
