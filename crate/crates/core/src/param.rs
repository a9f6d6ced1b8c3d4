//! Named trainable parameters and the traversal trait modules implement.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::nn::BatchNorm;
use crate::tensor::{Real, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

#[derive(Clone, Debug)]
pub struct Param<F> {
    id: ParamId,
    pub name: String,
    pub value: Tensor<F>,
}

impl<F: Real> Param<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        Param {
            id: ParamId(fresh_id()),
            name: name.into(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn cast<G: Real>(&self) -> Param<G> {
        Param::new(self.name.clone(), self.value.cast())
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns parameters and batch-norm buffers.
pub trait Module<F: Real> {
    fn params(&self) -> Vec<&Param<F>>;
    fn params_mut(&mut self) -> Vec<&mut Param<F>>;
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<F>> {
        Vec::new()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Prefixes every parameter name with `prefix.`.
    fn scope(&mut self, prefix: &str) {
        for p in self.params_mut() {
            p.name = format!("{prefix}.{}", p.name);
        }
    }
}
