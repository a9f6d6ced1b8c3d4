//! Temporal excitation and aggregation networks for video classification,
//! built on a small reverse-mode autodiff tape over 5-d `[N, T, C, H, W]`
//! tensors.

pub mod analyzer;
pub mod block;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernel;
pub mod me;
pub mod mta;
pub mod network;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod param;
pub mod selfcheck;
pub mod shift;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use kernel::{ConvGeometry, ConvKernel};
pub use nn::{BatchNorm, Mode};
pub use param::{Module, Param};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
