//! Spatial mixture-of-experts (SMoE) building blocks.
//!
//! Everything here is pure computation over `alloc` containers: dense rank-4
//! tensors and 3x3 cross-correlation, the location-dependent heat-diffusion
//! generator, the SMoE layer with tensor routing, its losses, the conv/LCN
//! baselines, Adam and the training loop. File formats, configuration and the
//! command line live in the companion `smoe` crate.
#![no_std]
// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod baselines;
pub mod error;
pub mod gradcheck;
pub mod heat;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod smoe;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{KernelBank, Tensor};
