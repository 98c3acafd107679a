//! Differentiable neural architecture search for small-image semantic segmentation.
//!
//! This crate is `no_std` (it only needs `alloc`) and holds every numeric piece of the
//! engine: a tape-based reverse-mode autodiff with the convolution/pooling kernels used by
//! the operation spaces, search-space templates, the mixed-operation supernet with partial
//! channel connection and edge normalization, the exponentiated-gradient architecture
//! optimizer, genotype decoders, synthetic data, metrics, training loops and the
//! evolutionary orchestrator logic.
//!
//! File formats, the threaded worker pool and the command-line front end live in the
//! `nas-runner` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod arch_optim;
pub mod autograd;
pub mod data;
pub mod decode;
pub mod error;
pub mod evo;
pub mod genotype;
pub mod gradcheck;
pub mod kernels;
pub mod memory;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod params;
pub mod space;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
