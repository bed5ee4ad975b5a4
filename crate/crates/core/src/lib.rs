//! Allocation-only core of the zoomseg toolkit.
//!
//! Everything in this crate is pure computation over in-memory buffers: the
//! differentiable tensor tape, the residual U-Net, losses and optimizers, the
//! two-stage training loop, whole-scan inference, segmentation metrics and
//! bootstrap statistics. File formats and the command line live in the
//! `zoomseg` crate.
//!
//! The crate is `no_std` and only needs `alloc`. Enable the `std` feature to
//! let the matrix kernels pick SIMD paths at runtime.

#![no_std]
#![deny(unsafe_op_in_unsafe_fn)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod gradcheck;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod resunet;
pub mod scalar;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

mod kernels;

pub use autodiff::{AutodiffError, Tape, Var};
pub use scalar::Real;
pub use tensor::Tensor;
pub use volume::{CropWindow, Mask, Volume};
