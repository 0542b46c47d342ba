//! Core library for LO-Det, a lightweight oriented object detector.
//!
//! Everything in this crate is pure computation over heap-allocated buffers:
//! a small dense-tensor engine with reverse-mode differentiation, the
//! CSA/DRF/CSA-DRF neck blocks, the DSC-Head oriented-box codec and losses,
//! rotated-box geometry and detection metrics, and a FLOPs analyzer that
//! cross-checks closed-form complexity formulas against instrumented counts.
//!
//! The crate is `no_std`-compatible (`alloc` required) so the inference path
//! can be embedded; all file and terminal I/O lives in the companion CLI
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod blocks;
pub mod conv;
pub mod flops;
pub mod geometry;
pub mod graph;
pub mod head;
pub mod model;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};
