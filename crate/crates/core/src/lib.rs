//! Differentiable kernels for small-object detection on CPU.
//!
//! The crate is `no_std` (it needs `alloc`). It provides dense tensors with
//! a reverse-mode tape, a cross-direction feature pyramid, multi-frequency
//! DCT channel attention, a task-decoupled detection head, PASCAL-style
//! metrics with size buckets, and a synthetic scene generator. File formats
//! and the command line live in the `ctdnet` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod boxes;
pub mod dct;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pyramid;
pub mod scene;
pub mod suite;
pub mod tensor;

pub use boxes::Bbox;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
