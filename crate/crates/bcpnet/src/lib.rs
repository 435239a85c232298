//! CPU reference engine for a bi-directional context-propagation
//! segmentation network.
//!
//! The crate is organized around a small set of modules:
//!
//! - [`tensor`]: dense NCHW rank-4 tensors (`f32` deployment / `f64`
//!   verification) and elementwise primitives.
//! - [`nnops`]: forward neural operations with exact shape and accumulation
//!   contracts (convolution, pooling, bilinear resize, weighted fusion,
//!   softmax cross-entropy).
//! - [`graph`]: the network itself as an explicit layer list — encoder with
//!   fast downsampling, two-stage max-pool context aggregation, the
//!   bi-directional propagation module with learnable scalar fusion, and the
//!   1x1 classifier head — plus its ablation variants.
//! - [`complexity`]: analytic parameter and multiply-accumulate accounting
//!   per layer at arbitrary input resolution.
//! - [`autograd`]: manual backward pass and a finite-difference verifier.
//! - [`train`]: poly learning rate, SGD with momentum/weight decay,
//!   flip/scale/crop augmentation, a synthetic shape dataset, mIoU, and a
//!   deterministic desk-scale training loop.
//! - [`modelio`]: weights file, run configuration, PNG image and label I/O.
//! - [`bench`]: single-threaded latency harness (warmup, repeated timed
//!   forward passes, median/fps statistics).

pub mod autograd;
pub mod bench;
pub mod complexity;
pub mod error;
pub mod graph;
pub mod modelio;
pub mod nnops;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
