//! Selective-kernel convolution networks, built from scratch on a small
//! f64 tensor core.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] - dense rank-4 NCHW arrays, the only numeric container.
//! * [`ops`] - forward primitives: grouped/dilated/strided convolution,
//!   batch norm, pooling, fully connected layers, path softmax. A
//!   [`ops::reference`] submodule carries deliberately naive kernels used
//!   to cross-check the optimized ones.
//! * [`autograd`] - a replayable tape of primitive applications with
//!   reverse-mode gradients and a finite-difference gradient checker.
//! * [`sk`] - the selective-kernel convolution (split / fuse / select),
//!   squeeze-excitation, and the residual bottleneck unit built on it.
//! * [`arch`] - declarative architecture specs, named presets (ResNeXt-50,
//!   SENet-50, SKNet-26/50/101 and the CIFAR-sized variants), network
//!   construction, forward execution and checkpointing.
//! * [`cost`] - analytic parameter and multiply-add accounting that is
//!   guaranteed to agree with what [`arch::build`] allocates.
//! * [`data`] - CIFAR-style binary record decoding, standard augmentation,
//!   and a deterministic synthetic dataset with controlled object scale.
//! * [`train`] - label-smoothed cross entropy, SGD with momentum and
//!   selective weight decay, step schedules, a single-device loop.
//! * [`attention`] - scale-transformed probe images, attention collection
//!   across selective-kernel units, summary statistics and CSV emission.
//!
//! Everything is single-threaded and bit-deterministic: a fixed seed fully
//! determines initialization, data order, augmentation and therefore every
//! logged number.

// Kernels walk several parallel buffers by index, and divisibility
// checks read better as arithmetic; neither lint pays its way here.
#![allow(clippy::needless_range_loop, clippy::manual_is_multiple_of)]

pub mod arch;
pub mod attention;
pub mod autograd;
pub mod cost;
pub mod data;
pub mod error;
pub mod ops;
pub mod sk;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
