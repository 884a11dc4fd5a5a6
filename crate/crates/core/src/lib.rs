//! A small CPU deep-learning stack built around one idea: constrained
//! directional Sobel layers whose thresholded, binarized outputs are fused
//! with an ordinary convolutional backbone to make the classifier less
//! sensitive to small input perturbations.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense tensors and a reverse-mode autograd tape
//!   with the handful of ops the models need (conv, pool, linear, losses).
//! - [`optim`] / [`gradcheck`]: SGD with momentum, and a central-difference
//!   gradient checker used heavily by the test suite.
//! - [`sbfm`]: direction-constrained kernels, their projection, and the
//!   relative-threshold binarization layer.
//! - [`model`]: a VGG-style backbone, the fused classifier, training loop,
//!   and binary checkpoints.
//! - [`attack`]: FGSM adversarial example generation and the accuracy-vs-ε
//!   sweep protocol.
//! - [`data`]: CIFAR-10 / IDX ingestion, stratified splits, normalization,
//!   and a synthetic edge-image corpus for fast tests.
//!
//! Core math is generic over the scalar type (`f32` or `f64`) through the
//! [`scalar::Scalar`] trait; the model/data/attack layers and all shipped
//! binaries run in `f64`, which is the default type parameter everywhere.

pub mod attack;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod gemm;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod sbfm;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Single-precision tensor alias.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor alias (the crate-wide default).
pub type Tensor64 = Tensor<f64>;
/// Single-precision tape alias.
pub type Tape32 = Tape<f32>;
/// Double-precision tape alias (the crate-wide default).
pub type Tape64 = Tape<f64>;
