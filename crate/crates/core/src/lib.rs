//! Pixel-to-style-to-pixel translation at desk scale.
//!
//! A feature-pyramid encoder maps images into the extended style space of a
//! frozen style-based generator. Everything needed to train and evaluate it
//! on a CPU lives here: a small reverse-mode autodiff engine, the generator
//! and auxiliary networks, a procedural face renderer for data, the loss
//! suite, latent-space operations and the training harness.

pub mod autograd;
pub mod dataforge;
pub mod error;
pub mod gradcheck;
pub mod latentops;
pub mod losses;
pub mod netlib;
pub mod ntf;
pub mod optim;
pub mod psp;
pub mod rng;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Graph, Primitive, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
