//! Cycle-consistent unsupervised deformable image registration.
//!
//! Two registration networks are trained jointly with registration, cycle and
//! identity losses on pairs of images. The crate carries its own small
//! reverse-mode differentiation engine, a differentiable spatial transformer,
//! a U-Net style registration network, multiscale (global then patch-wise
//! local) inference, evaluation metrics and a synthetic benchmark generator.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod multiscale;
pub mod regnet;
pub mod rng;
pub mod synthbench;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
