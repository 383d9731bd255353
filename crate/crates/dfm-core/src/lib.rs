//! Deep feedback model engine.
//!
//! A reverse-mode autodiff core over dense f64 tensors, the feedback dynamics
//! built on it (spectral and convolutional exponential decay, orthogonality-
//! preserving training), and the experiment harness that drives them.

pub mod data;
pub mod dynamics;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod train;
