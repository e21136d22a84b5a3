//! From-scratch encoder-decoder segmentation toolkit for fetal head
//! circumference measurement in ultrasound images.
//!
//! The crate builds everything from a minimal reverse-mode autodiff engine
//! upward: structured layers (convolution, transposed convolution, batch
//! norm, pooling), four LinkNet-family network variants, a boundary-weighted
//! Dice+BCE training loss, an Adam training loop, and an evaluation suite
//! that fits an ellipse to the predicted head boundary and reports head
//! circumference error alongside Dice and Hausdorff distance.
//!
//! Numeric work is generic over [`scalar::Scalar`]: `f64` for gradient
//! checks and metric oracles, `f32` for training.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Gray, Grid, Mask};
pub use scalar::Scalar;
pub use tensor::Tensor;
