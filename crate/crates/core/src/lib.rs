//! Equivariant neural networks that operate directly on sparse tomographic
//! measurements.
//!
//! The crate is organised bottom-up:
//!
//! * [`group`] and [`actions`]: SE(2) and Aff⁺(2), their actions on the image
//!   plane and on sinogram space, multipliers and Jacobians.
//! * [`tomo`]: closed-form and raster Radon transforms, sensor layouts, noise.
//! * [`theory`]: visibility audit, convolution-form operators and the kernel
//!   constraint check.
//! * [`tensor`]: a small reverse-mode differentiation engine.
//! * [`layers`]: lifting and group convolutions on point clouds, residual
//!   blocks and the invariant head.
//! * [`data`] and [`train`]: the tube-thickness dataset, Adam, training and
//!   evaluation.
//! * [`audit`]: gradient, invariance and visibility audits; [`svg`] draws
//!   their line charts.
//!
//! Runnable walkthroughs live in `examples/`.

pub mod actions;
pub mod audit;
pub mod cli;
pub mod data;
pub mod error;
pub mod group;
pub mod layers;
pub mod svg;
pub mod tensor;
pub mod theory;
pub mod tomo;
pub mod train;

pub use error::{Error, Result};
