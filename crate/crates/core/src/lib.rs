//! Eulerian–Lagrangian point cloud learning.
//!
//! Points become particles carrying features. Each advection step scatters
//! particle features to a background grid, convolves them into a force
//! field, derives a grid velocity field, blends PIC and FLIP particle
//! velocities, moves the particles and appends the gathered grid features.
//!
//! Module map:
//! - [`tensor`]: tensors, the autodiff tape, layers, parameter files
//! - [`transfer`]: trilinear particle↔grid transfer
//! - [`featinit`]: multiscale per-particle descriptors
//! - [`advect`]: one advection step and its pieces
//! - [`model`]: the full network, penalties and losses
//! - [`train`]: optimizer, schedules, augmentation, metrics, training loop
//! - [`data`]: datasets, file formats, synthetic shapes
//! - [`checkpoint`]: saving and restoring models and optimizer state

pub mod advect;
pub mod checkpoint;
pub mod data;
mod error;
pub mod featinit;
pub mod model;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
