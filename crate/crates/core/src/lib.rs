//! Convolutional Swin-Unet (CS-Unet) for 2D medical image segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode autodiff tape.
//! * [`cst`]: window machinery and the convolutional Swin Transformer block.
//! * [`network`]: the U-shaped encoder/decoder and its ablation variants.
//! * [`training`]: loss, optimizer, schedule, metrics, data and checkpoints.
//! * [`config`]: the on-disk run configuration.
//! * [`gradsuite`]: named finite-difference gradient checks.

pub mod config;
pub mod cst;
mod error;
pub mod gradsuite;
pub mod layers;
pub mod network;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
