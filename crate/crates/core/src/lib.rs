//! Progressively volumetrized 3D image recovery.
//!
//! A volumetric reconstruction or synthesis task is split into three
//! cross-sectional adversarial models, one per rectilinear orientation,
//! trained one after another. Each later stage sees the volume recovered by
//! the stage before it as an extra input channel.
//!
//! Module map:
//! - [`volume`]: the [`Volume`] payload shared by every other module
//! - [`geometry`]: orientation slicing and reassembly
//! - [`kspace`]: undersampling masks, Fourier operators and data consistency
//! - [`nets`]: ResNet generator and PatchGAN discriminator with hand-written backprop
//! - [`training`]: losses, schedule and the 2D adversarial training loop
//! - [`pipeline`]: the three-stage cascade, sGAN baselines and order search
//! - [`metrics`]: volumetric PSNR and SSIM
//! - [`data`]: volume files, dataset manifests and the phantom generator

pub mod data;
pub mod error;
pub mod geometry;
pub mod kspace;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod seed;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{Orientation, ProgressionOrder, SliceStack};
pub use volume::Volume;
