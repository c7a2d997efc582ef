//! Cloud segmentation with compact U-Nets distilled from large teachers.
//!
//! The crate covers the whole desk-scale pipeline: multispectral raster
//! containers and tiling ([`raster`]), a trainable U-Net ([`unet`]),
//! teacher backends ([`teacher`]), the distillation loss and trainer
//! ([`distill`]), adaptive morphological clean-up ([`postproc`]),
//! segmentation metrics ([`metrics`]) and the command pipeline
//! ([`pipeline`]).

mod codec;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod postproc;
pub mod raster;
pub mod seed;
pub mod synthetic;
pub mod teacher;
pub mod unet;

pub use error::{Error, FormatError, Result};
