//! Factorized denoising diffusion.
//!
//! A DDPM whose U-Net splits into a region-mask generator and a weight-shared
//! decoder applied once per region. Trained only to denoise, the mask
//! generator learns an unsupervised segmentation of its inputs.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod png_io;
pub mod rng;
pub mod sampler;
pub mod segmenter;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
