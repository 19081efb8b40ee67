//! No-reference image quality assessment with diffusion-model features.
//!
//! A teacher conditions a text-to-image denoiser on a fixed set of quality
//! prompts, taps its intermediate features in a single pass at a small
//! timestep, and decodes them into a quality feature map and a score. A small
//! student is then distilled from the teacher's feature map.

pub mod backbone;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod distill;
pub mod error;
pub mod eval;
mod kernels;
pub mod kv;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
