//! Coarse-to-fine superpixel segmentation of organs in volumetric images.

pub mod config;
pub mod convnet;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod inference;
pub mod pipeline;
pub mod rf;
pub mod seed;
pub mod superpixel;
pub mod tps;
pub mod volume;

pub use error::{Error, Result};
