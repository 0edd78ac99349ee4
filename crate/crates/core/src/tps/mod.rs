//! Thin-plate-spline deformation and multi-scale patch augmentation.

pub mod augment;
pub mod warp;

pub use augment::{
    augment_training_set, default_scales, random_tps, sample_patch, AugmentConfig, AugmentSource,
    PatchDataset, Provenance,
};
pub use warp::{control_grid, fit_tps, kernel, warp_image, Point, TpsWarp};
