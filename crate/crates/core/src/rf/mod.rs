//! Patch features, random forests and the two-level cascade.

pub mod cascade;
pub mod features;
pub mod forest;

pub use cascade::{
    cascade_apply, retain_superpixels, train_cascade, Cascade, CascadeConfig, CascadeOutput,
    CascadeReport, ResponseMap, TrainingSlice,
};
pub use features::{extract_patch_features, FeatureExtractor, PatchFeatureVector, FEATURE_VERSION};
pub use forest::{train_forest, train_forest_rows, ForestConfig, ForestReport, RandomForestModel, Samples};
