//! Convolutional patch classifier trained with SGD.

pub mod net;
pub mod params;
pub mod spec;
pub mod train;

pub use net::{backward, forward, forward_activations, gradient_check, kink_margin, loss, BackwardOutput, Mode, Tensor, LOSS_EPSILON};
pub use params::{InitScheme, LayerParams, NetworkParams};
pub use spec::{Layer, NetworkSpec, Shape};
pub use train::{
    mean_probability, predict_dataset, predict_patches, predict_superpixel, train_sgd, train_sgd_from, write_trace,
    EpochStats, TrainConfig,
};
