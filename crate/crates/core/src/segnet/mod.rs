//! Toy multi-scale segmentation network, synthetic data and metrics.

pub mod metrics;
mod model;
pub mod scene;

pub use metrics::{miou, separation_ratio, ConfusionMatrix, MiouReport};
pub use model::{argmax_channels, segment, softmax_channels, Forward, ModelSpec, SegModel, IMAGE_CHANNELS, STRIDES};
pub use scene::{generate_scene, SceneSpec, SyntheticScene};
