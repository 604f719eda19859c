#![allow(dead_code)]

use scalecl::harness::RunConfig;

/// 32x32 images, three classes and a narrow model: a few steps run in well
/// under a second.
pub const TINY: &str = r#"
seed = 3
steps = 6
batch_size = 2
eval_interval = 3

[dataset]
seed = 1
train_images = 6
val_images = 4

[dataset.scene]
height = 32
width = 32
n_classes = 3
size_min = 8
size_max = 16
rare_class = 2
rare_frequency = 0.5
overlap_classes = []

[model]
stem_channels = 4
channels = [6, 6, 8, 8]
embedding_dim = 8

[loss]
scale_weights = [{ stride = 4, weight = 1.0 }, { stride = 8, weight = 0.7 }, { stride = 16, weight = 0.4 }]
cross_pairs = [{ fine = 4, coarse = 16, weight = 1.0 }]
"#;

pub fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).expect("tiny config")
}
