mod common;

use scalecl::harness::RunConfig;

#[test]
fn parse_serialize_parse_is_identity() {
    let cfg = common::tiny();
    let text = cfg.to_toml().unwrap();
    let back = RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, back);
    assert_eq!(text, back.to_toml().unwrap());
    assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
}

#[test]
fn defaults_round_trip_from_empty_text() {
    let cfg = RunConfig::from_toml("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
}

#[test]
fn bare_config_carries_the_reference_recipe() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.loss.tau, 0.1);
    assert_eq!(cfg.model.embedding_dim, 256);
    assert_eq!(cfg.loss.a_max, 2048);
    assert_eq!((cfg.loss.lambda_cms, cfg.loss.lambda_ccs), (0.1, 0.1));
    let w: Vec<(usize, f64)> = cfg.loss.scale_weights.iter().map(|s| (s.stride, s.weight)).collect();
    assert_eq!(w, vec![(4, 1.0), (8, 0.7), (16, 0.4), (32, 0.1)]);
    let pairs: Vec<(usize, usize)> = cfg.loss.cross_pairs.iter().map(|p| (p.fine, p.coarse)).collect();
    assert_eq!(pairs, vec![(4, 32), (4, 16)]);
}

#[test]
fn hash_tracks_every_field() {
    let a = common::tiny();
    let mut b = a.clone();
    b.optimizer.momentum = 0.8;
    assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    let mut c = a.clone();
    c.dataset.scene.noise_sigma += 1e-3;
    assert_ne!(a.hash().unwrap(), c.hash().unwrap());
}

#[test]
fn unknown_and_invalid_fields_are_rejected() {
    assert!(RunConfig::from_toml("stepz = 3").is_err());
    assert!(RunConfig::from_toml("[loss]\ntau = 0.0").is_err());
    assert!(RunConfig::from_toml("batch_size = 1").is_err());
    assert!(RunConfig::from_toml("[dataset.scene]\nheight = 50").is_err());
}

#[test]
fn annotated_example_spells_out_the_defaults() {
    let text = r#"
seed = 0
steps = 2000
batch_size = 8
eval_interval = 500
output_dir = "runs/default"

[dataset]
seed = 7
train_images = 512
val_images = 128

[dataset.scene]
n_classes = 5
rare_class = 4        # 0 disables
overlap_classes = [1, 2]   # [] disables

[model]
stem_channels = 16
channels = [32, 64, 96, 128]
embedding_dim = 256

[optimizer]
base_lr = 0.05

[loss]
tau = 0.1
lambda_cms = 0.1
lambda_ccs = 0.1
loss_position = "backbone"   # or "neck"
scale_weights = [
  { stride = 4, weight = 1.0 }, { stride = 8, weight = 0.7 },
  { stride = 16, weight = 0.4 }, { stride = 32, weight = 0.1 },
]
cross_pairs = [{ fine = 4, coarse = 32, weight = 1.0 }, { fine = 4, coarse = 16, weight = 1.0 }]
"#;
    let mut want = RunConfig::default();
    want.output_dir = "runs/default".into();
    assert_eq!(RunConfig::from_toml(text).unwrap(), want);
}
