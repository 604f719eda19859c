use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::labels::downsample_labels;
use crate::nn::Ctx;
use crate::sampler::{select_anchors, AnchorSet, CandidatePool};
use crate::segnet::{separation_ratio, SegModel, SyntheticScene};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub class_id: u32,
    pub scale: usize,
    pub values: Vec<f64>,
}

/// Projected `N x d x h x w` embeddings of every image at `stride`, in
/// evaluation mode.
fn project_scene(model: &SegModel, scene: &SyntheticScene, stride: usize) -> Result<Tensor> {
    if model.projector(stride).is_none() {
        return Err(Error::InvalidArgument(format!("the model has no stride {stride}")));
    }
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for start in (0..scene.len()).step_by(16) {
        let idx: Vec<usize> = (start..(start + 16).min(scene.len())).collect();
        let (images, _) = scene.batch(&idx)?;
        let tape = Tape::new();
        let vars = model.params.bind(&tape);
        let ctx = Ctx::new(&tape, &vars, &model.buffers, false);
        let fwd = model.forward(&ctx, &tape.constant(images))?;
        let features = model.loss_features(&fwd)?;
        let z = model.project(&ctx, &features[&stride])?;
        let v = z.tensor.value();
        shape = v.shape().to_vec();
        data.extend_from_slice(v.data());
    }
    shape[0] = scene.len();
    Tensor::new(shape, data)
}

/// Unit-norm projected embeddings at `stride`, balanced per class by the
/// anchor sampler and capped at `n_per_class` rows per class. Classes absent
/// at this stride are skipped with a warning.
pub fn collect_embeddings(
    model: &SegModel,
    scene: &SyntheticScene,
    stride: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<EmbeddingRow>> {
    if n_per_class == 0 {
        if model.projector(stride).is_none() {
            return Err(Error::InvalidArgument(format!("the model has no stride {stride}")));
        }
        return Ok(Vec::new());
    }
    let z = project_scene(model, scene, stride)?;
    let labels = downsample_labels(&scene.labels, stride)?;
    let pool = CandidatePool::from_labels(&labels, stride);
    let present = labels.classes();
    for c in 0..model.n_classes() as u32 {
        if !present.contains(&c) {
            log::warn!("class {c} has no pixels at stride {stride}; omitted");
        }
    }
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selection = select_anchors(&pool, n_per_class * present.len(), &mut rng)?;
    let tape = Tape::new();
    let set = AnchorSet::gather(&tape.constant(z), &pool, &selection, true)?;
    let d = set.dim();
    let values = set.embeddings().value();
    Ok(set
        .class_ids()
        .iter()
        .zip(values.data().chunks(d))
        .map(|(&class_id, row)| EmbeddingRow {
            class_id,
            scale: stride,
            values: row.to_vec(),
        })
        .collect())
}

/// Comma-separated with a header row; floats carry 9 significant digits.
pub fn write_embeddings_csv<W: Write>(rows: &[EmbeddingRow], dim: usize, mut w: W) -> Result<()> {
    let mut header = String::from("class_id,scale");
    for k in 0..dim {
        header.push_str(&format!(",e{k}"));
    }
    writeln!(w, "{header}")?;
    for r in rows {
        if r.values.len() != dim {
            return Err(Error::InvalidArgument("embedding width changed between rows".into()));
        }
        write!(w, "{},{}", r.class_id, r.scale)?;
        for v in &r.values {
            write!(w, ",{v:.8e}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Intra/inter cosine-distance ratio of balanced embeddings at `stride`.
pub fn class_separation(
    model: &SegModel,
    scene: &SyntheticScene,
    stride: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<f64> {
    let rows = collect_embeddings(model, scene, stride, n_per_class, seed)?;
    let d = rows.first().map_or(0, |r| r.values.len());
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.values.iter().copied()).collect();
    let classes: Vec<u32> = rows.iter().map(|r| r.class_id).collect();
    separation_ratio(&flat, d, &classes)
        .ok_or_else(|| Error::InvalidArgument("separation needs two classes with two rows each".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossPosition;
    use crate::segnet::{generate_scene, ModelSpec, SceneSpec};

    fn fixture() -> (SegModel, SyntheticScene) {
        let spec = ModelSpec {
            stem_channels: 4,
            channels: [6, 6, 8, 8],
            embedding_dim: 7,
        };
        let model = SegModel::new(&spec, 5, LossPosition::Backbone, 3).unwrap();
        let scene = generate_scene(&SceneSpec::default(), 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        (model, scene)
    }

    #[test]
    fn rows_are_unit_norm_balanced_and_capped() {
        let (model, scene) = fixture();
        let rows = collect_embeddings(&model, &scene, 4, 10, 0).unwrap();
        let present = downsample_labels(&scene.labels, 4).unwrap().classes();
        assert!(rows.len() <= 10 * present.len());
        let mut counts = std::collections::BTreeMap::new();
        for r in &rows {
            let norm = r.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
            assert_eq!(r.values.len(), 7);
            *counts.entry(r.class_id).or_insert(0) += 1;
        }
        let first = *counts.values().next().unwrap();
        assert!(counts.values().all(|&c| c == first));
    }

    #[test]
    fn zero_per_class_writes_header_only() {
        let (model, scene) = fixture();
        let rows = collect_embeddings(&model, &scene, 8, 0, 0).unwrap();
        let mut out = Vec::new();
        write_embeddings_csv(&rows, 3, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "class_id,scale,e0,e1,e2\n");
    }

    #[test]
    fn csv_has_nine_significant_digits() {
        let rows = vec![EmbeddingRow {
            class_id: 2,
            scale: 4,
            values: vec![1.0 / 3.0, -0.5],
        }];
        let mut out = Vec::new();
        write_embeddings_csv(&rows, 2, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "2,4,3.33333333e-1,-5.00000000e-1");
    }

    #[test]
    fn unknown_stride_errors() {
        let (model, scene) = fixture();
        assert!(collect_embeddings(&model, &scene, 64, 5, 0).is_err());
    }

    #[test]
    fn separation_is_finite() {
        let (model, scene) = fixture();
        let r = class_separation(&model, &scene, 4, 20, 1).unwrap();
        assert!(r.is_finite() && r > 0.0);
    }
}
