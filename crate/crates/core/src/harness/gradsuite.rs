//! Finite-difference checks of the contrastive terms and the full objective
//! on small random instances.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::anchor_sets;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::gradcheck::{check_gradients, Coords, GradCheckReport, Tolerance};
use crate::labels::{build_pyramid, LabelMap};
use crate::losses::{cross_scale_loss, info_nce, multi_scale_loss, total_loss, LossConfig};
use crate::nn::Ctx;
use crate::sampler::{sample_anchor_set, select_anchors, AnchorSet, CandidatePool, SamplerRng};
use crate::segnet::{generate_scene, ModelSpec, SceneSpec, SegModel, STRIDES};

/// Embedding width used by the suite.
pub const SUITE_DIM: usize = 16;

/// Two 64x64 images with three classes (16x16 at stride 4) and random
/// projected maps for every stride.
pub struct ToyInstance {
    pub seed: u64,
    pub images: Tensor,
    pub labels: LabelMap,
    pub embeddings: BTreeMap<usize, Tensor>,
}

pub fn toy_instance(seed: u64) -> Result<ToyInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SceneSpec {
        n_classes: 3,
        shapes_min: 2,
        shapes_max: 3,
        size_min: 16,
        size_max: 32,
        rare_class: None,
        overlap_classes: None,
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec, 2, &mut rng)?;
    let embeddings = STRIDES
        .iter()
        .map(|&s| (s, Tensor::randn(&[2, SUITE_DIM, 64 / s, 64 / s], 1.0, &mut rng)))
        .collect();
    Ok(ToyInstance {
        seed,
        images: scene.images,
        labels: scene.labels,
        embeddings,
    })
}

fn sets_from<'t>(
    inst: &ToyInstance,
    vars: &[Var<'t>],
    strides: &[usize],
    cfg: &LossConfig,
) -> Result<BTreeMap<usize, AnchorSet<'t>>> {
    let pyramid = build_pyramid(&inst.labels, &STRIDES)?;
    let sampler = SamplerRng::new(inst.seed);
    let mut sets = BTreeMap::new();
    for (&s, z) in strides.iter().zip(vars) {
        let pool = CandidatePool::from_labels(pyramid.get(s).expect("level"), s);
        let mut rng = sampler.stream(0, s);
        sets.insert(
            s,
            sample_anchor_set(&pool, z, cfg.a_max, &mut rng, cfg.normalize_embeddings)?,
        );
    }
    Ok(sets)
}

/// Flat indices of every channel at up to `max_positions` sampled anchor
/// positions of each map: the coordinates with nonzero gradient.
fn anchor_coords(
    inst: &ToyInstance,
    strides: &[usize],
    cfg: &LossConfig,
    max_positions: usize,
) -> Result<Vec<Vec<usize>>> {
    let pyramid = build_pyramid(&inst.labels, &STRIDES)?;
    let sampler = SamplerRng::new(inst.seed);
    let mut pick = ChaCha8Rng::seed_from_u64(inst.seed ^ 0xc00d);
    let mut out = Vec::new();
    for &s in strides {
        let pool = CandidatePool::from_labels(pyramid.get(s).expect("level"), s);
        let sel = select_anchors(&pool, cfg.a_max, &mut sampler.stream(0, s))?;
        let (h, w) = pool.spatial();
        let n = sel.indices.len();
        let chosen = sample(&mut pick, n, max_positions.min(n)).into_vec();
        let mut coords = Vec::new();
        for k in chosen {
            let c = pool.entries()[sel.indices[k]];
            for ch in 0..SUITE_DIM {
                coords.push(((c.batch * SUITE_DIM + ch) * h + c.row) * w + c.col);
            }
        }
        out.push(coords);
    }
    Ok(out)
}

fn suite_model() -> Result<SegModel> {
    let spec = ModelSpec {
        embedding_dim: SUITE_DIM,
        ..ModelSpec::default()
    };
    SegModel::new(&spec, 3, LossConfig::default().loss_position, 11)
}

/// One report per (term, instance): `L_c`, `L_cms`, `L_ccs` and `L_total`.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let cfg = LossConfig::default();
    let tol = Tolerance::default();
    let model = suite_model()?;
    let mut reports = Vec::new();
    for k in 0..instances {
        let inst = toy_instance(seed.wrapping_add(k as u64))?;

        let z4 = vec![inst.embeddings[&4].clone()];
        let coords = Coords::Explicit(anchor_coords(&inst, &[4], &cfg, 24)?);
        reports.push(check_gradients(&format!("L_c #{k}"), &z4, &coords, tol, |_, v| {
            let sets = sets_from(&inst, v, &[4], &cfg)?;
            info_nce(&sets[&4], cfg.tau)
        })?);

        let all: Vec<Tensor> = STRIDES.iter().map(|s| inst.embeddings[s].clone()).collect();
        let coords = Coords::Explicit(anchor_coords(&inst, &STRIDES, &cfg, 8)?);
        reports.push(check_gradients(&format!("L_cms #{k}"), &all, &coords, tol, |t, v| {
            let sets = sets_from(&inst, v, &STRIDES, &cfg)?;
            Ok(multi_scale_loss(t, &sets, &cfg)?.loss)
        })?);
        reports.push(check_gradients(&format!("L_ccs #{k}"), &all, &coords, tol, |t, v| {
            let sets = sets_from(&inst, v, &STRIDES, &cfg)?;
            Ok(cross_scale_loss(t, &sets, &cfg)?.loss)
        })?);

        let params = model.params.values().to_vec();
        let coords = Coords::Sample {
            per_input: 3,
            seed: seed.wrapping_add(k as u64),
        };
        let sampler = SamplerRng::new(inst.seed);
        reports.push(check_gradients(
            &format!("L_total #{k}"),
            &params,
            &coords,
            tol,
            |t: &Tape, v| {
                let ctx = Ctx::new(t, v, &model.buffers, true);
                let fwd = model.forward(&ctx, &t.constant(inst.images.clone()))?;
                let ce = fwd.logits.softmax_cross_entropy(&inst.labels)?;
                let sets = anchor_sets(&model, &ctx, &fwd, &inst.labels, &cfg, &sampler, 0)?;
                Ok(total_loss(t, ce, &sets, &cfg)?.total)
            },
        )?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_instance_has_three_classes_at_stride_four() {
        let inst = toy_instance(0).unwrap();
        assert_eq!(inst.labels.shape(), [2, 64, 64]);
        assert_eq!(inst.embeddings[&4].shape(), &[2, SUITE_DIM, 16, 16]);
        let p = build_pyramid(&inst.labels, &[4]).unwrap();
        assert!(p.get(4).unwrap().classes().len() >= 2);
    }

    #[test]
    fn contrastive_terms_pass_on_one_instance() {
        let cfg = LossConfig::default();
        let inst = toy_instance(5).unwrap();
        let all: Vec<Tensor> = STRIDES.iter().map(|s| inst.embeddings[s].clone()).collect();
        let coords = Coords::Explicit(anchor_coords(&inst, &STRIDES, &cfg, 4).unwrap());
        let r = check_gradients("L_ccs", &all, &coords, Tolerance::default(), |t, v| {
            let sets = sets_from(&inst, v, &STRIDES, &cfg)?;
            Ok(cross_scale_loss(t, &sets, &cfg)?.loss)
        })
        .unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.checked > 0);
    }
}
