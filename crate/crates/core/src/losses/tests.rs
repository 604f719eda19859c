use super::*;
use crate::gradcheck::{check_gradients, Coords, Tolerance};
use crate::labels::{LabelMap, DEFAULT_IGNORE_INDEX};
use crate::sampler::{dense_anchor_set, sample_anchor_set, CandidatePool, SamplerRng};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn set<'t>(tape: &'t Tape, stride: usize, rows: Vec<Vec<f64>>, classes: Vec<u32>) -> AnchorSet<'t> {
    let d = rows[0].len();
    let n = rows.len();
    let z = tape.leaf(Tensor::new(vec![n, d], rows.concat()).unwrap(), true);
    let prov = (0..n).map(|i| (0, i, 0)).collect();
    AnchorSet::from_parts(z, classes, stride, prov).unwrap()
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, normalize: bool) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut r = Tensor::randn(&[d], 1.0, rng).into_data();
            if normalize {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter_mut().for_each(|v| *v /= norm);
            }
            r
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct transcription of the per-pair objective with explicit loops and no
/// shared code with the implementation. With `same_set`, row `i` of `b` is
/// the anchor itself and is skipped.
fn naive(a: &[Vec<f64>], ya: &[u32], b: &[Vec<f64>], yb: &[u32], tau: f64, same_set: bool) -> Option<f64> {
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..a.len() {
        let negs: Vec<f64> = (0..b.len())
            .filter(|&n| yb[n] != ya[i])
            .map(|n| (dot(&a[i], &b[n]) / tau).exp())
            .collect();
        let neg_sum: f64 = negs.iter().sum();
        let mut per = 0.0;
        let mut count = 0;
        for j in 0..b.len() {
            if yb[j] != ya[i] || (same_set && i == j) {
                continue;
            }
            let p = (dot(&a[i], &b[j]) / tau).exp();
            per += -(p / (p + neg_sum)).ln();
            count += 1;
        }
        if count > 0 {
            total += per / count as f64;
            anchors += 1;
        }
    }
    (anchors > 0).then(|| total / anchors as f64)
}

#[test]
fn no_negatives_gives_zero() {
    let tape = Tape::new();
    let s = set(&tape, 4, vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 0]);
    assert!(info_nce(&s, 0.1).unwrap().item().abs() < 1e-9);
}

#[test]
fn equal_similarities_give_ln2() {
    let tape = Tape::new();
    let s = set(&tape, 4, vec![vec![1.0, 0.0]; 3], vec![0, 0, 1]);
    let v = info_nce(&s, 0.1).unwrap().item();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-9, "{v}");
}

#[test]
fn scalar_example_at_tau_point_one() {
    // z_i = z_j with |z|^2 = 0.5 and z_n parallel so that z.z_n = 0.3
    let r = 0.5f64.sqrt();
    let tape = Tape::new();
    let s = set(
        &tape,
        4,
        vec![vec![r, 0.0], vec![r, 0.0], vec![0.3 / r, 0.0]],
        vec![0, 0, 1],
    );
    let v = info_nce(&s, 0.1).unwrap().item();
    let expected = (1.0 + (-2.0f64).exp()).ln();
    assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
    assert!((expected - 0.126928).abs() < 1e-6);
}

#[test]
fn no_positive_pairs_errors() {
    let tape = Tape::new();
    let s = set(&tape, 4, vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
    assert!(matches!(info_nce(&s, 0.1), Err(Error::NoPositivePairs)));
    let one = set(&tape, 4, vec![vec![1.0, 0.0]], vec![0]);
    assert!(matches!(info_nce(&one, 0.1), Err(Error::NoPositivePairs)));
}

#[test]
fn non_finite_similarity_errors() {
    let tape = Tape::new();
    let s = set(&tape, 4, vec![vec![f64::NAN, 0.0], vec![1.0, 0.0]], vec![0, 0]);
    assert!(matches!(info_nce(&s, 0.1), Err(Error::NonFinite(_))));
}

#[test]
fn cross_orthogonal_example() {
    let tape = Tape::new();
    let a = set(&tape, 4, vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
    let b = set(&tape, 32, vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
    let v = info_nce_cross(&a, &b, 1.0).unwrap().item();
    let expected = (1.0 + (-1.0f64).exp()).ln();
    assert!((v - expected).abs() < 1e-12);
    assert!((expected - 0.313262).abs() < 1e-6);
}

#[test]
fn cross_single_class_is_zero() {
    let tape = Tape::new();
    let a = set(&tape, 4, vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![2, 2]);
    let b = set(&tape, 8, vec![vec![0.5, 0.5]], vec![2]);
    assert!(info_nce_cross(&a, &b, 0.1).unwrap().item().abs() < 1e-12);
}

#[test]
fn cross_without_shared_classes_errors() {
    let tape = Tape::new();
    let a = set(&tape, 4, vec![vec![1.0, 0.0]], vec![0]);
    let b = set(&tape, 8, vec![vec![0.0, 1.0]], vec![1]);
    assert!(matches!(info_nce_cross(&a, &b, 0.1), Err(Error::NoCrossScalePositives)));
}

#[test]
fn cross_of_identical_sets_equals_info_nce() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let rows = random_rows(&mut rng, 10, 6, true);
    let classes = vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
    let tape = Tape::new();
    let a = set(&tape, 4, rows.clone(), classes.clone());
    let within = info_nce(&a, 0.1).unwrap().item();
    let cross = info_nce_cross(&a, &a, 0.1).unwrap().item();
    assert!((within - cross).abs() < 1e-12, "{within} vs {cross}");
}

#[test]
fn matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for trial in 0..10 {
        let n = 6 + trial;
        let rows = random_rows(&mut rng, n, 5, trial % 2 == 0);
        let classes: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
        let tape = Tape::new();
        let s = set(&tape, 4, rows.clone(), classes.clone());
        let v = info_nce(&s, 0.2).unwrap().item();
        let o = naive(&rows, &classes, &rows, &classes, 0.2, true).unwrap();
        assert!((v - o).abs() < 1e-10, "{v} vs {o}");

        let rows_b = random_rows(&mut rng, 4, 5, true);
        let classes_b = vec![0, 1, 1, 2];
        let b = set(&tape, 16, rows_b.clone(), classes_b.clone());
        let cv = info_nce_cross(&s, &b, 0.2).unwrap().item();
        let co = 0.5
            * (naive(&rows, &classes, &rows_b, &classes_b, 0.2, false).unwrap()
                + naive(&rows_b, &classes_b, &rows, &classes, 0.2, false).unwrap());
        assert!((cv - co).abs() < 1e-10, "{cv} vs {co}");
    }
}

#[test]
fn info_nce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = Tensor::randn(&[9, 4], 1.0, &mut rng);
    let classes = vec![0, 1, 2, 0, 1, 2, 0, 0, 1];
    let report = check_gradients("info_nce", &[x], &Coords::All, Tolerance::default(), |_, v| {
        let z = v[0].l2_normalize_rows()?;
        let prov = (0..9).map(|i| (0, i, 0)).collect();
        info_nce(&AnchorSet::from_parts(z, classes.clone(), 4, prov)?, 0.1)
    })
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn cross_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let xa = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let xb = Tensor::randn(&[4, 4], 1.0, &mut rng);
    let (ca, cb) = (vec![0, 1, 2, 0, 1, 1], vec![1, 0, 2, 2]);
    let report = check_gradients(
        "info_nce_cross",
        &[xa, xb],
        &Coords::All,
        Tolerance::default(),
        |_, v| {
            let a = AnchorSet::from_parts(
                v[0].l2_normalize_rows()?,
                ca.clone(),
                4,
                (0..6).map(|i| (0, i, 0)).collect(),
            )?;
            let b = AnchorSet::from_parts(
                v[1].l2_normalize_rows()?,
                cb.clone(),
                16,
                (0..4).map(|i| (0, i, 0)).collect(),
            )?;
            info_nce_cross(&a, &b, 0.1)
        },
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn both_cross_sets_receive_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let tape = Tape::new();
    let a = set(&tape, 4, random_rows(&mut rng, 5, 3, true), vec![0, 1, 0, 1, 2]);
    let b = set(&tape, 32, random_rows(&mut rng, 3, 3, true), vec![1, 0, 2]);
    let loss = info_nce_cross(&a, &b, 0.1).unwrap();
    assert!(loss.item() > 0.0);
    tape.backward(loss).unwrap();
    for s in [&a, &b] {
        let g = s.embeddings().grad().unwrap();
        assert!(g.data().iter().any(|v| v.abs() > 0.0));
    }
}

#[test]
fn multi_scale_weighted_sum_example() {
    // per-scale losses [1, 2, 3, 4] under the default weights
    let sum: f64 = [1.0, 2.0, 3.0, 4.0]
        .iter()
        .zip(LossConfig::default().scale_weights.iter().map(|w| w.weight))
        .map(|(l, w)| l * w)
        .sum();
    assert!((sum - 4.0).abs() < 1e-12);
}

fn two_scale_sets(tape: &Tape, seed: u64) -> BTreeMap<usize, AnchorSet<'_>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = BTreeMap::new();
    m.insert(
        4,
        set(tape, 4, random_rows(&mut rng, 8, 4, true), vec![0, 1, 2, 0, 1, 2, 0, 1]),
    );
    m.insert(8, set(tape, 8, random_rows(&mut rng, 5, 4, true), vec![0, 1, 2, 2, 1]));
    m
}

fn two_scale_cfg() -> LossConfig {
    LossConfig {
        scale_weights: vec![
            ScaleWeight { stride: 4, weight: 1.0 },
            ScaleWeight { stride: 8, weight: 0.7 },
        ],
        cross_pairs: vec![CrossPair {
            fine: 4,
            coarse: 8,
            weight: 1.0,
        }],
        ..LossConfig::default()
    }
}

#[test]
fn multi_scale_matches_recomposition() {
    let tape = Tape::new();
    let sets = two_scale_sets(&tape, 26);
    let cfg = two_scale_cfg();
    let ms = multi_scale_loss(&tape, &sets, &cfg).unwrap();
    let oracle = info_nce(&sets[&4], cfg.tau).unwrap().item() + 0.7 * info_nce(&sets[&8], cfg.tau).unwrap().item();
    assert!((ms.loss.item() - oracle).abs() < 1e-12);
    assert_eq!(ms.terms.len(), 2);
}

#[test]
fn multi_scale_single_scale_equals_info_nce() {
    let tape = Tape::new();
    let sets = two_scale_sets(&tape, 27);
    let cfg = LossConfig {
        scale_weights: vec![ScaleWeight { stride: 4, weight: 1.0 }],
        cross_pairs: vec![],
        ..LossConfig::default()
    };
    let ms = multi_scale_loss(&tape, &sets, &cfg).unwrap();
    assert_eq!(ms.loss.item(), info_nce(&sets[&4], cfg.tau).unwrap().item());
}

#[test]
fn multi_scale_skips_degenerate_scale() {
    let tape = Tape::new();
    let mut sets = two_scale_sets(&tape, 28);
    sets.insert(
        8,
        set(
            &tape,
            8,
            vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
            vec![0, 1],
        ),
    );
    let cfg = two_scale_cfg();
    let ms = multi_scale_loss(&tape, &sets, &cfg).unwrap();
    assert_eq!(ms.loss.item(), info_nce(&sets[&4], cfg.tau).unwrap().item());
    assert_eq!(ms.terms[&(8, 8)], 0.0);

    sets.insert(4, set(&tape, 4, vec![vec![1.0, 0.0, 0.0, 0.0]], vec![0]));
    assert!(matches!(
        multi_scale_loss(&tape, &sets, &cfg),
        Err(Error::NoPositivePairs)
    ));
}

#[test]
fn multi_scale_missing_set_errors() {
    let tape = Tape::new();
    let mut sets = two_scale_sets(&tape, 29);
    sets.remove(&8);
    assert!(matches!(
        multi_scale_loss(&tape, &sets, &two_scale_cfg()),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        cross_scale_loss(&tape, &sets, &two_scale_cfg()),
        Err(Error::Config(_))
    ));
}

#[test]
fn cross_scale_sums_pairs() {
    let tape = Tape::new();
    let sets = two_scale_sets(&tape, 30);
    let mut cfg = two_scale_cfg();
    let one = cross_scale_loss(&tape, &sets, &cfg).unwrap().loss.item();
    assert_eq!(one, info_nce_cross(&sets[&4], &sets[&8], cfg.tau).unwrap().item());
    cfg.cross_pairs.push(CrossPair {
        fine: 4,
        coarse: 8,
        weight: 1.0,
    });
    let two = cross_scale_loss(&tape, &sets, &cfg).unwrap().loss.item();
    assert!((two - 2.0 * one).abs() < 1e-12);
    cfg.cross_pairs.clear();
    assert_eq!(cross_scale_loss(&tape, &sets, &cfg).unwrap().loss.item(), 0.0);
}

#[test]
fn total_loss_composition() {
    // arithmetic of the combined objective with the default lambdas
    let cfg = LossConfig::default();
    assert!((1.0 + cfg.lambda_cms * 2.0 + cfg.lambda_ccs * 3.0 - 1.5).abs() < 1e-12);

    let tape = Tape::new();
    let sets = two_scale_sets(&tape, 31);
    let cfg = two_scale_cfg();
    let ce = tape.leaf(Tensor::scalar(0.8), true);
    let t = total_loss(&tape, ce, &sets, &cfg).unwrap();
    let expected = 0.8 + 0.1 * t.cms + 0.1 * t.ccs;
    assert!((t.total.item() - expected).abs() < 1e-12);
    assert!(t.cms > 0.0 && t.ccs > 0.0);

    let ce_only = total_loss(&tape, ce, &sets, &LossConfig::ce_only()).unwrap();
    assert_eq!(ce_only.total.item(), 0.8);
    assert!(ce_only.terms.is_empty());
}

#[test]
fn total_loss_rejects_non_finite_ce() {
    let tape = Tape::new();
    let sets = BTreeMap::new();
    let ce = tape.constant(Tensor::scalar(f64::INFINITY));
    assert!(matches!(
        total_loss(&tape, ce, &sets, &LossConfig::ce_only()),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn config_validation() {
    assert!(LossConfig::default().validate().is_ok());
    let bad_tau = LossConfig {
        tau: 0.0,
        ..LossConfig::default()
    };
    assert!(bad_tau.validate().is_err());
    let mut bad_pair = LossConfig::default();
    bad_pair.cross_pairs.push(CrossPair {
        fine: 4,
        coarse: 64,
        weight: 1.0,
    });
    assert!(bad_pair.validate().is_err());
    let mut neg = LossConfig::default();
    neg.scale_weights[0].weight = -1.0;
    assert!(neg.validate().is_err());
    assert_eq!(LossConfig::default().active_strides(), vec![4, 8, 16, 32]);
    assert!(LossConfig::ce_only().active_strides().is_empty());
}

#[test]
fn temperature_monotone_on_hard_instance() {
    // every negative is closer to the anchor than its positive
    let tape = Tape::new();
    let k = 1.0 / 3f64.sqrt();
    let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![k, k, k], vec![k, k, -k]];
    let s = set(&tape, 4, rows, vec![0, 0, 1, 1]);
    let vals: Vec<f64> = [0.05, 0.1, 0.5, 1.0]
        .iter()
        .map(|&t| info_nce(&s, t).unwrap().item())
        .collect();
    for w in vals.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{vals:?}");
    }
}

fn exhaustive_labels() -> LabelMap {
    // two images of 2x4 with four pixels per class
    LabelMap::new(
        2,
        2,
        4,
        vec![0, 0, 1, 1, 2, 2, 3, 3, 3, 3, 2, 2, 1, 1, 0, 0],
        DEFAULT_IGNORE_INDEX,
    )
    .unwrap()
}

#[test]
fn sampled_equals_dense_when_exhaustive() {
    let labels = exhaustive_labels();
    let pool = CandidatePool::from_labels(&labels, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let tape = Tape::new();
    let z = tape.leaf(Tensor::randn(&[2, 6, 2, 4], 1.0, &mut rng), true);
    let dense = info_nce(&dense_anchor_set(&pool, &z, true).unwrap(), 0.1)
        .unwrap()
        .item();
    for step in 0..5 {
        let mut r = SamplerRng::new(3).stream(step, 4);
        let sampled = info_nce(&sample_anchor_set(&pool, &z, 64, &mut r, true).unwrap(), 0.1)
            .unwrap()
            .item();
        assert!((sampled - dense).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn permutation_invariant(seed in 0u64..10_000, n in 4usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, n, 4, true);
        let classes: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let tape = Tape::new();
        let a = info_nce(&set(&tape, 4, rows.clone(), classes.clone()), 0.1).unwrap().item();
        let b = info_nce(
            &set(&tape, 4, order.iter().map(|&i| rows[i].clone()).collect(), order.iter().map(|&i| classes[i]).collect()),
            0.1,
        ).unwrap().item();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn non_negative_and_bounded(seed in 0u64..10_000, n in 3usize..12, tau in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, n, 3, true);
        let classes: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let tape = Tape::new();
        let s = set(&tape, 4, rows.clone(), classes.clone());
        let v = info_nce(&s, tau).unwrap().item();
        let max_neg = n - n / 2;
        let bound = (1.0 + max_neg as f64 * (2.0 / tau).exp()).ln();
        prop_assert!(v >= 0.0);
        prop_assert!(v <= bound + 1e-12);
        let other = set(&tape, 8, random_rows(&mut rng, 4, 3, true), vec![0, 1, 1, 0]);
        prop_assert!(info_nce_cross(&s, &other, tau).unwrap().item() >= 0.0);
    }

    #[test]
    fn dense_equivalence(seed in 0u64..10_000) {
        let labels = exhaustive_labels();
        let pool = CandidatePool::from_labels(&labels, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let z = tape.leaf(Tensor::randn(&[2, 5, 2, 4], 1.0, &mut rng), true);
        let dense = info_nce(&dense_anchor_set(&pool, &z, true).unwrap(), 0.1).unwrap().item();
        let mut r = SamplerRng::new(seed).stream(0, 4);
        let sampled = info_nce(&sample_anchor_set(&pool, &z, 16, &mut r, true).unwrap(), 0.1).unwrap().item();
        prop_assert!((sampled - dense).abs() < 1e-10);
    }
}
