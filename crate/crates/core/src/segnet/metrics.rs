use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Result<Self> {
        if n_classes < 1 {
            return Err(Error::InvalidArgument("n_classes must be at least 1".into()));
        }
        Ok(Self {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    /// Accumulates one batch. Pixels whose ground truth (or prediction) is the
    /// ignore index are skipped.
    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::Shape {
                op: "confusion matrix",
                lhs: pred.shape().to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if gt.is_ignored(g) || pred.is_ignored(p) {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.n || g >= self.n {
                return Err(Error::InvalidArgument(format!(
                    "label {} out of range for {} classes",
                    p.max(g),
                    self.n
                )));
            }
            self.counts[g * self.n + p] += 1;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from both
    /// prediction and ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.n).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let fp: u64 = (0..self.n).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn report(&self, subgroup: &[u32]) -> MiouReport {
        let per_class = self.iou();
        let miou = mean_present(per_class.iter().copied());
        let subgroup_miou = if subgroup.is_empty() {
            None
        } else {
            mean_present(subgroup.iter().map(|&c| per_class.get(c as usize).copied().flatten()))
        };
        MiouReport {
            per_class,
            miou,
            subgroup: subgroup.to_vec(),
            subgroup_miou,
        }
    }
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in prediction or ground truth.
    pub miou: Option<f64>,
    pub subgroup: Vec<u32>,
    pub subgroup_miou: Option<f64>,
}

pub fn miou(pred: &LabelMap, gt: &LabelMap, n_classes: usize, subgroup: &[u32]) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(n_classes)?;
    cm.update(pred, gt)?;
    Ok(cm.report(subgroup))
}

/// Mean intra-class over mean inter-class pairwise cosine distance of the rows
/// of an `n x d` matrix. `None` unless both kinds of pair exist.
pub fn separation_ratio(rows: &[f64], d: usize, classes: &[u32]) -> Option<f64> {
    let n = classes.len();
    if d == 0 || rows.len() != n * d {
        return None;
    }
    let unit: Vec<f64> = rows
        .chunks(d)
        .flat_map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(move |v| v / norm)
        })
        .collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let cos: f64 = unit[i * d..(i + 1) * d]
                .iter()
                .zip(&unit[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            let dist = 1.0 - cos;
            if classes[i] == classes[j] {
                intra += dist;
                n_intra += 1;
            } else {
                inter += dist;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 || inter == 0.0 {
        return None;
    }
    Some((intra / n_intra as f64) / (inter / n_inter as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::DEFAULT_IGNORE_INDEX;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, data: Vec<u32>) -> LabelMap {
        LabelMap::new(1, h, w, data, DEFAULT_IGNORE_INDEX).unwrap()
    }

    #[test]
    fn identical_maps_score_one() {
        let m = map(2, 3, vec![0, 1, 2, 2, 1, 0]);
        let r = miou(&m, &m, 3, &[]).unwrap();
        assert_eq!(r.miou, Some(1.0));
        assert!(r.per_class.iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let gt = map(1, 4, vec![1, 1, 0, 0]);
        let pred = map(1, 4, vec![0, 0, 1, 1]);
        let r = miou(&pred, &gt, 2, &[]).unwrap();
        assert_eq!(r.per_class[1], Some(0.0));
    }

    #[test]
    fn half_overlap_is_one_third() {
        // 2x2 masks offset by one column inside a 2x3 canvas
        let gt = map(2, 3, vec![1, 1, 0, 1, 1, 0]);
        let pred = map(2, 3, vec![0, 1, 1, 0, 1, 1]);
        let r = miou(&pred, &gt, 2, &[]).unwrap();
        // brute-force confusion oracle
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, g) in pred.data().iter().zip(gt.data()) {
            match (*p == 1, *g == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let oracle = tp as f64 / (tp + fp + fn_) as f64;
        assert!((oracle - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class[1].unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_excluded_and_ignore_skipped() {
        let gt = map(1, 4, vec![0, 0, DEFAULT_IGNORE_INDEX, 1]);
        let pred = map(1, 4, vec![0, 0, 1, 1]);
        let r = miou(&pred, &gt, 4, &[1, 3]).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.subgroup_miou, Some(1.0));
    }

    #[test]
    fn subgroup_is_mean_of_listed_classes() {
        let gt = map(2, 4, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        let pred = map(2, 4, vec![0, 1, 2, 2, 0, 0, 2, 3]);
        let r = miou(&pred, &gt, 4, &[1, 3]).unwrap();
        let by_hand = (r.per_class[1].unwrap() + r.per_class[3].unwrap()) / 2.0;
        assert_eq!(r.subgroup_miou, Some(by_hand));
        assert!((r.per_class[1].unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_classes_errors() {
        let m = map(1, 1, vec![0]);
        assert!(miou(&m, &m, 0, &[]).is_err());
    }

    #[test]
    fn separation_ratio_small_for_clustered_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 8;
        let mut rows = vec![];
        let mut classes = vec![];
        for c in 0..3u32 {
            for _ in 0..10 {
                for k in 0..d {
                    let center = if k == c as usize { 1.0 } else { 0.0 };
                    rows.push(center + 0.05 * rng.random::<f64>());
                }
                classes.push(c);
            }
        }
        let r = separation_ratio(&rows, d, &classes).unwrap();
        assert!(r > 0.0 && r < 0.1, "{r}");
        assert!(separation_ratio(&rows[..d * 10], d, &classes[..10]).is_none());
    }
}
