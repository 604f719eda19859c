//! Supervised InfoNCE over anchor sets, its multi-scale and cross-scale
//! combinations, and the total training objective.
//!
//! Every contrastive term reduces to a directed pass: each anchor of one set
//! is scored against all rows of a second set (possibly the same set), with
//! positives and negatives chosen by class equality. For a positive pair
//! `(i, j)` with negatives `N(i)` the per-term loss is
//!
//! ```text
//! l(i, j) = softplus(M_i - s_ij),   M_i = logsumexp_{n in N(i)} s_in,   s = z_i . z_j / tau
//! ```
//!
//! which equals `-log(e^{s_ij} / (e^{s_ij} + sum_n e^{s_in}))` and is finite
//! for any similarity range. Gradients with respect to the similarity matrix
//! are formed during the forward pass and handed to the tape as a single
//! pairwise node.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::sampler::AnchorSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossPosition {
    /// Raw encoder features.
    Backbone,
    /// Head-fused (top-down) features.
    Neck,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleWeight {
    pub stride: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossPair {
    pub fine: usize,
    pub coarse: usize,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub scale_weights: Vec<ScaleWeight>,
    pub cross_pairs: Vec<CrossPair>,
    pub lambda_cms: f64,
    pub lambda_ccs: f64,
    pub a_max: usize,
    pub normalize_embeddings: bool,
    pub loss_position: LossPosition,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            scale_weights: [(4, 1.0), (8, 0.7), (16, 0.4), (32, 0.1)]
                .into_iter()
                .map(|(stride, weight)| ScaleWeight { stride, weight })
                .collect(),
            cross_pairs: vec![
                CrossPair {
                    fine: 4,
                    coarse: 32,
                    weight: 1.0,
                },
                CrossPair {
                    fine: 4,
                    coarse: 16,
                    weight: 1.0,
                },
            ],
            lambda_cms: 0.1,
            lambda_ccs: 0.1,
            a_max: 2048,
            normalize_embeddings: true,
            loss_position: LossPosition::Backbone,
        }
    }
}

impl LossConfig {
    /// Cross-entropy only.
    pub fn ce_only() -> Self {
        Self {
            lambda_cms: 0.0,
            lambda_ccs: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        let weights = self
            .scale_weights
            .iter()
            .map(|w| w.weight)
            .chain(self.cross_pairs.iter().map(|p| p.weight))
            .chain([self.lambda_cms, self.lambda_ccs]);
        for w in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weights must be finite and >= 0, got {w}")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for w in &self.scale_weights {
            if !seen.insert(w.stride) {
                return Err(Error::Config(format!("stride {} listed twice", w.stride)));
            }
        }
        for p in &self.cross_pairs {
            if !seen.contains(&p.fine) || !seen.contains(&p.coarse) {
                return Err(Error::Config(format!(
                    "cross pair ({}, {}) references a stride without a scale weight",
                    p.fine, p.coarse
                )));
            }
            if p.fine == p.coarse {
                return Err(Error::Config(format!(
                    "cross pair ({0}, {0}) pairs a scale with itself",
                    p.fine
                )));
            }
        }
        if self.a_max == 0 {
            return Err(Error::Config("a_max must be positive".into()));
        }
        Ok(())
    }

    pub fn weight_for(&self, stride: usize) -> Option<f64> {
        self.scale_weights.iter().find(|w| w.stride == stride).map(|w| w.weight)
    }

    /// Strides whose anchor sets are needed under the current weights.
    pub fn active_strides(&self) -> Vec<usize> {
        let mut s = std::collections::BTreeSet::new();
        if self.lambda_cms > 0.0 {
            s.extend(self.scale_weights.iter().filter(|w| w.weight > 0.0).map(|w| w.stride));
        }
        if self.lambda_ccs > 0.0 {
            for p in self.cross_pairs.iter().filter(|p| p.weight > 0.0) {
                s.insert(p.fine);
                s.insert(p.coarse);
            }
        }
        s.into_iter().collect()
    }
}

/// Row identity used for self-exclusion: `(stride, batch, row, col)`.
type RowKey = (usize, usize, usize, usize);

fn row_keys(set: &AnchorSet<'_>) -> Vec<RowKey> {
    set.provenance()
        .iter()
        .map(|&(b, r, c)| (set.stride(), b, r, c))
        .collect()
}

/// Value and similarity-gradient of one directed pass.
struct Directed {
    value: f64,
    /// `dL/dS` where `S = Za Zb^T / tau`, row-major `n_a x n_b`.
    dlds: Vec<f64>,
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

struct Side<'a> {
    z: &'a [f64],
    classes: &'a [u32],
    keys: &'a [RowKey],
}

/// Scores every row of `a` against the rows of `b`. Returns `None` when no
/// row of `a` has a positive in `b`.
fn directed(a: &Side<'_>, b: &Side<'_>, d: usize, tau: f64) -> Result<Option<Directed>> {
    let (na, nb) = (a.classes.len(), b.classes.len());
    let mut sim = vec![0.0; na * nb];
    kernels::gemm(na, d, nb, 1.0 / tau, a.z, false, b.z, true, 0.0, &mut sim);
    if sim.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    let mut dlds = vec![0.0; na * nb];
    // (per-anchor loss averaged over its positives) or None when it has none
    let rows: Vec<Option<f64>> = dlds
        .par_chunks_mut(nb)
        .zip(sim.par_chunks(nb))
        .enumerate()
        .map(|(i, (grow, srow))| {
            let yi = a.classes[i];
            let mut neg_max = f64::NEG_INFINITY;
            let mut n_pos = 0usize;
            for j in 0..nb {
                if b.classes[j] != yi {
                    neg_max = neg_max.max(srow[j]);
                } else if b.keys[j] != a.keys[i] {
                    n_pos += 1;
                }
            }
            if n_pos == 0 {
                return None;
            }
            let lse_neg = if neg_max == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                let s: f64 = (0..nb)
                    .filter(|&j| b.classes[j] != yi)
                    .map(|j| (srow[j] - neg_max).exp())
                    .sum();
                neg_max + s.ln()
            };
            let inv_pos = 1.0 / n_pos as f64;
            let mut loss = 0.0;
            let mut q_sum = 0.0;
            for j in 0..nb {
                if b.classes[j] == yi && b.keys[j] != a.keys[i] {
                    let u = lse_neg - srow[j];
                    loss += softplus(u);
                    let q = sigmoid(u);
                    q_sum += q;
                    grow[j] = -q * inv_pos;
                }
            }
            if lse_neg > f64::NEG_INFINITY {
                let coef = q_sum * inv_pos;
                for j in 0..nb {
                    if b.classes[j] != yi {
                        grow[j] = coef * (srow[j] - lse_neg).exp();
                    }
                }
            }
            Some(loss * inv_pos)
        })
        .collect();
    let contributing = rows.iter().flatten().count();
    if contributing == 0 {
        return Ok(None);
    }
    let value = rows.iter().flatten().sum::<f64>() / contributing as f64;
    let scale = 1.0 / contributing as f64;
    dlds.iter_mut().for_each(|g| *g *= scale);
    Ok(Some(Directed { value, dlds }))
}

/// Within-set supervised InfoNCE, averaged over anchors that have at least
/// one positive.
pub fn info_nce<'t>(anchors: &AnchorSet<'t>, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if anchors.len() < 2 {
        return Err(Error::NoPositivePairs);
    }
    let z = anchors.embeddings();
    let keys = row_keys(anchors);
    let d = anchors.dim();
    let result = {
        let zv = z.value();
        let side = Side {
            z: zv.data(),
            classes: anchors.class_ids(),
            keys: &keys,
        };
        directed(&side, &side, d, tau)?
    };
    let Directed { value, dlds } = result.ok_or(Error::NoPositivePairs)?;
    Ok(z.tape().record_pairwise(*z, *z, value, dlds, tau))
}

/// Cross-set InfoNCE: positives and negatives of each anchor come from the
/// other set. The value is the mean of both directions, so both sets receive
/// gradient.
pub fn info_nce_cross<'t>(a: &AnchorSet<'t>, b: &AnchorSet<'t>, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::NoCrossScalePositives);
    }
    if a.dim() != b.dim() {
        return crate::error::shape_err("info_nce_cross", &a.embeddings().shape(), &b.embeddings().shape());
    }
    let (ka, kb) = (row_keys(a), row_keys(b));
    let d = a.dim();
    let (ab, ba) = {
        let (za, zb) = (a.embeddings().value(), b.embeddings().value());
        let sa = Side {
            z: za.data(),
            classes: a.class_ids(),
            keys: &ka,
        };
        let sb = Side {
            z: zb.data(),
            classes: b.class_ids(),
            keys: &kb,
        };
        (directed(&sa, &sb, d, tau)?, directed(&sb, &sa, d, tau)?)
    };
    let (Some(ab), Some(ba)) = (ab, ba) else {
        return Err(Error::NoCrossScalePositives);
    };
    let (na, nb) = (a.len(), b.len());
    let mut dlds = ab.dlds;
    for i in 0..na {
        for j in 0..nb {
            dlds[i * nb + j] = 0.5 * (dlds[i * nb + j] + ba.dlds[j * na + i]);
        }
    }
    let value = 0.5 * (ab.value + ba.value);
    let tape = a.embeddings().tape();
    Ok(tape.record_pairwise(*a.embeddings(), *b.embeddings(), value, dlds, tau))
}

/// A weighted sum of contrastive terms plus the individual unweighted values.
pub struct WeightedLoss<'t> {
    pub loss: Var<'t>,
    pub terms: BTreeMap<(usize, usize), f64>,
}

fn weighted_sum<'t>(tape: &'t Tape, parts: Vec<(f64, Var<'t>)>) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for (w, v) in parts {
        let term = v.scale(w);
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// `sum_s w_s * info_nce(A_s)` in ascending stride order. Scales without
/// positive pairs contribute zero; it is an error only if every weighted
/// scale is degenerate. Terms are keyed `(s, s)`.
pub fn multi_scale_loss<'t>(
    tape: &'t Tape,
    sets: &BTreeMap<usize, AnchorSet<'t>>,
    cfg: &LossConfig,
) -> Result<WeightedLoss<'t>> {
    let mut parts = Vec::new();
    let mut terms = BTreeMap::new();
    let mut weighted = 0;
    let mut scales: Vec<_> = cfg.scale_weights.iter().filter(|w| w.weight > 0.0).collect();
    scales.sort_by_key(|w| w.stride);
    for sw in scales {
        weighted += 1;
        let set = sets
            .get(&sw.stride)
            .ok_or_else(|| Error::Config(format!("no anchor set for stride {}", sw.stride)))?;
        match info_nce(set, cfg.tau) {
            Ok(v) => {
                terms.insert((sw.stride, sw.stride), v.item());
                parts.push((sw.weight, v));
            }
            Err(Error::NoPositivePairs) => {
                log::warn!("stride {}: no positive pairs, term skipped", sw.stride);
                terms.insert((sw.stride, sw.stride), 0.0);
            }
            Err(e) => return Err(e),
        }
    }
    if weighted > 0 && parts.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    Ok(WeightedLoss {
        loss: weighted_sum(tape, parts)?,
        terms,
    })
}

/// `sum_(s,s') w_(s,s') * info_nce_cross(A_s, A_s')`. A pair without shared
/// classes contributes zero with a warning.
pub fn cross_scale_loss<'t>(
    tape: &'t Tape,
    sets: &BTreeMap<usize, AnchorSet<'t>>,
    cfg: &LossConfig,
) -> Result<WeightedLoss<'t>> {
    let mut parts = Vec::new();
    let mut terms = BTreeMap::new();
    for p in &cfg.cross_pairs {
        let (Some(a), Some(b)) = (sets.get(&p.fine), sets.get(&p.coarse)) else {
            return Err(Error::Config(format!(
                "cross pair ({}, {}) has no anchor set",
                p.fine, p.coarse
            )));
        };
        if p.weight == 0.0 {
            continue;
        }
        match info_nce_cross(a, b, cfg.tau) {
            Ok(v) => {
                terms.insert((p.fine, p.coarse), v.item());
                parts.push((p.weight, v));
            }
            Err(Error::NoCrossScalePositives) => {
                log::warn!(
                    "pair ({}, {}): no cross-scale positives, term skipped",
                    p.fine,
                    p.coarse
                );
                terms.insert((p.fine, p.coarse), 0.0);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(WeightedLoss {
        loss: weighted_sum(tape, parts)?,
        terms,
    })
}

pub struct TotalLoss<'t> {
    pub total: Var<'t>,
    pub ce: f64,
    pub cms: f64,
    pub ccs: f64,
    pub terms: BTreeMap<(usize, usize), f64>,
}

/// `ce + lambda_cms * cms + lambda_ccs * ccs`. Terms with a zero lambda are not
/// evaluated.
pub fn total_loss<'t>(
    tape: &'t Tape,
    ce: Var<'t>,
    sets: &BTreeMap<usize, AnchorSet<'t>>,
    cfg: &LossConfig,
) -> Result<TotalLoss<'t>> {
    let ce_value = ce.item();
    if !ce_value.is_finite() {
        return Err(Error::NonFinite("ce".into()));
    }
    let mut total = ce;
    let mut terms = BTreeMap::new();
    let mut cms = 0.0;
    let mut ccs = 0.0;
    if cfg.lambda_cms > 0.0 {
        let ms = match multi_scale_loss(tape, sets, cfg) {
            Ok(ms) => Some(ms),
            Err(Error::NoPositivePairs) => {
                log::warn!("every scale degenerate; multi-scale term is zero this step");
                None
            }
            Err(e) => return Err(e),
        };
        if let Some(ms) = ms {
            cms = ms.loss.item();
            if !cms.is_finite() {
                return Err(Error::NonFinite("cms".into()));
            }
            total = total.add(&ms.loss.scale(cfg.lambda_cms))?;
            terms.extend(ms.terms);
        }
    }
    if cfg.lambda_ccs > 0.0 {
        let cs = cross_scale_loss(tape, sets, cfg)?;
        ccs = cs.loss.item();
        if !ccs.is_finite() {
            return Err(Error::NonFinite("ccs".into()));
        }
        total = total.add(&cs.loss.scale(cfg.lambda_ccs))?;
        terms.extend(cs.terms);
    }
    Ok(TotalLoss {
        total,
        ce: ce_value,
        cms,
        ccs,
        terms,
    })
}

#[cfg(test)]
mod tests;
