//! Balanced anchor-set sampling over labeled feature positions.
//!
//! For one scale, every present class contributes the same number of anchors
//! `K`, the pixel count of the rarest class in the batch. A class's quota is
//! split across the images that contain it; images that cannot fill their
//! share hand the deficit to images with spare pixels. The whole set is capped
//! at `a_max` by shrinking the per-class quota.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// One labeled feature position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Candidate {
    pub batch: usize,
    pub row: usize,
    pub col: usize,
    pub class: u32,
}

/// All non-ignored positions of a downsampled label map, in row-major order.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    stride: usize,
    batch: usize,
    height: usize,
    width: usize,
    entries: Vec<Candidate>,
}

impl CandidatePool {
    pub fn from_labels(labels: &LabelMap, stride: usize) -> Self {
        let mut entries = Vec::new();
        for b in 0..labels.batch() {
            for row in 0..labels.height() {
                for col in 0..labels.width() {
                    let class = labels.get(b, row, col);
                    if !labels.is_ignored(class) {
                        entries.push(Candidate {
                            batch: b,
                            row,
                            col,
                            class,
                        });
                    }
                }
            }
        }
        Self {
            stride,
            batch: labels.batch(),
            height: labels.height(),
            width: labels.width(),
            entries,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCount {
    pub total: usize,
    /// Indexed by batch element.
    pub per_batch: Vec<usize>,
}

pub fn count_classes(pool: &CandidatePool) -> Result<BTreeMap<u32, ClassCount>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut counts: BTreeMap<u32, ClassCount> = BTreeMap::new();
    for e in &pool.entries {
        let c = counts.entry(e.class).or_insert_with(|| ClassCount {
            total: 0,
            per_batch: vec![0; pool.batch],
        });
        c.total += 1;
        c.per_batch[e.batch] += 1;
    }
    Ok(counts)
}

/// Seeded source of independent ChaCha streams, one per `(step, stride)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerRng {
    seed: u64,
}

impl SamplerRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, step: u64, stride: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((step << 16) | (stride as u64 & 0xffff));
        rng
    }
}

/// Indices into a pool chosen as anchors, grouped by class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSelection {
    pub indices: Vec<usize>,
    /// Rarest-class count before the cap.
    pub k: usize,
    /// Anchors taken per class after the cap.
    pub per_class: usize,
    pub classes: usize,
}

/// Splits `quota` over images holding a class: equal shares, the remainder to
/// the images with the most pixels of it, then any shortfall refilled from
/// images with spare capacity.
pub fn split_quota(quota: usize, per_batch: &[usize]) -> Vec<usize> {
    let holders: Vec<usize> = (0..per_batch.len()).filter(|&b| per_batch[b] > 0).collect();
    let mut out = vec![0; per_batch.len()];
    if holders.is_empty() {
        return out;
    }
    let base = quota / holders.len();
    let rem = quota % holders.len();
    let mut by_count = holders.clone();
    by_count.sort_by(|&a, &b| per_batch[b].cmp(&per_batch[a]).then(a.cmp(&b)));
    for &b in &holders {
        out[b] = base;
    }
    for &b in by_count.iter().take(rem) {
        out[b] += 1;
    }
    let mut deficit = 0;
    for &b in &holders {
        if out[b] > per_batch[b] {
            deficit += out[b] - per_batch[b];
            out[b] = per_batch[b];
        }
    }
    while deficit > 0 {
        let best = holders
            .iter()
            .copied()
            .filter(|&b| per_batch[b] > out[b])
            .max_by(|&a, &b| (per_batch[a] - out[a]).cmp(&(per_batch[b] - out[b])).then(b.cmp(&a)));
        let Some(b) = best else { break };
        let give = deficit.min(per_batch[b] - out[b]);
        out[b] += give;
        deficit -= give;
    }
    out
}

pub fn select_anchors<R: Rng + ?Sized>(pool: &CandidatePool, a_max: usize, rng: &mut R) -> Result<AnchorSelection> {
    let counts = count_classes(pool)?;
    let classes = counts.len();
    if a_max < classes {
        return Err(Error::AnchorCapTooSmall { a_max, classes });
    }
    let k = counts.values().map(|c| c.total).min().unwrap_or(0);
    let per_class = if classes * k > a_max { a_max / classes } else { k };

    // positions per (class, batch element), in pool order
    let mut buckets: BTreeMap<(u32, usize), Vec<usize>> = BTreeMap::new();
    for (i, e) in pool.entries.iter().enumerate() {
        buckets.entry((e.class, e.batch)).or_default().push(i);
    }

    let mut indices = Vec::with_capacity(per_class * classes);
    for (&class, count) in &counts {
        let quotas = split_quota(per_class, &count.per_batch);
        for (b, &q) in quotas.iter().enumerate() {
            if q == 0 {
                continue;
            }
            let bucket = &buckets[&(class, b)];
            let mut chosen = choose_without_replacement(bucket, q, rng);
            chosen.sort_unstable();
            indices.extend(chosen);
        }
    }
    Ok(AnchorSelection {
        indices,
        k,
        per_class,
        classes,
    })
}

/// Partial Fisher-Yates draw of `q` distinct items.
fn choose_without_replacement<R: Rng + ?Sized>(items: &[usize], q: usize, rng: &mut R) -> Vec<usize> {
    let mut pool = items.to_vec();
    let q = q.min(pool.len());
    for i in 0..q {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(q);
    pool
}

/// Every pool position, unbalanced and uncapped.
pub fn select_all(pool: &CandidatePool) -> Result<AnchorSelection> {
    let counts = count_classes(pool)?;
    Ok(AnchorSelection {
        indices: (0..pool.len()).collect(),
        k: counts.values().map(|c| c.total).min().unwrap_or(0),
        per_class: 0,
        classes: counts.len(),
    })
}

/// Sampled embeddings of one scale with their labels and provenance.
#[derive(Debug, Clone)]
pub struct AnchorSet<'t> {
    embeddings: Var<'t>,
    class_ids: Vec<u32>,
    stride: usize,
    provenance: Vec<(usize, usize, usize)>,
}

impl<'t> AnchorSet<'t> {
    /// Gathers the selected rows from a `B x d x h x w` projected map,
    /// optionally L2-normalizing them.
    pub fn gather(
        projected: &Var<'t>,
        pool: &CandidatePool,
        selection: &AnchorSelection,
        normalize: bool,
    ) -> Result<Self> {
        let shape = projected.shape();
        if shape.len() != 4 || shape[0] != pool.batch || (shape[2], shape[3]) != pool.spatial() {
            return crate::error::shape_err("anchor gather", &shape, &[pool.batch, 0, pool.height, pool.width]);
        }
        let picked: Vec<Candidate> = selection.indices.iter().map(|&i| pool.entries[i]).collect();
        let provenance: Vec<_> = picked.iter().map(|c| (c.batch, c.row, c.col)).collect();
        let rows = projected.gather_positions(&provenance)?;
        let embeddings = if normalize { rows.l2_normalize_rows()? } else { rows };
        Ok(Self {
            embeddings,
            class_ids: picked.iter().map(|c| c.class).collect(),
            stride: pool.stride,
            provenance,
        })
    }

    /// Builds a set from explicit rows, mainly for tests and the C ABI.
    pub fn from_parts(
        embeddings: Var<'t>,
        class_ids: Vec<u32>,
        stride: usize,
        provenance: Vec<(usize, usize, usize)>,
    ) -> Result<Self> {
        let shape = embeddings.shape();
        if shape.len() != 2 || shape[0] != class_ids.len() || provenance.len() != class_ids.len() {
            return crate::error::shape_err("anchor set", &shape, &[class_ids.len(), provenance.len()]);
        }
        Ok(Self {
            embeddings,
            class_ids,
            stride,
            provenance,
        })
    }

    pub fn embeddings(&self) -> &Var<'t> {
        &self.embeddings
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn provenance(&self) -> &[(usize, usize, usize)] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// Anchors per class.
    pub fn class_histogram(&self) -> BTreeMap<u32, usize> {
        let mut h = BTreeMap::new();
        for &c in &self.class_ids {
            *h.entry(c).or_insert(0) += 1;
        }
        h
    }
}

pub fn sample_anchor_set<'t, R: Rng + ?Sized>(
    pool: &CandidatePool,
    projected: &Var<'t>,
    a_max: usize,
    rng: &mut R,
    normalize: bool,
) -> Result<AnchorSet<'t>> {
    let selection = select_anchors(pool, a_max, rng)?;
    AnchorSet::gather(projected, pool, &selection, normalize)
}

/// The fully-dense set: every labeled position is an anchor.
pub fn dense_anchor_set<'t>(pool: &CandidatePool, projected: &Var<'t>, normalize: bool) -> Result<AnchorSet<'t>> {
    let selection = select_all(pool)?;
    AnchorSet::gather(projected, pool, &selection, normalize)
}
