//! Cost of one contrastive loss evaluation (forward and backward) over every
//! labeled position versus a balanced sample.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, DEFAULT_IGNORE_INDEX};
use crate::losses::info_nce;
use crate::mem;
use crate::sampler::{dense_anchor_set, sample_anchor_set, CandidatePool, SamplerRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl BenchShape {
    pub fn positions(&self) -> u64 {
        (self.batch * self.height * self.width) as u64
    }
}

impl std::str::FromStr for BenchShape {
    type Err = Error;

    /// Parses `BxHxW`, e.g. `2x64x64`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("bad shape {s:?}, expected BxHxW")))?;
        match parts[..] {
            [batch, height, width] if batch > 0 && height > 0 && width > 0 => Ok(Self { batch, height, width }),
            _ => Err(Error::InvalidArgument(format!("bad shape {s:?}, expected BxHxW"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub shapes: Vec<BenchShape>,
    pub a_max: usize,
    pub dim: usize,
    pub tau: f64,
    /// Label distribution of the synthetic maps.
    pub class_probs: Vec<f64>,
    /// Dense mode is skipped above this many pairs.
    pub dense_pair_ceiling: u64,
    /// Wall time is the minimum over this many repeats.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            shapes: vec![
                BenchShape {
                    batch: 1,
                    height: 16,
                    width: 16,
                },
                BenchShape {
                    batch: 2,
                    height: 16,
                    width: 16,
                },
                BenchShape {
                    batch: 2,
                    height: 32,
                    width: 32,
                },
                BenchShape {
                    batch: 2,
                    height: 64,
                    width: 64,
                },
            ],
            a_max: 2048,
            dim: 32,
            tau: 0.1,
            class_probs: vec![0.6, 0.3, 0.1],
            dense_pair_ceiling: 1 << 25,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCost {
    pub anchors: usize,
    pub pairs: u64,
    pub seconds: f64,
    /// Heap growth above the pre-evaluation baseline; `None` unless the
    /// tracking allocator is installed.
    pub peak_bytes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub shape: BenchShape,
    /// `(B h w)^2`.
    pub dense_pairs: u64,
    /// `None` when above the pair ceiling.
    pub dense: Option<ModeCost>,
    pub sampled: ModeCost,
}

/// Per-pixel classes drawn from `probs`, with the first two pixels of every
/// class forced so each class has a positive pair at any shape.
fn synthetic_labels(shape: BenchShape, probs: &[f64], rng: &mut ChaCha8Rng) -> Result<LabelMap> {
    let n = shape.batch * shape.height * shape.width;
    if n < 2 * probs.len() {
        return Err(Error::InvalidArgument(format!(
            "{}x{}x{} has fewer than two positions per class",
            shape.batch, shape.height, shape.width
        )));
    }
    let mut data: Vec<u32> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (c, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return c as u32;
                }
            }
            (probs.len() - 1) as u32
        })
        .collect();
    for (i, v) in data.iter_mut().take(2 * probs.len()).enumerate() {
        *v = (i / 2) as u32;
    }
    LabelMap::new(shape.batch, shape.height, shape.width, data, DEFAULT_IGNORE_INDEX)
}

fn measure(repeats: usize, mut eval: impl FnMut() -> Result<usize>) -> Result<ModeCost> {
    let mut best = f64::INFINITY;
    let mut peak = 0;
    let mut anchors = 0;
    for _ in 0..repeats.max(1) {
        let base = mem::reset_peak();
        let t = Instant::now();
        anchors = eval()?;
        best = best.min(t.elapsed().as_secs_f64());
        peak = peak.max(mem::peak_bytes().saturating_sub(base));
    }
    Ok(ModeCost {
        anchors,
        pairs: (anchors as u64).pow(2),
        seconds: best,
        peak_bytes: mem::is_tracking().then_some(peak),
    })
}

pub fn benchmark_sampling(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.class_probs.len() < 2 || cfg.dim == 0 {
        return Err(Error::InvalidArgument(
            "benchmark needs two classes and a positive width".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &shape in &cfg.shapes {
        let labels = synthetic_labels(shape, &cfg.class_probs, &mut rng)?;
        let z = Tensor::randn(&[shape.batch, cfg.dim, shape.height, shape.width], 1.0, &mut rng);
        let pool = CandidatePool::from_labels(&labels, 1);
        let dense_pairs = shape.positions().pow(2);

        let dense = if dense_pairs <= cfg.dense_pair_ceiling {
            Some(measure(cfg.repeats, || {
                let tape = Tape::new();
                let zv = tape.leaf(z.clone(), true);
                let set = dense_anchor_set(&pool, &zv, true)?;
                tape.backward(info_nce(&set, cfg.tau)?)?;
                Ok(set.len())
            })?)
        } else {
            log::warn!(
                "{}x{}x{}: dense mode skipped, {dense_pairs} pairs",
                shape.batch,
                shape.height,
                shape.width
            );
            None
        };
        let sampler = SamplerRng::new(cfg.seed);
        let sampled = measure(cfg.repeats, || {
            let tape = Tape::new();
            let zv = tape.leaf(z.clone(), true);
            let mut r = sampler.stream(0, 1);
            let set = sample_anchor_set(&pool, &zv, cfg.a_max, &mut r, true)?;
            tape.backward(info_nce(&set, cfg.tau)?)?;
            Ok(set.len())
        })?;
        rows.push(BenchRow {
            shape,
            dense_pairs,
            dense,
            sampled,
        });
    }
    Ok(rows)
}
