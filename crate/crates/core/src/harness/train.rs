use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{DatasetConfig, RunConfig};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::labels::{build_pyramid, LabelMap};
use crate::losses::{total_loss, LossConfig};
use crate::nn::Ctx;
use crate::sampler::{sample_anchor_set, AnchorSet, CandidatePool, SamplerRng};
use crate::segnet::{argmax_channels, generate_scene, ConfusionMatrix, Forward, MiouReport, SegModel, SyntheticScene};

/// Train and validation scenes, regenerable from the dataset config.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: SyntheticScene,
    pub val: SyntheticScene,
}

pub fn make_splits(cfg: &DatasetConfig) -> Result<Splits> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = generate_scene(&cfg.scene, cfg.train_images, &mut rng)?;
    rng.set_stream(1);
    let val = generate_scene(&cfg.scene, cfg.val_images, &mut rng)?;
    Ok(Splits { train, val })
}

/// Image indices of the training batch at `step`.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n_images: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c_0000_0000);
    rng.set_stream(step);
    sample(&mut rng, n_images, batch).into_vec()
}

pub fn sampler_for(seed: u64) -> SamplerRng {
    SamplerRng::new(seed ^ 0xa11c_0000_0000_0000)
}

/// Balanced anchor sets for every stride the loss config needs at `step`.
pub fn anchor_sets<'t>(
    model: &SegModel,
    ctx: &Ctx<'t, '_>,
    fwd: &Forward<'t>,
    labels: &LabelMap,
    cfg: &LossConfig,
    sampler: &SamplerRng,
    step: u64,
) -> Result<BTreeMap<usize, AnchorSet<'t>>> {
    let strides = cfg.active_strides();
    let mut sets = BTreeMap::new();
    if strides.is_empty() {
        return Ok(sets);
    }
    let pyramid = build_pyramid(labels, &strides)?;
    let features = model.loss_features(fwd)?;
    for s in strides {
        let f = features
            .get(&s)
            .ok_or_else(|| Error::Config(format!("the model has no stride {s}")))?;
        let z = model.project(ctx, f)?;
        let pool = CandidatePool::from_labels(pyramid.get(s).expect("pyramid level"), s);
        let mut rng = sampler.stream(step, s);
        sets.insert(
            s,
            sample_anchor_set(&pool, &z.tensor, cfg.a_max, &mut rng, cfg.normalize_embeddings)?,
        );
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub ce: f64,
    pub cms: f64,
    pub ccs: f64,
    pub total: f64,
    /// Unweighted contrastive terms, keyed `s4` (within-scale) or `s4x32`
    /// (cross-scale).
    pub terms: BTreeMap<String, f64>,
    pub anchors: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Optimizer steps completed when evaluated.
    pub step: u64,
    #[serde(flatten)]
    pub report: MiouReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

fn term_key(&(a, b): &(usize, usize)) -> String {
    if a == b {
        format!("s{a}")
    } else {
        format!("s{a}x{b}")
    }
}

fn tag_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
        other => other,
    }
}

/// SGD state plus the model and data of one run.
pub struct Trainer {
    cfg: RunConfig,
    model: SegModel,
    momentum: Vec<Tensor>,
    step: u64,
    splits: Splits,
    sampler: SamplerRng,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = SegModel::new(&cfg.model, cfg.n_classes(), cfg.loss.loss_position, cfg.seed)?;
        let momentum = model.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let splits = make_splits(&cfg.dataset)?;
        Ok(Self {
            sampler: sampler_for(cfg.seed),
            cfg,
            model,
            momentum,
            step: 0,
            splits,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        let cfg = ckpt.config;
        let splits = make_splits(&cfg.dataset)?;
        Ok(Self {
            sampler: sampler_for(cfg.seed),
            cfg,
            model,
            momentum: ckpt.momentum,
            step: ckpt.step,
            splits,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.cfg.clone(),
            config_hash: self.cfg.hash()?,
            step: self.step,
            params: self.model.params.clone(),
            buffers: self.model.buffers.clone(),
            momentum: self.momentum.clone(),
        })
    }

    /// One SGD step on the batch drawn for the current step counter.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let lr = self.cfg.optimizer.lr_at(step, self.cfg.steps);
        let idx = batch_indices(self.cfg.seed, step, self.cfg.batch_size, self.splits.train.len());
        let (images, labels) = self.splits.train.batch(&idx)?;

        let (record, grads, bn) = {
            let tape = Tape::new();
            let vars = self.model.params.bind(&tape);
            let ctx = Ctx::new(&tape, &vars, &self.model.buffers, true);
            let x = tape.constant(images);
            let fwd = self.model.forward(&ctx, &x)?;
            let ce = fwd.logits.softmax_cross_entropy(&labels)?;
            let sets = anchor_sets(&self.model, &ctx, &fwd, &labels, &self.cfg.loss, &self.sampler, step)
                .map_err(|e| tag_step(e, step))?;
            let tl = total_loss(&tape, ce, &sets, &self.cfg.loss).map_err(|e| tag_step(e, step))?;
            let total = tl.total.item();
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("total at step {step}")));
            }
            tape.backward(tl.total)?;
            let grads: Vec<Option<Tensor>> = vars.iter().map(|v| v.grad()).collect();
            let record = StepRecord {
                step,
                lr,
                ce: tl.ce,
                cms: tl.cms,
                ccs: tl.ccs,
                total,
                terms: tl.terms.iter().map(|(k, v)| (term_key(k), *v)).collect(),
                anchors: sets.iter().map(|(s, a)| (format!("s{s}"), a.len())).collect(),
            };
            (record, grads, ctx.take_bn_updates())
        };

        for (name, g) in self.model.params.names().iter().zip(&grads) {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {name} at step {step}")));
                }
            }
        }
        bn.apply(&mut self.model.buffers);
        let opt = &self.cfg.optimizer;
        for ((p, v), g) in self
            .model
            .params
            .values_mut()
            .iter_mut()
            .zip(&mut self.momentum)
            .zip(&grads)
        {
            let Some(g) = g else { continue };
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gi + opt.weight_decay * *pi;
                *vi = opt.momentum * *vi + d;
                *pi -= lr * *vi;
            }
        }
        self.step += 1;
        Ok(record)
    }

    pub fn evaluate_val(&self) -> Result<MiouReport> {
        evaluate(&self.model, &self.splits.val, &self.cfg.rare_classes())
    }
}

/// Single-scale inference over a scene in evaluation mode.
pub fn evaluate(model: &SegModel, scene: &SyntheticScene, subgroup: &[u32]) -> Result<MiouReport> {
    if scene.labels.classes().iter().any(|&c| c as usize >= model.n_classes()) {
        return Err(Error::InvalidArgument(format!(
            "dataset labels exceed the model's {} classes",
            model.n_classes()
        )));
    }
    let mut cm = ConfusionMatrix::new(model.n_classes())?;
    let ignore = scene.labels.ignore_index();
    for start in (0..scene.len()).step_by(16) {
        let idx: Vec<usize> = (start..(start + 16).min(scene.len())).collect();
        let (images, labels) = scene.batch(&idx)?;
        let pred = argmax_channels(&model.predict_logits(&images)?, ignore)?;
        cm.update(&pred, &labels)?;
    }
    Ok(cm.report(subgroup))
}

/// Where a run writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
}

impl RunOutputs {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint_at(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step-{step:06}.ckpt"))
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub final_eval: MiouReport,
}

/// Runs the remaining steps. With `outputs`, records are appended to the
/// metrics file and checkpoints written at every evaluation.
pub fn run_training(trainer: &mut Trainer, outputs: Option<&RunOutputs>) -> Result<TrainOutcome> {
    let mut sink = match outputs {
        Some(o) => {
            std::fs::create_dir_all(&o.dir)?;
            let f = OpenOptions::new().create(true).append(true).open(o.metrics())?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut emit = |rec: LogRecord, sink: &mut Option<BufWriter<File>>| -> Result<()> {
        if let Some(w) = sink {
            serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        log.push(rec);
        Ok(())
    };
    let interval = trainer.config().eval_interval;
    let started = std::time::Instant::now();
    let mut final_eval = None;
    while !trainer.is_done() {
        let rec = trainer.train_step()?;
        if rec.step % 50 == 0 {
            log::info!(
                "step {} ce {:.4} cms {:.4} ccs {:.4} total {:.4} ({:.1}s)",
                rec.step,
                rec.ce,
                rec.cms,
                rec.ccs,
                rec.total,
                started.elapsed().as_secs_f64()
            );
        }
        emit(LogRecord::Step(rec), &mut sink)?;
        let done = trainer.step();
        if (interval > 0 && done % interval == 0) || trainer.is_done() {
            let report = trainer.evaluate_val()?;
            log::info!("step {done} val mIoU {:?}", report.miou);
            emit(
                LogRecord::Eval(EvalRecord {
                    step: done,
                    report: report.clone(),
                }),
                &mut sink,
            )?;
            if let Some(o) = outputs {
                let ckpt = trainer.checkpoint()?;
                ckpt.save(&o.checkpoint_at(done))?;
                ckpt.save(&o.last())?;
            }
            if let Some(w) = &mut sink {
                w.flush()?;
            }
            if trainer.is_done() {
                final_eval = Some(report);
            }
        }
    }
    let final_eval = match final_eval {
        Some(r) => r,
        None => trainer.evaluate_val()?,
    };
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint()?,
        log,
        final_eval,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Io(e.into())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{ModelSpec, SceneSpec};

    pub(crate) fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.steps = 4;
        cfg.batch_size = 2;
        cfg.eval_interval = 2;
        cfg.dataset = DatasetConfig {
            seed: 1,
            train_images: 6,
            val_images: 2,
            scene: SceneSpec {
                height: 32,
                width: 32,
                n_classes: 3,
                size_min: 8,
                size_max: 16,
                rare_class: None,
                overlap_classes: None,
                ..SceneSpec::default()
            },
        };
        cfg.model = ModelSpec {
            stem_channels: 4,
            channels: [6, 6, 8, 8],
            embedding_dim: 8,
        };
        // a 32x32 image has a single stride-32 cell, too few for positives
        cfg.loss.scale_weights.retain(|w| w.stride != 32);
        cfg.loss.cross_pairs = vec![crate::losses::CrossPair {
            fine: 4,
            coarse: 16,
            weight: 1.0,
        }];
        cfg
    }

    #[test]
    fn batches_are_distinct_and_deterministic() {
        let a = batch_indices(3, 10, 8, 20);
        assert_eq!(a, batch_indices(3, 10, 8, 20));
        assert_ne!(a, batch_indices(3, 11, 8, 20));
        let mut s = a.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 8);
    }

    #[test]
    fn ce_only_run_logs_zero_contrastive_terms() {
        let mut cfg = tiny_config();
        cfg.loss.lambda_cms = 0.0;
        cfg.loss.lambda_ccs = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let out = run_training(&mut t, None).unwrap();
        let steps: Vec<_> = out
            .log
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step(s) => Some(s),
                _ => None,
            })
            .collect();
        assert_eq!(steps.len(), 4);
        assert!(steps.iter().all(|s| s.cms == 0.0 && s.ccs == 0.0 && s.total == s.ce));
    }

    #[test]
    fn full_objective_updates_every_parameter() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        let before = t.model().params.clone();
        let rec = t.train_step().unwrap();
        assert!(rec.cms > 0.0 && rec.ccs > 0.0);
        for ((name, a), b) in before.iter().zip(t.model().params.values()) {
            if name.starts_with("proj.s32") {
                assert_eq!(a, b);
                continue;
            }
            assert_ne!(a, b, "{name} unchanged");
        }
    }

    #[test]
    fn record_round_trips_through_json() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        let rec = LogRecord::Step(t.train_step().unwrap());
        let text = serde_json::to_string(&rec).unwrap();
        assert!(text.starts_with("{\"kind\":\"step\""));
        assert_eq!(serde_json::from_str::<LogRecord>(&text).unwrap(), rec);
    }

    #[test]
    fn evaluate_rejects_class_mismatch() {
        let t = Trainer::new(tiny_config()).unwrap();
        let mut scene = t.splits().val.clone();
        let [b, h, w] = scene.labels.shape();
        scene.labels = LabelMap::filled(b, h, w, 4);
        assert!(matches!(
            evaluate(t.model(), &scene, &[]),
            Err(Error::InvalidArgument(_))
        ));
    }
}
