//! SGD with momentum, the poly schedule, the training loop and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::data::{augment, epoch_order, sample_rng, AugmentParams, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::hierarchy::{derive_level_labels, Hierarchy, LabelStack};
use crate::model::{ForwardOptions, Model, ModelConfig, Variant};
use crate::nn::{Mode, NormKind};
use crate::objective::{level_labels, level_loss, total_loss, LossResolution};
use crate::params::{ParamGrads, ParamStore};
use crate::scalar::Scalar;
use crate::structured::Branch;
use crate::tensor::Tensor;

/// `base_lr · (1 − iter/total)^power`.
pub fn poly_lr(iter: usize, total_iters: usize, base_lr: f64, power: f64) -> Result<f64> {
    if iter > total_iters || total_iters == 0 {
        return Err(Error::IterOutOfRange { iter, total: total_iters });
    }
    Ok(base_lr * (1.0 - iter as f64 / total_iters as f64).powf(power))
}

/// One SGD update on a flat slice:
/// `buf ← momentum·buf + grad + wd·param`, `param ← param − lr·buf`.
pub fn sgd_update<T: Scalar>(param: &mut [T], grad: &[T], buf: &mut [T], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if param.len() != grad.len() || param.len() != buf.len() {
        return Err(Error::ShapeMismatch(format!("param {} grad {} buffer {}", param.len(), grad.len(), buf.len())));
    }
    let (lr, m, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        *b = m * *b + g + wd * *p;
        *p -= lr * *b;
    }
    Ok(())
}

/// Momentum state for every stored parameter.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        let buffers = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self { momentum, weight_decay, buffers }
    }

    /// Parameters without a gradient still decay and coast on momentum.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let kind = store.entry(id).kind;
            if !kind.trainable() {
                continue;
            }
            let wd = if kind.decays() { self.weight_decay } else { 0.0 };
            let len = store.get(id).len();
            let zeros;
            let grad = match grads.get(id) {
                Some(g) => g.data(),
                None => {
                    zeros = vec![T::zero(); len];
                    &zeros
                }
            };
            sgd_update(store.get_mut(id).data_mut(), grad, self.buffers[id.index()].data_mut(), lr, self.momentum, wd)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs · ceil(len / batch)` when set.
    pub iterations: Option<usize>,
    pub seed: u64,
    pub variant: Variant,
    pub augment: AugmentParams,
    /// Disable to train on the raw samples (they must share one size).
    pub augment_enabled: bool,
    pub model: ModelConfig,
    /// Evaluate the holdout split after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small-machine defaults for synthetic runs.
    pub fn desk() -> Self {
        Self {
            base_lr: 0.007,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 8,
            epochs: 30,
            iterations: None,
            seed: 0,
            variant: Variant::Full,
            augment: AugmentParams { crop_size: 96, ..AugmentParams::default() },
            augment_enabled: true,
            model: ModelConfig::default(),
            eval_each_epoch: true,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            batch_size: 40,
            epochs: 150,
            augment: AugmentParams { crop_size: 473, ..AugmentParams::default() },
            model: ModelConfig::full_scale(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.base_lr, self.power, self.batch_size as f64, self.epochs as f64];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("base_lr, power, batch_size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be non-negative".into()));
        }
        if self.iterations == Some(0) {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if let NormKind::Batch { momentum } = self.model.encoder.norm {
            if !(0.0..=1.0).contains(&momentum) {
                return Err(Error::Config(format!("norm momentum {momentum}")));
            }
        }
        self.augment.validate()?;
        self.model.validate()
    }

    pub fn iters_per_epoch(&self, len: usize) -> usize {
        len.div_ceil(self.batch_size)
    }

    pub fn total_iters(&self, len: usize) -> usize {
        self.iterations.unwrap_or(self.epochs * self.iters_per_epoch(len))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

/// One structured loss record; level 0 with branch `total` carries the sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub level: usize,
    pub branch: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub scalar: String,
    pub variant: Variant,
    pub iteration: usize,
    pub total_iters: usize,
    pub dataset_len: usize,
    pub config: TrainConfig,
    pub config_hash: String,
    pub hierarchy: String,
    pub layout: Vec<(String, usize)>,
}

/// Parameters, momentum buffers and counters. The sample order and augmentation
/// draws are pure functions of `(seed, iteration)`, so counters are the whole RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f64>,
    pub momentum: Vec<f64>,
}

const MAGIC: &[u8] = b"COMPOFUSE-CKPT v1\n";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 24 + meta.len() + 8 * (self.params.len() + self.momentum.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for block in [&self.params, &self.momentum] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::IncompatibleCheckpoint(m.to_string());
        let mut r = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing header"))?;
        let take_u64 = |r: &mut &[u8]| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u64::from_le_bytes(b))
        };
        let meta_len = take_u64(&mut r)? as usize;
        if r.len() < meta_len {
            return Err(bad("truncated metadata"));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&r[..meta_len]).map_err(|e| bad(&e.to_string()))?;
        r = &r[meta_len..];
        let mut blocks = Vec::new();
        for _ in 0..2 {
            let n = take_u64(&mut r)? as usize;
            if r.len() < n * 8 {
                return Err(bad("truncated values"));
            }
            blocks.push(r[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
            r = &r[n * 8..];
        }
        let momentum = blocks.pop().expect("two blocks");
        let params = blocks.pop().expect("two blocks");
        Ok(Self { meta, params, momentum })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::UnreadableFile { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::from_bytes(&bytes)
    }

    pub fn hierarchy(&self) -> Result<Hierarchy> {
        Hierarchy::from_toml(&self.meta.hierarchy)
    }

    /// Rebuild the model described by the checkpoint and load its parameters.
    pub fn model<T: Scalar>(&self) -> Result<Model<T>> {
        let graph = self.hierarchy()?;
        let mut model = Model::new(&self.meta.config.model, self.meta.variant, &graph, self.meta.config.seed)?;
        if model.params.layout() != self.meta.layout {
            return Err(Error::IncompatibleCheckpoint("parameter layout differs from the model".into()));
        }
        model.params.load_flat(&self.params)?;
        Ok(model)
    }
}

/// Images `[n, 3, K, K]` and label stacks of one batch.
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<LabelStack>,
}

pub fn make_batch<T: Scalar>(samples: &[Sample], graph: &Hierarchy) -> Result<Batch<T>> {
    let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.to_tensor()).collect();
    let labels = samples.iter().map(|s| derive_level_labels(&s.leaf_labels, graph)).collect::<Result<_>>()?;
    Ok(Batch { images: Tensor::stack(&images)?, labels })
}

/// Outcome of one optimisation step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub records: Vec<LossRecord>,
}

pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub sgd: Sgd<T>,
    pub iteration: usize,
    pub total_iters: usize,
    data: Vec<Sample>,
}

const AUGMENT_STREAM: u64 = 0xa06e_2f11;

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, data: Vec<Sample>, graph: &Hierarchy) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyDataset("training split".into()));
        }
        let model = Model::new(&config.model, config.variant, graph, config.seed)?;
        let sgd = Sgd::new(&model.params, config.momentum, config.weight_decay);
        let total_iters = config.total_iters(data.len());
        Ok(Self { config, model, sgd, iteration: 0, total_iters, data })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, data: Vec<Sample>) -> Result<Self> {
        if ckpt.meta.dataset_len != data.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint was trained on {} samples, got {}",
                ckpt.meta.dataset_len,
                data.len()
            )));
        }
        if ckpt.meta.config.hash() != ckpt.meta.config_hash {
            return Err(Error::IncompatibleCheckpoint("config hash mismatch".into()));
        }
        let graph = ckpt.hierarchy()?;
        let mut trainer = Self::new(ckpt.meta.config.clone(), data, &graph)?;
        trainer.model = ckpt.model()?;
        let mut off = 0;
        if ckpt.momentum.len() != ckpt.params.len() {
            return Err(Error::IncompatibleCheckpoint("momentum size".into()));
        }
        for b in &mut trainer.sgd.buffers {
            let n = b.len();
            for (d, &s) in b.data_mut().iter_mut().zip(&ckpt.momentum[off..off + n]) {
                *d = T::of(s);
            }
            off += n;
        }
        trainer.iteration = ckpt.meta.iteration;
        trainer.total_iters = ckpt.meta.total_iters;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                version: 1,
                scalar: T::NAME.to_string(),
                variant: self.config.variant,
                iteration: self.iteration,
                total_iters: self.total_iters,
                dataset_len: self.data.len(),
                config: self.config.clone(),
                config_hash: self.config.hash(),
                hierarchy: self.model.graph.spec().to_toml(),
                layout: self.model.params.layout(),
            },
            params: self.model.params.to_flat(),
            momentum: self.sgd.buffers.iter().flat_map(|b| b.data().iter().map(|v| v.f64())).collect(),
        }
    }

    /// Samples of iteration `it` after augmentation.
    pub fn batch_samples(&self, it: usize) -> Vec<Sample> {
        let per_epoch = self.config.iters_per_epoch(self.data.len());
        let (epoch, pos) = (it / per_epoch, it % per_epoch);
        let order = epoch_order(self.data.len(), self.config.seed, epoch as u64);
        let b = self.config.batch_size;
        let idx = &order[pos * b..((pos + 1) * b).min(order.len())];
        idx.iter()
            .map(|&i| {
                let s = &self.data[i];
                if self.config.augment_enabled {
                    let mut rng = sample_rng(self.config.seed ^ AUGMENT_STREAM, ((epoch as u64) << 32) | i as u64);
                    augment(s, &self.config.augment, &self.model.graph, &mut rng)
                } else {
                    s.clone()
                }
            })
            .collect()
    }

    /// Loss terms of a batch on a fresh tape; returns the tape, the total and the records.
    pub fn loss(&self, batch: &Batch<T>, mode: Mode) -> Result<(Graph<T>, crate::autograd::Var, Vec<LossRecord>)> {
        let model = &self.model;
        let mut g = Graph::new();
        let x = g.constant(batch.images.clone());
        let out = model.forward(&mut g, x, &ForwardOptions::new(mode))?;
        let [_, _, k, kw] = g.value(out.h_i).shape();
        let [_, _, h, w] = batch.images.shape();
        let size = match model.config.objective.resolution {
            LossResolution::Feature => (k, kw),
            LossResolution::Input => (h, w),
        };
        let mut levels = Vec::new();
        for l in 1..=model.graph.num_levels() {
            let labels = level_labels(&batch.labels, l, size.1, size.0);
            levels.push(level_loss(&mut g, &out.logits, &model.graph, l, &labels, size, &model.config.objective)?);
        }
        let total = total_loss(&mut g, &levels)?;
        let mut records = Vec::new();
        for lv in &levels {
            for (b, v) in Branch::ALL.iter().zip(lv.values(&g)) {
                if let Some(value) = v {
                    records.push(LossRecord { step: self.iteration, level: lv.level, branch: b.name().into(), value });
                }
            }
        }
        let value = g.value(total).data()[0].f64();
        records.push(LossRecord { step: self.iteration, level: 0, branch: "total".into(), value });
        Ok((g, total, records))
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = make_batch(&self.batch_samples(self.iteration), &self.model.graph)?;
        let (g, total, records) = self.loss(&batch, Mode::Train)?;
        let loss = g.value(total).data()[0].f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.iteration, last_good: Box::new(self.checkpoint()) });
        }
        let grads = g.backward(total)?.param_grads(&self.model.params);
        let lr = poly_lr(self.iteration, self.total_iters, self.config.base_lr, self.config.power)?;
        self.sgd.step(&mut self.model.params, &grads, lr)?;
        if let NormKind::Batch { momentum } = self.model.config.encoder.norm {
            let m = T::of(momentum);
            for u in g.stat_updates() {
                let rm = self.model.params.get_mut(u.running_mean);
                for (r, &b) in rm.data_mut().iter_mut().zip(&u.mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
                let rv = self.model.params.get_mut(u.running_var);
                for (r, &b) in rv.data_mut().iter_mut().zip(&u.var) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
        self.iteration += 1;
        Ok(StepRecord { step: self.iteration - 1, lr, loss, records })
    }

    pub fn done(&self) -> bool {
        self.iteration >= self.total_iters
    }

    pub fn data(&self) -> &[Sample] {
        &self.data
    }
}

/// Holdout metrics after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub iteration: usize,
    pub report: EvalReport,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossRecord>,
    pub epochs: Vec<EpochReport>,
}

/// Run every remaining iteration of a trainer. `on_step` sees each step as it finishes.
pub fn run<T: Scalar>(
    trainer: &mut Trainer<T>,
    holdout: &[Sample],
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let per_epoch = trainer.config.iters_per_epoch(trainer.data.len());
    let mut trace = Vec::new();
    let mut epochs = Vec::new();
    while !trainer.done() {
        let rec = trainer.step()?;
        on_step(&rec);
        trace.extend(rec.records);
        let finished = trainer.iteration.is_multiple_of(per_epoch) || trainer.done();
        if finished && trainer.config.eval_each_epoch && !holdout.is_empty() {
            let report = evaluate(&trainer.model, holdout, &EvalOptions::default())?;
            epochs.push(EpochReport { epoch: trainer.iteration.div_ceil(per_epoch), iteration: trainer.iteration, report });
        }
    }
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), trace, epochs })
}

/// Train from scratch.
pub fn train<T: Scalar>(config: TrainConfig, data: Vec<Sample>, holdout: &[Sample], graph: &Hierarchy) -> Result<TrainOutcome> {
    let mut trainer = Trainer::<T>::new(config, data, graph)?;
    run(&mut trainer, holdout, |_| {})
}
