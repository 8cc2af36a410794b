//! AdamW training loop, evaluation and checkpoint plumbing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape};
use crate::checkpoint::{Checkpoint, Progress};
use crate::data::{augment, stack_batch, SegmentationSample};
use crate::error::{Error, Result};
use crate::metrics::{batch_metrics, write_report_csv, Aggregate, MetricSummary, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::{ModelConfig, SegmentationNet};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub deterministic: bool,
    /// Global-norm gradient clipping threshold; `None` disables it.
    pub grad_clip: Option<f64>,
    /// Learning-rate multiplier for the deformable offset predictors.
    pub offset_lr_scale: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            deterministic: true,
            grad_clip: Some(5.0),
            offset_lr_scale: 0.1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas", format!("must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.eps > 0.0) {
            return bad("eps", format!("must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.offset_lr_scale > 0.0 && self.offset_lr_scale.is_finite()) {
            return bad("offset_lr_scale", format!("must be positive, got {}", self.offset_lr_scale));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip", format!("must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// First and second moment buffers, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Global L2 norm of the gradients, accumulated in store order.
pub fn grad_norm<T: Scalar>(store: &ParamStore<T>, grads: &Gradients<T>) -> f64 {
    store
        .ids()
        .filter_map(|id| grads.param(id))
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Parameters of a deformable block's offset predictor.
pub fn is_offset_param(path: &str) -> bool {
    path.contains(".deform.offset.")
}

/// One AdamW update with decoupled weight decay. Parameters the loss did
/// not reach are treated as having a zero gradient. Returns the gradient
/// norm before clipping.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamWState<T>,
    cfg: &TrainConfig,
) -> Result<f64> {
    for id in store.ids() {
        if grads.param(id).is_some_and(|g| !g.all_finite()) {
            return Err(Error::NonFiniteGradient(store.path(id).to_string()));
        }
    }
    let norm = grad_norm(store, grads);
    let clip = match cfg.grad_clip {
        Some(c) if norm > c => c / (norm + 1e-6),
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let lr = if is_offset_param(store.path(id)) {
            cfg.lr * cfg.offset_lr_scale
        } else {
            cfg.lr
        };
        let g = grads.param(id);
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        let theta = store.value_mut(id).data_mut();
        for i in 0..theta.len() {
            let gi = g.map_or(0.0, |g| g.data()[i].as_f64()) * clip;
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let mut th = theta[i].as_f64();
            th -= lr * cfg.weight_decay * th;
            th -= lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            theta[i] = T::of(th);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub steps: usize,
    pub val: Option<MetricSummary>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

impl History {
    /// `epoch,loss,val_dsc,val_iou,val_se,val_sp,val_acc`; validation
    /// columns are empty when no validation set was given.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["epoch", "loss", "val_dsc", "val_iou", "val_se", "val_sp", "val_acc"])
            .map_err(csv_err)?;
        for r in &self.epochs {
            let mut row = vec![r.epoch.to_string(), r.loss.to_string()];
            match &r.val {
                Some(v) => row.extend([v.dsc, v.iou, v.se, v.sp, v.acc].map(|x| x.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), 5)),
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_image: Vec<(String, MetricsReport)>,
    pub aggregate: Aggregate,
}

impl Evaluation {
    pub fn write_csv(&self, path: &Path) -> Result<Aggregate> {
        write_report_csv(path, &self.per_image)
    }
}

/// Inference over frozen parameters: per-image metrics plus aggregate.
pub fn evaluate(net: &SegmentationNet, store: &ParamStore<f32>, data: &[SegmentationSample], batch_size: usize) -> Result<Evaluation> {
    let mut per_image = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&SegmentationSample> = chunk.iter().collect();
        let (img, mask) = stack_batch::<f32>(&refs)?;
        let prob = predict(net, store, &img)?;
        for (s, r) in chunk.iter().zip(batch_metrics(&prob, &mask, DEFAULT_THRESHOLD)?) {
            per_image.push((s.id.clone(), r));
        }
    }
    let reports: Vec<MetricsReport> = per_image.iter().map(|(_, r)| *r).collect();
    Ok(Evaluation {
        aggregate: Aggregate::from_reports(&reports),
        per_image,
    })
}

/// Probability masks `[B, 1, H, W]` for a batch of images.
pub fn predict(net: &SegmentationNet, store: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let tape = Tape::inference(store);
    let x = tape.constant(images.clone());
    Ok(net.forward(&tape, &x)?.into_value())
}

/// Where `fit` writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct FitOutputs {
    /// Receives `last.ckpt` every epoch and `best.ckpt` whenever the
    /// selection score improves.
    pub checkpoint_dir: Option<PathBuf>,
    pub history_csv: Option<PathBuf>,
}

pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub net: SegmentationNet,
    pub store: ParamStore<f32>,
    pub opt: AdamWState<f32>,
    pub progress: Progress,
    pub history: History,
    best_score: Option<f64>,
}

impl Trainer {
    /// Builds a freshly initialised model. Initialisation and the data
    /// stream draw from separate generators derived from `cfg.seed`.
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut root = SeededRng::new(cfg.seed);
        let mut init = root.fork();
        let (net, store) = SegmentationNet::build::<f32>(model_cfg, &mut init)?;
        let opt = AdamWState::new(&store);
        let progress = Progress {
            rng: root.fork(),
            ..Progress::new(cfg.seed)
        };
        Ok(Self {
            model_cfg: model_cfg.clone(),
            cfg: cfg.clone(),
            net,
            store,
            opt,
            progress,
            history: History::default(),
            best_score: None,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_store(&self.model_cfg, &self.store);
        ck.train = serde_json::to_value(&self.cfg)?;
        ck.progress = self.progress.clone();
        ck.moments = self.opt.m.iter().cloned().zip(self.opt.v.iter().cloned()).collect();
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Rebuilds a trainer from a checkpoint so that further steps match an
    /// uninterrupted run.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_value(ck.train.clone())?;
        let mut t = Self::new(&ck.model, &cfg)?;
        ck.restore_params(&ck.model, &mut t.store)?;
        if ck.moments.len() != t.store.len() {
            return Err(Error::Checkpoint("checkpoint has no optimizer state".into()));
        }
        t.opt.m = ck.moments.iter().map(|(m, _)| m.clone()).collect();
        t.opt.v = ck.moments.iter().map(|(_, v)| v.clone()).collect();
        t.opt.step = ck.progress.step;
        t.progress = ck.progress.clone();
        Ok(t)
    }

    /// Forward, loss, backward and one AdamW update on a stacked batch.
    pub fn train_step(&mut self, images: &Tensor<f32>, masks: &Tensor<f32>) -> Result<f64> {
        let tape = Tape::with_params(&self.store);
        let x = tape.constant(images.clone());
        let prob = self.net.forward(&tape, &x)?;
        let loss = tape.total_loss(&prob, masks)?;
        let value = loss.value().item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.progress.epoch,
                step: self.progress.step as usize,
                value,
            });
        }
        let grads = tape.backward(&loss)?;
        adamw_step(&mut self.store, &grads, &mut self.opt, &self.cfg)?;
        self.progress.step += 1;
        self.history.step_losses.push(value);
        Ok(value)
    }

    fn start_epoch_if_needed(&mut self, n: usize) {
        if self.progress.cursor >= self.progress.order.len() {
            if !self.progress.order.is_empty() {
                self.progress.epoch += 1;
            }
            let mut order: Vec<usize> = (0..n).collect();
            self.progress.rng.shuffle(&mut order);
            self.progress.order = order;
            self.progress.cursor = 0;
        }
    }

    /// Takes the next batch of the current epoch (shuffled, augmented) and
    /// trains on it.
    pub fn next_step(&mut self, data: &[SegmentationSample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        self.start_epoch_if_needed(data.len());
        let p = &self.progress;
        if p.order.len() != data.len() {
            return Err(Error::Data(format!(
                "training set has {} samples but the run was started with {}",
                data.len(),
                p.order.len()
            )));
        }
        let end = (p.cursor + self.cfg.batch_size).min(p.order.len());
        let picked: Vec<usize> = p.order[p.cursor..end].to_vec();
        self.progress.cursor = end;
        let batch: Vec<SegmentationSample> = picked
            .iter()
            .map(|&i| {
                if self.cfg.augment {
                    augment(&data[i], &mut self.progress.rng)
                } else {
                    Ok(data[i].clone())
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&SegmentationSample> = batch.iter().collect();
        let (img, mask) = stack_batch::<f32>(&refs)?;
        self.train_step(&img, &mask)
    }

    /// Runs steps until the current epoch's order is used up; returns the
    /// mean step loss.
    pub fn run_epoch(&mut self, data: &[SegmentationSample]) -> Result<(f64, usize)> {
        self.start_epoch_if_needed(data.len());
        let mut total = 0.0;
        let mut steps = 0;
        while self.progress.cursor < self.progress.order.len() {
            total += self.next_step(data)?;
            steps += 1;
        }
        Ok((total / steps.max(1) as f64, steps))
    }

    pub fn evaluate(&self, data: &[SegmentationSample]) -> Result<Evaluation> {
        evaluate(&self.net, &self.store, data, self.cfg.batch_size)
    }

    /// `cfg.epochs` epochs over `train`; validation metrics after each epoch
    /// when `val` is given. The best checkpoint is chosen by validation DSC,
    /// or by lowest training loss without a validation set.
    pub fn fit(&mut self, train: &[SegmentationSample], val: Option<&[SegmentationSample]>, out: &FitOutputs) -> Result<History> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        for _ in 0..self.cfg.epochs {
            let (loss, steps) = self.run_epoch(train)?;
            let val_summary = match val {
                Some(v) if !v.is_empty() => Some(self.evaluate(v)?.aggregate.mean),
                _ => None,
            };
            let epoch = self.progress.epoch;
            log::info!(
                "epoch {epoch} loss {loss:.5}{}",
                val_summary.map_or(String::new(), |v| format!(" val_dsc {:.4} val_iou {:.4}", v.dsc, v.iou))
            );
            self.history.epochs.push(EpochRecord {
                epoch,
                loss,
                steps,
                val: val_summary,
            });
            let score = val_summary.map_or(-loss, |v| v.dsc);
            if let Some(dir) = &out.checkpoint_dir {
                self.save(&dir.join("last.ckpt"))?;
                if self.best_score.is_none_or(|b| score > b) {
                    self.save(&dir.join("best.ckpt"))?;
                }
            }
            if self.best_score.is_none_or(|b| score > b) {
                self.best_score = Some(score);
            }
            if let Some(path) = &out.history_csv {
                self.history.write_csv(path)?;
            }
        }
        Ok(self.history.clone())
    }
}
