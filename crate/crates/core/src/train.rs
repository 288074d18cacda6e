//! Momentum SGD with weight decay under a per-epoch cosine schedule.
//!
//! Training is single-threaded over parameters. The batch order of epoch `e`
//! is drawn from its own RNG stream seeded by `(seed, e)`, so a run resumed
//! from a checkpoint replays exactly the batches the uninterrupted run would
//! have seen.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataset::ClipSample;
use crate::error::{Error, Result};
use crate::eval::predict_clips;
use crate::metrics::{average_precision, Confusion};
use crate::model::ImportanceModel;

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean per-object training loss, measured before each batch's update.
    pub loss: f64,
    /// Validation metrics, empty when no validation set was given or the
    /// metric is undefined on it.
    pub ap: Option<f64>,
    pub f1: Option<f64>,
    pub acc: Option<f64>,
    pub lr: f64,
}

/// Learning rate of 0-based `epoch` out of `epochs`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}

/// Clip visiting order for 0-based `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub struct Trainer {
    cfg: TrainConfig,
    velocity: BTreeMap<String, Tensor>,
    epoch: usize,
    history: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: BTreeMap::new(),
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Continues from saved optimizer state after `history.len()` epochs.
    pub fn resume(cfg: TrainConfig, velocity: BTreeMap<String, Tensor>, history: Vec<EpochLog>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity,
            epoch: history.len(),
            history,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    /// Momentum buffers keyed by parameter path.
    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    /// Loss of one batch: the mean over all of its objects.
    pub fn batch_loss(model: &ImportanceModel, batch: &[&ClipSample]) -> Result<Tensor> {
        let total: usize = batch.iter().map(|c| c.num_objects()).sum();
        if total == 0 {
            return Err(Error::Input("batch without objects".into()));
        }
        let mut sum: Option<Tensor> = None;
        for clip in batch {
            let weighted = (model.clip_loss(clip)? * clip.num_objects() as f64)?;
            sum = Some(match sum {
                Some(s) => (s + weighted)?,
                None => weighted,
            });
        }
        let sum = sum.expect("non-empty batch");
        Ok((sum / total as f64)?)
    }

    fn step(&mut self, model: &ImportanceModel, loss: &Tensor, lr: f64) -> Result<()> {
        let grads = loss.backward()?;
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for (name, var) in model.named_vars() {
            // parameters of ablated branches never see a gradient
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let w = var.as_tensor().detach();
            let g = (grad.detach() + (&w * wd)?)?;
            let v = match self.velocity.get(&name) {
                Some(prev) => ((prev * mu)? + g)?,
                None => g,
            }
            .detach();
            var.set(&(&w - (&v * lr)?)?)?;
            self.velocity.insert(name, v);
        }
        Ok(())
    }

    /// Runs one epoch and returns the mean per-object loss.
    pub fn train_epoch(&mut self, model: &ImportanceModel, clips: &[ClipSample]) -> Result<f64> {
        if clips.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let lr = cosine_lr(self.cfg.lr, self.epoch, self.cfg.epochs);
        let order = epoch_order(self.cfg.seed, self.epoch, clips.len());
        let (mut loss_sum, mut objects) = (0.0, 0usize);
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&ClipSample> = chunk.iter().map(|&i| &clips[i]).collect();
            let loss = Self::batch_loss(model, &batch)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                let ids: Vec<String> = batch.iter().map(|c| format!("{}@{}", c.scene_id, c.t_end)).collect();
                return Err(Error::Divergence(format!(
                    "loss {value} at epoch {}, batch {b} (clips {})",
                    self.epoch + 1,
                    ids.join(", ")
                )));
            }
            let n: usize = batch.iter().map(|c| c.num_objects()).sum();
            loss_sum += value * n as f64;
            objects += n;
            self.step(model, &loss, lr)?;
        }
        self.epoch += 1;
        Ok(loss_sum / objects as f64)
    }

    /// Trains until `epochs` are complete, logging after every epoch.
    pub fn fit(
        &mut self,
        model: &ImportanceModel,
        train: &[ClipSample],
        val: Option<&[ClipSample]>,
        on_epoch: impl FnMut(&EpochLog),
    ) -> Result<&[EpochLog]> {
        self.fit_until(model, train, val, self.cfg.epochs, on_epoch)
    }

    /// Like [`Trainer::fit`] but stops once `stop` epochs are complete, so a
    /// checkpoint taken here can be resumed later.
    pub fn fit_until(
        &mut self,
        model: &ImportanceModel,
        train: &[ClipSample],
        val: Option<&[ClipSample]>,
        stop: usize,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<&[EpochLog]> {
        while self.epoch < self.cfg.epochs.min(stop) {
            let lr = cosine_lr(self.cfg.lr, self.epoch, self.cfg.epochs);
            let loss = self.train_epoch(model, train)?;
            let (ap, f1, acc) = match val {
                Some(v) if !v.is_empty() => validation_metrics(model, v, self.cfg.threshold)?,
                _ => (None, None, None),
            };
            let row = EpochLog {
                epoch: self.epoch,
                loss,
                ap,
                f1,
                acc,
                lr,
            };
            log::info!(
                "epoch {} loss {:.5} ap {} f1 {}",
                row.epoch,
                row.loss,
                fmt_opt(row.ap),
                fmt_opt(row.f1)
            );
            on_epoch(&row);
            self.history.push(row);
        }
        Ok(&self.history)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn validation_metrics(
    model: &ImportanceModel,
    clips: &[ClipSample],
    threshold: f64,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let preds = predict_clips(model, clips)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let labels: Vec<bool> = preds.iter().map(|p| p.label).collect();
    let ap = match average_precision(&scores, &labels) {
        Ok(ap) => Some(ap),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    let c = Confusion::at(&scores, &labels, threshold)?;
    Ok((ap, Some(c.f1()), Some(c.accuracy())))
}

/// Writes the log as CSV with columns `epoch, loss, ap, f1, acc, lr`.
pub fn write_history_csv(path: &Path, history: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
