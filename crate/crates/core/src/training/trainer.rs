use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::metrics::{compute_metrics, EarlyStopping, MetricsReport, StopDecision};
use super::optim::{AdamW, OptimizerState, ScheduleState, ScheduleUnit};
use super::{Result, TrainError};
use crate::dataset::{LagWindow, MacdStats};
use crate::model::{argmax_rows, Batch, Meant};
use crate::nn::Session;
use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleState,
    pub optimizer: AdamW,
    /// Epochs without validation macro-F1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 16,
            schedule: ScheduleState::default(),
            optimizer: AdamW::default(),
            patience: 3,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(TrainError::Contract(
                "epochs, batch size and patience must be >= 1".into(),
            ));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [LagWindow],
    pub val: &'a [LagWindow],
    pub stats: &'a MacdStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy of the predictions made while training, before each update.
    pub train_accuracy: f64,
    pub val: MetricsReport,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the best validation macro-F1.
    pub best: Meant,
    pub best_epoch: usize,
    /// Parameters after the last completed epoch.
    pub last: Meant,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn need_images(model: &Meant) -> bool {
    model.config().fusion.modalities.image
}

/// Predictions without gradient recording, batches evaluated in parallel.
fn predict_all(model: &Meant, windows: &[LagWindow], stats: &MacdStats, batch_size: usize) -> Result<Vec<usize>> {
    let images = need_images(model);
    let chunks: Vec<&[LagWindow]> = windows.chunks(batch_size.max(1)).collect();
    let preds = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&LagWindow> = chunk.iter().collect();
            let batch = Batch::from_windows(&refs, stats, images)?;
            Ok(model.predict(&batch)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(preds.concat())
}

pub fn evaluate(model: &Meant, windows: &[LagWindow], stats: &MacdStats, batch_size: usize) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(TrainError::Contract("cannot evaluate an empty split".into()));
    }
    let preds = predict_all(model, windows, stats, batch_size)?;
    let labels: Vec<usize> = windows.iter().map(|w| usize::from(w.label)).collect();
    compute_metrics(&preds, &labels)
}

enum Step {
    Finite(f64, Vec<Vec<f64>>, Vec<usize>),
    NonFinite(f64),
}

fn forward_backward(model: &Meant, s: &mut Session, batch: &Batch) -> Result<Step> {
    let out = model.arch.forward(s, batch)?;
    let preds = argmax_rows(s.tape.data(out.logits), 2);
    let loss_var = s.tape.cross_entropy(out.logits, &batch.labels)?;
    let loss = s.tape.value(loss_var).item()?;
    if !loss.is_finite() {
        return Ok(Step::NonFinite(loss));
    }
    s.tape.backward(loss_var)?;
    Ok(Step::Finite(loss, s.grads(), preds))
}

fn diverged(epoch: usize, batch: usize, loss: f64, best: Meant) -> TrainError {
    log::error!("loss diverged at epoch {epoch}, batch {batch}");
    TrainError::Diverged {
        epoch,
        batch,
        loss,
        last_good: Box::new(best),
    }
}

fn json_line(record: &EpochRecord) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(record)?)?)
}

/// Seeded mini-batch AdamW with validation after every epoch. With
/// `out_dir`, writes `train_log.jsonl` and `best.ckpt` as training proceeds.
pub fn train(mut model: Meant, data: TrainData<'_>, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(TrainError::Contract(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    let images = need_images(&model);
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(&model.store, cfg.optimizer);
    let mut schedule = cfg.schedule;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let num_batches = data.train.len().div_ceil(cfg.batch_size);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let epoch_lr = schedule.lr();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let lr = match schedule.unit {
                ScheduleUnit::Epoch => epoch_lr,
                ScheduleUnit::Step => {
                    let lr = schedule.lr();
                    schedule.advance(1.0 / num_batches as f64);
                    lr
                }
            };
            let refs: Vec<&LagWindow> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = Batch::from_windows(&refs, data.stats, images)?;
            let step = {
                let mut s = Session::new(&model.store);
                forward_backward(&model, &mut s, &batch)
            };
            let (loss, grads, preds) = match step {
                Ok(Step::Finite(loss, grads, preds)) => (loss, grads, preds),
                Ok(Step::NonFinite(loss)) => {
                    return Err(diverged(epoch, bi, loss, best));
                }
                Err(TrainError::Tensor(TensorError::Numeric(msg))) => {
                    log::debug!("{msg}");
                    return Err(diverged(epoch, bi, f64::NAN, best));
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss * idx.len() as f64;
            correct += preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
            opt.step(&mut model.store, &grads, lr)?;
        }
        if schedule.unit == ScheduleUnit::Epoch {
            schedule.advance(1.0);
        }
        let val = evaluate(&model, data.val, data.stats, cfg.batch_size)?;
        let decision = stopper.observe(val.macro_f1);
        let improved = decision == StopDecision::Improved;
        let record = EpochRecord {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / data.train.len() as f64,
            train_accuracy: correct as f64 / data.train.len() as f64,
            val,
            improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} train acc {:.4} val macro-F1 {:.4}",
            record.train_loss,
            record.train_accuracy,
            record.val.macro_f1
        );
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", json_line(&record)?)?;
            f.flush()?;
        }
        log.push(record);
        if improved {
            best = model.clone();
            best_epoch = epoch;
            if let Some(dir) = out_dir {
                save_checkpoint(&best, &dir.join("best.ckpt"))?;
            }
        }
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
        stopped_early,
    })
}
