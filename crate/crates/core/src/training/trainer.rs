use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::network::CsUnet;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

use super::checkpoint::Checkpoint;
use super::data::{collate, epoch_plan, AugmentConfig, SegSample};
use super::loss::combined_loss_nhwc;
use super::metrics::{dice_score, hausdorff};
use super::optim::{AdamW, OptimState};
use super::schedule::lr_schedule;

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub optimizer: AdamW,
    pub augment: AugmentConfig,
    /// Percentile for the reported Hausdorff distance (95 or 100).
    pub hd_percentile: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 2e-3,
            warmup_epochs: 3,
            seed: 0,
            optimizer: AdamW::default(),
            augment: AugmentConfig::default(),
            hd_percentile: 95.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err!("lr must be a positive number, got {}", self.lr));
        }
        if !(0.0..=100.0).contains(&self.hd_percentile) {
            return Err(config_err!("hd_percentile must lie in [0, 100]"));
        }
        Ok(())
    }
}

/// Aggregated validation metrics. Per-case, per-class values are averaged
/// over cases; the means then average over foreground classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: usize,
    pub dsc: Vec<f64>,
    pub mean_dsc: f64,
    pub hd: Vec<f64>,
    pub mean_hd: f64,
}

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dsc: Vec<f64>,
    pub val_mean_dsc: f64,
    pub val_hd: Vec<f64>,
    pub val_mean_hd: f64,
}

/// Argmax labels for one image `[C, H, W]`.
pub fn predict(model: &CsUnet, params: &ParamStore<f32>, sample: &SegSample) -> Result<Vec<u8>> {
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let img = Tensor::new(
        [1, sample.channels, sample.height, sample.width],
        sample.image.clone(),
    )?;
    let logits = model.forward_nhwc(&p, tape.constant(img))?.value();
    let k = model.config.num_classes;
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect())
}

/// Per-class Dice and Hausdorff for each case (foreground classes only).
pub fn case_metrics(
    pred: &[u8],
    truth: &[u8],
    height: usize,
    width: usize,
    num_classes: usize,
    hd_percentile: f64,
) -> (Vec<f64>, Vec<f64>) {
    let dsc = dice_score(pred, truth, num_classes).per_class;
    let hd = (1..num_classes)
        .map(|k| hausdorff(pred, truth, height, width, k as u8, hd_percentile))
        .collect();
    (dsc, hd)
}

/// Averages per-case metric rows in case order.
pub fn aggregate(rows: &[(Vec<f64>, Vec<f64>)]) -> EvalReport {
    let classes = rows.first().map_or(0, |r| r.0.len());
    let n = rows.len().max(1) as f64;
    let column_mean = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<f64> {
        (0..classes)
            .map(|k| rows.iter().map(|r| pick(r)[k]).sum::<f64>() / n)
            .collect()
    };
    let dsc = column_mean(|r| &r.0);
    let hd = column_mean(|r| &r.1);
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    EvalReport {
        cases: rows.len(),
        mean_dsc: mean(&dsc),
        mean_hd: mean(&hd),
        dsc,
        hd,
    }
}

/// Per-case `(dsc, hd)` rows in sample order; cases run in parallel on the
/// current rayon pool.
pub fn evaluate_cases(
    model: &CsUnet,
    params: &ParamStore<f32>,
    samples: &[SegSample],
    hd_percentile: f64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let k = model.config.num_classes;
    samples
        .par_iter()
        .map(|s| {
            let pred = predict(model, params, s)?;
            Ok(case_metrics(&pred, &s.mask, s.height, s.width, k, hd_percentile))
        })
        .collect()
}

/// Aggregates [`evaluate_cases`] in sample order, so results do not depend
/// on threading.
pub fn evaluate(
    model: &CsUnet,
    params: &ParamStore<f32>,
    samples: &[SegSample],
    hd_percentile: f64,
) -> Result<EvalReport> {
    Ok(aggregate(&evaluate_cases(model, params, samples, hd_percentile)?))
}

/// Mutable training state carried between epochs.
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub optim: OptimState<f32>,
    pub epochs_completed: usize,
    pub best_score: Option<f64>,
}

impl TrainState {
    pub fn fresh(params: ParamStore<f32>) -> Self {
        TrainState {
            optim: OptimState::new(&params),
            params,
            epochs_completed: 0,
            best_score: None,
        }
    }

    /// Restores from a checkpoint written by [`train`].
    pub fn resume(model: &CsUnet, ck: Checkpoint) -> Result<Self> {
        let (_, reference) = CsUnet::new::<f32>(&model.config, 0)?;
        ck.check_compatible(&reference)?;
        let optim = ck
            .optim_state
            .ok_or_else(|| Error::Config("checkpoint carries no optimizer state".into()))?;
        Ok(TrainState {
            params: ck.params,
            optim,
            epochs_completed: ck.epochs_completed,
            best_score: ck.best_score,
        })
    }

    fn checkpoint(&self, model: &CsUnet, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            model: model.config.clone(),
            epochs_completed: self.epochs_completed,
            seed: cfg.seed,
            best_score: self.best_score,
            optimizer: cfg.optimizer,
            params: self.params.clone(),
            optim_state: Some(self.optim.clone()),
        }
    }
}

/// One optimisation step on a batch; returns the batch loss.
pub fn train_step(
    model: &CsUnet,
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &[&SegSample],
    lr: f64,
) -> Result<f64> {
    let (images, labels) = collate(batch)?;
    let (loss, grads) = {
        let tape = Tape::new();
        let p = state.params.bind(&tape);
        let logits = model.forward_nhwc(&p, tape.constant(images))?;
        let loss = combined_loss_nhwc(logits, &labels)?;
        tape.backward(loss)?;
        let grads: Vec<_> = p.vars().iter().map(|v| v.grad()).collect();
        (loss.value().item() as f64, grads)
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    cfg.optimizer.step(&mut state.params, &grads, &mut state.optim, lr)?;
    Ok(loss)
}

/// Runs epochs `state.epochs_completed..cfg.epochs`, appending to
/// `run_dir/metrics.jsonl` and refreshing `last.ckpt` / `best.ckpt`
/// (best by mean validation Dice) after every epoch.
pub fn train(
    model: &CsUnet,
    state: &mut TrainState,
    cfg: &TrainConfig,
    train_set: &[SegSample],
    val_set: &[SegSample],
    run_dir: &Path,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let log_path = run_dir.join(METRICS_LOG);
    let mut records = Vec::new();
    for epoch in state.epochs_completed..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, cfg.lr, cfg.warmup_epochs);
        let plan = epoch_plan(cfg.seed, epoch, train_set.len(), cfg.augment);
        let mut loss_sum = 0.0;
        for chunk in plan.chunks(cfg.batch_size) {
            let augmented: Vec<SegSample> =
                chunk.iter().map(|&(i, t)| t.apply(&train_set[i])).collect();
            let batch: Vec<&SegSample> = augmented.iter().collect();
            loss_sum += train_step(model, state, cfg, &batch, lr)? * batch.len() as f64;
        }
        let val = if val_set.is_empty() {
            aggregate(&[])
        } else {
            evaluate(model, &state.params, val_set, cfg.hd_percentile)?
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_dsc: val.dsc,
            val_mean_dsc: val.mean_dsc,
            val_hd: val.hd,
            val_mean_hd: val.mean_hd,
        };
        let mut line = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
        line.push('\n');
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        log.write_all(line.as_bytes()).map_err(|e| Error::io(&log_path, e))?;

        state.epochs_completed = epoch + 1;
        let improved = state.best_score.is_none_or(|b| record.val_mean_dsc > b);
        if improved {
            state.best_score = Some(record.val_mean_dsc);
        }
        let ck = state.checkpoint(model, cfg);
        ck.save(&run_dir.join(LAST_CHECKPOINT))?;
        if improved {
            ck.save(&run_dir.join(BEST_CHECKPOINT))?;
        }
        on_epoch(&record);
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_means_over_cases_then_classes() {
        let rows = vec![(vec![1.0, 0.5], vec![0.0, 2.0]), (vec![0.0, 0.5], vec![4.0, 2.0])];
        let r = aggregate(&rows);
        assert_eq!(r.dsc, vec![0.5, 0.5]);
        assert_eq!(r.mean_dsc, 0.5);
        assert_eq!(r.hd, vec![2.0, 2.0]);
        assert_eq!(r.cases, 2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
