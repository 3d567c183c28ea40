//! Training, evaluation and retraining loops.

use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::layers::softmax_rows;
use super::network::Network;
use super::optim::OptimizerSpec;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerSpec,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Whether the gradient is of the summed or the averaged batch loss.
    #[serde(default)]
    pub loss_reduction: LossReduction,
    /// Samples per parallel evaluation chunk.
    #[serde(default = "eval_chunk")]
    pub eval_chunk: usize,
    /// Samples used to calibrate ADC full scales when they are not given.
    #[serde(default = "calibration_samples")]
    pub calibration_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    #[default]
    Sum,
    Mean,
}

fn eval_chunk() -> usize {
    500
}

fn calibration_samples() -> usize {
    1000
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerSpec::Sgd,
            learning_rate: 0.005,
            epochs: 1,
            batch_size: 100,
            loss_reduction: LossReduction::Sum,
            eval_chunk: eval_chunk(),
            calibration_samples: calibration_samples(),
        }
    }
}

impl TrainConfig {
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = self.optimizer.violations(&format!("{prefix}.optimizer"));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("{prefix}.learning_rate: {} must be > 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            v.push(format!("{prefix}.batch_size: must be >= 1"));
        }
        if self.eval_chunk == 0 {
            v.push(format!("{prefix}.eval_chunk: must be >= 1"));
        }
        if self.calibration_samples == 0 {
            v.push(format!("{prefix}.calibration_samples: must be >= 1"));
        }
        v
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    /// Test accuracy before the first epoch.
    pub initial_test_acc: f64,
    pub epochs: Vec<EpochRecord>,
    pub cells_written: u64,
    pub pulses: u64,
}

impl RunRecord {
    pub fn final_test_acc(&self) -> f64 {
        self.epochs.last().map_or(self.initial_test_acc, |e| e.test_acc)
    }
}

pub const CSV_HEADER: &str = "epoch,train_loss,train_acc,test_acc,seconds";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, self.seconds
        )
    }
}

/// Mean cross-entropy and accuracy of probabilities `p` against `labels`.
pub fn loss_and_accuracy(p: &Array2<f64>, labels: &[u8]) -> (f64, f64) {
    let mut loss = 0.0;
    let mut hits = 0usize;
    for (row, &l) in p.axis_iter(Axis(0)).zip(labels) {
        loss -= row[l as usize].max(1e-300).ln();
        let arg = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0;
        hits += (arg == l as usize) as usize;
    }
    let n = labels.len().max(1) as f64;
    (loss / n, hits as f64 / n)
}

/// Test-set accuracy and loss using one read of the weights.
pub fn evaluate(net: &mut Network, ds: &Dataset, chunk: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::domain("evaluation dataset is empty"));
    }
    let p = net.predict(&ds.images, chunk)?;
    Ok(loss_and_accuracy(&p, &ds.labels))
}

/// Top-1 accuracy.
pub fn infer(net: &mut Network, ds: &Dataset, chunk: usize) -> Result<f64> {
    Ok(evaluate(net, ds, chunk)?.1)
}

/// Calibrates any uncalibrated ADC on the first samples of `ds`.
pub fn calibrate(net: &mut Network, ds: &Dataset, samples: usize) -> Result<()> {
    let n = samples.min(ds.len());
    let idx: Vec<usize> = (0..n).collect();
    net.calibrate_adc(&ds.select(&idx).images)
}

/// One gradient step on a mini-batch. Returns `(loss, correct predictions)`.
pub fn train_step(net: &mut Network, x: &Array2<f64>, labels: &[u8], cfg: &TrainConfig) -> Result<(f64, usize, crate::crossbar::WriteStats)> {
    let out = net.forward_train(x)?;
    let p = softmax_rows(&out);
    let (loss, acc) = loss_and_accuracy(&p, labels);
    let b = labels.len() as f64;
    let mut g = p;
    for (mut row, &l) in g.axis_iter_mut(Axis(0)).zip(labels) {
        row[l as usize] -= 1.0;
        if cfg.loss_reduction == LossReduction::Mean {
            row /= b;
        }
    }
    net.backward(&g)?;
    let st = net.apply_updates(&cfg.optimizer, cfg.learning_rate)?;
    Ok((loss, (acc * b).round() as usize, st))
}

/// Runs `cfg.epochs` epochs of mini-batch training, evaluating on `test`
/// after each. `on_epoch` sees every record as it is produced.
pub fn train<F>(net: &mut Network, train: &Dataset, test: &Dataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<RunRecord>
where
    F: FnMut(&EpochRecord),
{
    if train.is_empty() {
        return Err(Error::domain("training dataset is empty"));
    }
    let errs = cfg.violations("train");
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    calibrate(net, train, cfg.calibration_samples)?;
    let mut rec = RunRecord {
        initial_test_acc: infer(net, test, cfg.eval_chunk)?,
        ..Default::default()
    };
    let start_epoch = net.step; // distinct shuffles when training resumes
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        let mut seen = 0usize;
        for idx in data::batches(train.len(), cfg.batch_size, net.seed, start_epoch + epoch as u64)? {
            if idx.len() < 2 && net.layers.iter().any(|l| matches!(l, super::network::Layer::BatchNorm(_))) {
                continue;
            }
            let x = train.images.select(Axis(0), &idx);
            let labels: Vec<u8> = idx.iter().map(|&i| train.labels[i]).collect();
            let (loss, h, st) = train_step(net, &x, &labels, cfg)?;
            loss_sum += loss * idx.len() as f64;
            hits += h;
            seen += idx.len();
            rec.cells_written += st.cells_written as u64;
            rec.pulses += st.pulses;
        }
        let test_acc = infer(net, test, cfg.eval_chunk)?;
        let r = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: hits as f64 / seen.max(1) as f64,
            test_acc,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.4} test {:.4} ({:.1}s)",
            r.train_loss,
            r.train_acc,
            r.test_acc,
            r.seconds
        );
        on_epoch(&r);
        rec.epochs.push(r);
    }
    net.sync_latent();
    Ok(rec)
}

/// Continues training from the network's current weights. Identical to
/// [`train`]; kept separate so callers state intent.
pub fn retrain<F>(net: &mut Network, train_ds: &Dataset, test: &Dataset, cfg: &TrainConfig, on_epoch: F) -> Result<RunRecord>
where
    F: FnMut(&EpochRecord),
{
    train(net, train_ds, test, cfg, on_epoch)
}
