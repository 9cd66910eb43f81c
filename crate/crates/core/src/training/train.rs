use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::model::{evaluate, Noise, TrainedModel};
use super::optim::{adam_step, AdamConfig, OptimizerState};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::tensor::RngState;

const STREAM_TRAIN: u64 = 11;

fn default_batch_size() -> usize {
    128
}
fn default_max_epochs() -> usize {
    200
}
fn default_patience() -> usize {
    10
}
fn default_logit_learning_rate() -> f64 {
    1e-2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub adam: AdamConfig,
    /// Adam step size for the scheme logits. Adam moves each coordinate by
    /// at most about this much per step, so it bounds how fast the scheme
    /// belief can change.
    #[serde(default = "default_logit_learning_rate")]
    pub logit_learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            logit_learning_rate: default_logit_learning_rate(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example training objective over the epoch.
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// `softmax(logits)` at the end of the epoch, when the model has one.
    pub pi: Option<Vec<f64>>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrajectoryLog {
    pub fn scheme_count(&self) -> usize {
        self.records
            .first()
            .and_then(|r| r.pi.as_ref())
            .map_or(0, |p| p.len())
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .map(|r| r.val_accuracy)
    }

    /// CSV with columns `epoch,train_loss,val_acc,p_1..p_k,wall_time_s`.
    pub fn to_csv(&self) -> Result<String> {
        let q = self.scheme_count();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch".to_string(), "train_loss".into(), "val_acc".into()];
        header.extend((1..=q).map(|i| format!("p_{i}")));
        header.push("wall_time_s".into());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.epoch.to_string(), r.train_loss.to_string(), r.val_accuracy.to_string()];
            if let Some(pi) = &r.pi {
                row.extend(pi.iter().map(|p| p.to_string()));
            }
            row.push(format!("{:.3}", r.wall_time_s));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv()?;
        atomic_write(path, |w| w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e)))
    }
}

fn param_snapshot(model: &TrainedModel) -> String {
    let mut s = String::new();
    for (name, p) in model.param_names().iter().zip(model.params()) {
        let finite = p.iter().filter(|v| v.is_finite()).count();
        let max = p.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
        let _ = write!(s, "{name}: {finite}/{} finite, max |v| {max:.3e}; ", p.len());
    }
    if let Some(pi) = model.scheme_mean() {
        let _ = write!(s, "pi {pi:?}");
    }
    s
}

/// Minibatch Adam with early stopping on validation accuracy. The returned
/// model carries the parameters of the best validation epoch and its final
/// scheme mean.
pub fn train(
    mut model: TrainedModel,
    train_set: &ImageDataset,
    val_set: &ImageDataset,
    config: &TrainConfig,
) -> Result<(TrainedModel, TrajectoryLog)> {
    if config.batch_size == 0 || config.max_epochs == 0 {
        return Err(Error::Config("batch size and epoch budget must be positive".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if train_set.dim() != model.spec().input_dim {
        return Err(Error::Data(format!(
            "training images have {} pixels, model expects {}",
            train_set.dim(),
            model.spec().input_dim
        )));
    }
    if train_set.class_count() > model.spec().class_count {
        return Err(Error::Data(format!(
            "training set has {} classes, model predicts {}",
            train_set.class_count(),
            model.spec().class_count
        )));
    }

    let lengths: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut opt = OptimizerState::new(&lengths, config.adam)?;
    if let Some(idx) = model.param_names().iter().position(|n| *n == "input.logits") {
        opt.set_learning_rate(idx, config.logit_learning_rate)?;
    }

    let mut rng = RngState::with_stream(config.seed, STREAM_TRAIN);
    let n = train_set.len();
    let start = Instant::now();
    let mut log = TrajectoryLog::default();
    let mut best: Option<(f64, TrainedModel)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=config.max_epochs {
        let order = rng.permutation(n);
        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let x = train_set.images().select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels()[i]).collect();
            let step = model.step(&x, &labels, Noise::Sample(&mut rng), n)?;
            let grads_finite = step.grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !step.loss.is_finite() || !grads_finite {
                return Err(Error::NonFinite {
                    epoch,
                    batch,
                    snapshot: param_snapshot(&model),
                    partial_log: Box::new(log),
                });
            }
            epoch_loss += step.loss;
            adam_step(&mut opt, &mut model.params_mut(), &step.grads)?;
        }

        let val_accuracy = evaluate(&model, val_set)?;
        log.records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / n as f64,
            val_accuracy,
            pi: model.scheme_mean(),
            wall_time_s: start.elapsed().as_secs_f64(),
        });

        if best.as_ref().is_none_or(|(acc, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, model.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }

    let (_, mut best_model) = best.expect("at least one epoch ran");
    best_model.final_pi = best_model.scheme_mean();
    Ok((best_model, log))
}
