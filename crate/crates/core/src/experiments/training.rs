//! Minibatch SGD over utterances with one or more targets each.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{FeatureSequence, Transcript};
use crate::model::{ParamGrads, TransducerModel};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Halve the learning rate whenever an epoch's mean loss exceeds the
    /// previous epoch's.
    #[serde(default = "yes")]
    pub halve_on_worse: bool,
    /// Rescale each minibatch gradient to at most this norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 8,
            halve_on_worse: true,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Validation("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One training utterance and the targets its loss sums over.
#[derive(Clone, Debug)]
pub struct TrainItem<'a> {
    pub id: &'a str,
    pub features: &'a FeatureSequence,
    pub targets: Vec<Transcript>,
}

/// What happened during a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub epoch_losses: Vec<f64>,
    pub dev_losses: Vec<f64>,
    pub best_dev_loss: Option<f64>,
    /// Epoch whose parameters were kept (0 = initial parameters).
    pub best_epoch: usize,
    pub final_learning_rate: f64,
}

/// Mean evaluation-mode loss over `(features, target)` pairs.
pub fn mean_loss(model: &TransducerModel, pairs: &[(&FeatureSequence, &Transcript)]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (x, y) in pairs {
        total += model.loss(x, y)?.nll();
    }
    Ok(total / pairs.len() as f64)
}

/// Trains `model` in place. With a dev set, the parameters with the lowest
/// dev loss seen after any epoch (or before the first) are restored at the
/// end.
pub fn train(
    model: &mut TransducerModel,
    items: &[TrainItem<'_>],
    dev: &[(&FeatureSequence, &Transcript)],
    cfg: &TrainConfig,
    stage: &str,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut summary = TrainSummary {
        final_learning_rate: cfg.learning_rate,
        ..Default::default()
    };
    if items.is_empty() || cfg.epochs == 0 {
        return Ok(summary);
    }
    let mut lr = cfg.learning_rate;
    let mut best: Option<(f64, Vec<f64>)> = None;
    if !dev.is_empty() {
        let d = mean_loss(model, dev)?;
        best = Some((d, model.params().to_vec()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut shuffle = rng::stream(cfg.seed, rng::derive(rng::tag_of("shuffle"), epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = ParamGrads::zeros(model.param_count());
            for (i, &idx) in batch.iter().enumerate() {
                let item = &items[idx];
                let dropout_seed = rng::derive(
                    cfg.seed,
                    rng::derive(epoch as u64, (b * cfg.batch_size + i) as u64),
                );
                let (loss, g) = model
                    .multi_loss_and_param_grads(item.features, &item.targets, true, dropout_seed)
                    .map_err(|e| match e {
                        Error::Divergence { detail, .. } => Error::Divergence {
                            stage: format!("{stage} epoch {epoch} utterance {}", item.id),
                            detail,
                        },
                        other => other,
                    })?;
                epoch_loss += loss.nll();
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if let Some(c) = cfg.clip_norm {
                let n = grads.norm();
                if n > c {
                    grads.scale(c / n);
                }
            }
            model.sgd_step(&grads, lr).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence {
                    stage: format!("{stage} epoch {epoch}"),
                    detail,
                },
                other => other,
            })?;
        }
        let mean = epoch_loss / items.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence {
                stage: format!("{stage} epoch {epoch}"),
                detail: format!("mean training loss {mean}"),
            });
        }
        if cfg.halve_on_worse {
            if let Some(&prev) = summary.epoch_losses.last() {
                if mean > prev {
                    lr *= 0.5;
                }
            }
        }
        summary.epoch_losses.push(mean);
        if !dev.is_empty() {
            let d = mean_loss(model, dev)?;
            summary.dev_losses.push(d);
            if best.as_ref().is_none_or(|(b, _)| d < *b) {
                best = Some((d, model.params().to_vec()));
                summary.best_epoch = epoch + 1;
            }
        } else {
            summary.best_epoch = epoch + 1;
        }
    }
    if let Some((d, params)) = best {
        summary.best_dev_loss = Some(d);
        *model = TransducerModel::from_parameters(model.config().clone(), params)?;
    }
    summary.final_learning_rate = lr;
    Ok(summary)
}
