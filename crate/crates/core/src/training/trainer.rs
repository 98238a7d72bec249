use rand::seq::SliceRandom;
use serde::Serialize;

use crate::backbones::BackboneConfig;
use crate::encoding::{FeatureSpec, SessionExample};
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::numerics::{derive_seed, rng_from_seed};

use super::{Adam, Checkpoint, JointModel, TrainConfig};

const SHUFFLE_STREAM: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub steps: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model restored to the epoch with the best validation AUC.
    pub model: JointModel,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub fn evaluate_auc(
    model: &JointModel,
    examples: &[&SessionExample],
    batch_size: usize,
) -> Result<f64> {
    let pred = model.predict(examples, batch_size)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    auc(&pred.output, &labels)
}

fn diverged(step: u64, err: Error) -> Error {
    match err {
        Error::NonFinite(what) => Error::Divergence {
            step,
            reason: format!("non-finite value in {what}"),
        },
        other => other,
    }
}

/// Minibatch Adam on the behavior loss with early stopping on validation AUC.
pub fn train(
    features: FeatureSpec,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    train_set: &[&SessionExample],
    valid_set: &[&SessionExample],
) -> Result<TrainOutcome> {
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty splits (train={}, validation={})",
            train_set.len(),
            valid_set.len()
        )));
    }
    let mut model = JointModel::new(features, backbone, cfg)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, JointModel)> = None;
    let mut since_best = 0;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(
            cfg.seed,
            SHUFFLE_STREAM + epoch as u64,
        )));
        let mut total = 0.0;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i]));
            let loss = model
                .train_step(&batch, &mut adam)
                .map_err(|e| diverged(step, e))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    reason: format!("loss {loss}"),
                });
            }
            total += loss * batch.len() as f64;
        }
        let val_auc =
            evaluate_auc(&model, valid_set, cfg.batch_size).map_err(|e| diverged(step, e))?;
        let train_loss = total / train_set.len() as f64;
        log::info!(
            "{} epoch {epoch}: train loss {train_loss:.5}, validation AUC {val_auc:.5}",
            cfg.variant
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
            steps: step,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_auc > *b) {
            best = Some((val_auc, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    let aucs = history.iter().map(|h| h.val_auc).collect();
    let checkpoint = Checkpoint::capture(&model, features, backbone, cfg, history.len(), aucs);
    Ok(TrainOutcome {
        model,
        checkpoint,
        history,
        best_epoch,
    })
}
