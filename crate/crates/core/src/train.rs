//! Mini-batch training and evaluation loops shared by base training and
//! adaptation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FrameExample;
use crate::error::{Error, Result};
use crate::nnet::layers::argmax;
use crate::nnet::{batch_xent, BnMode, Model};
use crate::optim::{Adam, AdamConfig, ParamGroup, DEFAULT_LR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    6
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    DEFAULT_LR
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
        }
    }
}

/// One JSON-lines metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub frame_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub frame_accuracy: f64,
}

const EVAL_BATCH: usize = 64;

/// Mean loss and frame accuracy with running batchnorm statistics.
pub fn evaluate(model: &Model, data: &[FrameExample]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in data.chunks(EVAL_BATCH) {
        let frames: Vec<&[f64]> = chunk.iter().map(|e| e.frame.as_slice()).collect();
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let (logits, _) = model.forward(&frames, BnMode::Eval)?;
        let (l, _) = batch_xent(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        correct += logits
            .iter()
            .zip(&labels)
            .filter(|(z, &y)| argmax(z) == y)
            .count();
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        frame_accuracy: correct as f64 / n,
    })
}

/// How the forward pass treats batchnorm while fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnTraining {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics only; nothing in batchnorm changes.
    Frozen,
}

pub struct FitOptions<'a> {
    pub groups: &'a [ParamGroup],
    pub bn: BnTraining,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Runs `epochs` passes of shuffled mini-batch Adam over `data`, updating
/// only `groups`. Each epoch appends a `train` record (mean batch loss) and,
/// when `heldout` is non-empty, a held-out record; epoch 0 holds the
/// evaluation before any update.
pub fn fit(
    model: &mut Model,
    data: &[FrameExample],
    heldout: &[FrameExample],
    heldout_name: &str,
    opts: &FitOptions,
) -> Result<Vec<EpochMetrics>> {
    if data.is_empty() {
        return Err(Error::invalid("no training frames"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut metrics = Vec::new();
    let record = |model: &Model, epoch: usize, metrics: &mut Vec<EpochMetrics>| -> Result<()> {
        if !heldout.is_empty() {
            let e = evaluate(model, heldout)?;
            metrics.push(EpochMetrics {
                epoch,
                split: heldout_name.into(),
                loss: e.loss,
                frame_accuracy: e.frame_accuracy,
            });
        }
        Ok(())
    };
    record(model, 0, &mut metrics)?;

    let active: Vec<&str> = opts
        .groups
        .iter()
        .filter(|g| !g.frozen)
        .map(|g| g.name.as_str())
        .collect();
    let bn_mode = match opts.bn {
        BnTraining::Train => BnMode::Train,
        BnTraining::Frozen => BnMode::Frozen,
    };
    let mut adam = Adam::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(opts.batch_size) {
            let frames: Vec<&[f64]> = batch.iter().map(|&i| data[i].frame.as_slice()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data[i].label).collect();
            let (logits, cache) = model.forward(&frames, bn_mode)?;
            let (loss, d) = batch_xent(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss in epoch {epoch}"),
                });
            }
            total += loss * batch.len() as f64;
            correct += logits
                .iter()
                .zip(&labels)
                .filter(|(z, &y)| argmax(z) == y)
                .count();
            let grads = model.backward(&cache, &d, |name| active.contains(&name))?;
            adam.step(model, &grads, opts.groups).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} in epoch {epoch}"),
                },
                other => other,
            })?;
            model.update_running_stats(&cache);
        }
        let n = data.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: total / n,
            frame_accuracy: correct as f64 / n,
        });
        log::info!("epoch {epoch}: train loss {:.4}", total / n);
        record(model, epoch, &mut metrics)?;
    }
    Ok(metrics)
}

/// Base training: every trainable group at one learning rate, batchnorm
/// in training mode.
pub fn train_model(
    model: &mut Model,
    train: &[FrameExample],
    dev: &[FrameExample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    let groups: Vec<ParamGroup> = model
        .groups()
        .into_iter()
        .filter(|g| g.kind.is_trainable())
        .map(|g| ParamGroup::new(g.name, cfg.learning_rate))
        .collect();
    fit(
        model,
        train,
        dev,
        "dev",
        &FitOptions {
            groups: &groups,
            bn: BnTraining::Train,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        },
    )
}
