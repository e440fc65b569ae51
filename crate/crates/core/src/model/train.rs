use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{loss_and_gradients_with, AdamW, AdamWConfig, DropoutMode, LossWeights, TrainingData, TraitModel};
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            batch_size: 16,
            max_epochs: 100,
            patience: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_qwk: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_qwk: f64,
    pub stopped_early: bool,
}

/// Minibatch AdamW training with dev-QWK early stopping.
///
/// After every epoch the dev set is scored (QWK averaged over all traits).
/// Training stops once `patience` consecutive epochs fail to beat the best
/// score (so `patience = 0` trains a single epoch), and the model is
/// restored to the parameters of the best epoch.
pub fn train(
    model: &mut TraitModel,
    train_set: &TrainingData,
    dev: &TrainingData,
    weights: &LossWeights,
    config: &TrainConfig,
) -> Result<TrainLog> {
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if dev.is_empty() {
        return Err(Error::EmptyInput("dev set"));
    }
    if config.batch_size == 0 || config.max_epochs == 0 {
        return Err(Error::Config("batch size and max epochs must be positive".into()));
    }
    let coefs = weights.coefficients(model.traits())?;
    let mut optimizer = AdamW::new(config.optimizer.clone(), model);
    let mut order_rng = rng_from(config.seed, "train/order", 0);
    let mut dropout_rng = rng_from(config.seed, "train/dropout", 0);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut log = TrainLog {
        best_dev_qwk: f64::NEG_INFINITY,
        ..TrainLog::default()
    };
    let mut best = model.clone();
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = train_set.features.select(Axis(0), chunk);
            let t = train_set.targets.select(Axis(0), chunk);
            let m = train_set.mask.select(Axis(0), chunk);
            let (value, grads) =
                loss_and_gradients_with(model, x.view(), &t, &m, &coefs, DropoutMode::Shared(&mut dropout_rng))?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            optimizer.step(model, &grads);
            loss_sum += value;
            batches += 1;
        }
        let pred = model.predict(dev.features.view())?;
        let dev_qwk = dev.mean_qwk(&pred)?;
        let dev_loss = super::loss_with_coefficients(&pred, &dev.targets, &dev.mask, &coefs)?;
        let improved = dev_qwk > log.best_dev_qwk;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev_loss,
            dev_qwk,
            improved,
        });
        if improved {
            log.best_dev_qwk = dev_qwk;
            log.best_epoch = epoch;
            best.clone_from(model);
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= config.patience && epoch < config.max_epochs {
            log.stopped_early = true;
            break;
        }
    }
    *model = best;
    model.trained = true;
    Ok(log)
}
