use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::tape::{Gradients, ParamStore};
use crate::error::{D2kError, Result};

/// Mini-batch Adam settings shared by every trainable model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Training stops once an epoch improves the mean loss by less than this.
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch_size: 256,
            epochs: 10,
            min_delta: 1e-4,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(D2kError::config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(D2kError::config("batch_size and epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Sample-weighted mean training loss over the epoch.
    pub loss: f64,
    pub steps: usize,
    /// Held-out loss after the epoch, when training is validated.
    #[serde(default)]
    pub valid_loss: Option<f64>,
}

/// Seeded shuffling plus Adam state, kept across calls so training can be
/// continued block by block.
pub struct Trainer {
    config: TrainConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(params: &ParamStore, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: AdamState::new(
                params,
                AdamConfig {
                    lr: config.lr,
                    ..AdamConfig::default()
                },
            ),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7EA1_0000),
            config,
            step: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// One pass over sample indices `0..n` in shuffled mini-batches.
    /// `batch_loss` returns the mean loss of a batch and its gradients.
    pub fn epoch<F>(&mut self, params: &mut ParamStore, n: usize, batch_loss: &mut F) -> Result<f64>
    where
        F: FnMut(&ParamStore, &[usize]) -> Result<(f64, Gradients)>,
    {
        if n == 0 {
            return Err(D2kError::Training {
                step: self.step,
                msg: "no training samples".into(),
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let (loss, grads) = batch_loss(params, batch)?;
            if !loss.is_finite() {
                return Err(D2kError::Training {
                    step: self.step,
                    msg: format!("loss diverged to {loss}"),
                });
            }
            self.adam.step(params, &grads).map_err(|e| match e {
                D2kError::Training { msg, .. } => D2kError::Training { step: self.step, msg },
                other => other,
            })?;
            self.step += 1;
            total += loss * batch.len() as f64;
        }
        Ok(total / n as f64)
    }

    /// Runs up to `epochs` epochs, stopping early on a loss plateau.
    pub fn fit<F>(&mut self, params: &mut ParamStore, n: usize, mut batch_loss: F) -> Result<Vec<EpochMetrics>>
    where
        F: FnMut(&ParamStore, &[usize]) -> Result<(f64, Gradients)>,
    {
        let mut history: Vec<EpochMetrics> = Vec::new();
        for epoch in 1..=self.config.epochs {
            let loss = self.epoch(params, n, &mut batch_loss)?;
            let plateau = history
                .last()
                .is_some_and(|prev| prev.loss - loss < self.config.min_delta);
            history.push(EpochMetrics {
                epoch,
                loss,
                steps: self.step,
                valid_loss: None,
            });
            if plateau {
                break;
            }
        }
        Ok(history)
    }

    /// Runs up to `epochs` epochs, scoring `valid_loss` after each. Stops
    /// once `patience` consecutive epochs fail to improve the best held-out
    /// loss, and leaves `params` at the best epoch.
    pub fn fit_validated<F, V>(&mut self, params: &mut ParamStore, n: usize, mut batch_loss: F, mut valid_loss: V, patience: usize) -> Result<Vec<EpochMetrics>>
    where
        F: FnMut(&ParamStore, &[usize]) -> Result<(f64, Gradients)>,
        V: FnMut(&ParamStore) -> Result<f64>,
    {
        let mut history: Vec<EpochMetrics> = Vec::new();
        let mut best: Option<(f64, ParamStore)> = None;
        let mut stale = 0;
        for epoch in 1..=self.config.epochs {
            let loss = self.epoch(params, n, &mut batch_loss)?;
            let valid = valid_loss(params)?;
            history.push(EpochMetrics {
                epoch,
                loss,
                steps: self.step,
                valid_loss: Some(valid),
            });
            if best.as_ref().is_none_or(|(b, _)| valid < *b) {
                best = Some((valid, params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience.max(1) {
                    break;
                }
            }
        }
        if let Some((_, p)) = best {
            *params = p;
        }
        Ok(history)
    }
}
