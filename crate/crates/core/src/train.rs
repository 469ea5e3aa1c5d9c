//! Training loop: Adam on the composite loss with per-epoch checkpoints and
//! exact resume at epoch boundaries.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{make_batch, Batch, Sample};
use crate::error::{CtoError, Result};
use crate::graph::Graph;
use crate::losses::{total_loss, LossBreakdown, LossTargets, DEFAULT_ALPHA};
use crate::model::{CtoModel, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub image_size: usize,
    pub alpha: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 32,
            epochs: 90,
            image_size: 256,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Batch 4 at 64x64, for CPU runs.
    pub fn desk() -> Self {
        Self {
            batch: 4,
            image_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CtoError::Config(format!("learning rate {} must be finite and nonnegative", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(CtoError::Config("batch and epochs must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(CtoError::Config(format!(
                "image size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(CtoError::Config(format!("alpha {} must be finite and nonnegative", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    /// 1-based optimizer step.
    pub step: u64,
    pub loss: LossBreakdown,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

pub struct Trainer<T> {
    pub model: CtoModel<T>,
    pub adam: Adam<T>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Initializes the model from `config.seed`.
    pub fn new(model: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.image_size != config.image_size {
            return Err(CtoError::Config(format!(
                "model expects {} pixel inputs but training size is {}",
                model.image_size, config.image_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model: CtoModel::new(model, &mut rng)?,
            adam: Adam::new(AdamConfig::with_lr(config.lr)),
            config,
            epoch: 0,
        })
    }

    pub fn resume(checkpoint: &Checkpoint) -> Result<Self> {
        if checkpoint.meta.scalar != T::NAME {
            return Err(CtoError::Checkpoint(format!(
                "checkpoint was trained in {}, not {}",
                checkpoint.meta.scalar,
                T::NAME
            )));
        }
        Ok(Self {
            model: checkpoint.build_model()?,
            adam: checkpoint.restore_adam(),
            config: checkpoint.meta.train.clone(),
            epoch: checkpoint.meta.epoch,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Forward, loss and backward on one batch without touching the parameters.
    pub fn loss_and_grads(&mut self, batch: &Batch<T>) -> Result<(LossBreakdown, crate::graph::Grads<T>)> {
        let mut g = Graph::new(true);
        let x = g.input(batch.images.clone());
        let out = self.model.forward(&mut g, x)?;
        let targets = LossTargets {
            interior: g.input(batch.interior.clone()),
            boundary: out.boundary.map(|_| g.input(batch.boundary.clone())),
        };
        let (loss, breakdown) = total_loss(&mut g, &out.interior, out.boundary, &targets, self.config.alpha)?;
        if let Some(component) = breakdown.non_finite_component() {
            return Err(CtoError::NonFinite {
                component,
                step: self.adam.step as usize + 1,
            });
        }
        let grads = g.backward(loss)?;
        Ok((breakdown, grads))
    }

    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossBreakdown> {
        let (breakdown, grads) = self.loss_and_grads(batch)?;
        self.adam.step(&mut self.model, &grads);
        Ok(breakdown)
    }

    /// Batch order for `epoch` (0-based); depends only on the seed and epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs the next epoch and writes its checkpoint when a directory is configured.
    pub fn run_epoch(&mut self, data: &[Sample], log: &mut dyn FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        if data.is_empty() {
            return Err(CtoError::EmptyDataset("training set has no samples".into()));
        }
        let classes = self.model.config().output_channels();
        let order = self.epoch_order(self.epoch, data.len());
        let mut logs = Vec::with_capacity(order.len().div_ceil(self.config.batch));
        for chunk in order.chunks(self.config.batch) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = make_batch(&samples, classes)?;
            let loss = self.train_step(&batch)?;
            let entry = StepLog {
                epoch: self.epoch + 1,
                step: self.adam.step,
                loss,
            };
            log(&entry);
            logs.push(entry);
        }
        self.epoch += 1;
        if let Some(dir) = &self.config.checkpoint_dir {
            self.checkpoint().write(&checkpoint_path(dir, self.epoch))?;
        }
        Ok(logs)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn fit(&mut self, data: &[Sample], log: &mut dyn FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            all.extend(self.run_epoch(data, log)?);
        }
        Ok(all)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.adam, &self.config, self.epoch)
    }
}
