//! Mini-batch training with 2PK epochs, AdamW and per-epoch evaluation.

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::compute_loss;
use super::network::Model;
use super::optim::AdamW;
use super::retrieval::{evaluate_retrieval, Direction, RetrievalResult};
use super::schedule::TrainSchedule;
use crate::data::{Dataset, ModalityBatch, PkBatchSpec, PkSampler};
use crate::error::{Error, Result};

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub rank1: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub pk: PkBatchSpec,
    pub direction: Direction,
    /// Seeds batch sampling.
    pub seed: u64,
}

/// Model, optimizer state and the identity-to-class mapping of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    optimizer: AdamW,
    train_ids: Vec<usize>,
    class_of: Vec<Option<usize>>,
}

impl Trainer {
    /// Training identities map to classifier rows in the given order.
    pub fn new(model: Model, train_ids: Vec<usize>) -> Result<Self> {
        if train_ids.len() > model.config().num_classes {
            return Err(Error::Config(format!(
                "{} training identities but only {} classifier rows",
                train_ids.len(),
                model.config().num_classes
            )));
        }
        let size = train_ids.iter().max().map_or(0, |m| m + 1);
        let mut class_of = vec![None; size];
        for (class, &id) in train_ids.iter().enumerate() {
            if class_of[id].replace(class).is_some() {
                return Err(Error::Config(format!("identity {id} listed twice")));
            }
        }
        Ok(Self {
            model,
            optimizer: AdamW::default(),
            train_ids,
            class_of,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn train_ids(&self) -> &[usize] {
        &self.train_ids
    }

    fn labels(&self, batch: &ModalityBatch) -> Result<Vec<usize>> {
        batch
            .identities
            .iter()
            .map(|&id| {
                self.class_of
                    .get(id)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::Config(format!("identity {id} is not a training identity")))
            })
            .collect()
    }

    /// One optimization step; returns the loss before the update.
    pub fn step(&mut self, batch: &ModalityBatch, lr: f64, weight_decay: f64) -> Result<f64> {
        let labels = self.labels(batch)?;
        let cache = self.model.forward_train(&batch.images, &batch.tags)?;
        let loss = compute_loss(
            &self.model.config().loss,
            &cache.embeddings,
            self.model.classifier(),
            &labels,
        )?;
        let grads = self
            .model
            .backward(&cache, &loss.grad_embeddings, loss.grad_classifier)?;
        self.model.commit_running_stats(&cache)?;
        let flat = grads.flatten();
        self.optimizer
            .step(self.model.trainable_slots(), &flat, lr, weight_decay);
        Ok(loss.total)
    }

    /// Runs the full schedule, evaluating on `test_ids` after every epoch.
    pub fn fit(&mut self, dataset: &Dataset, test_ids: &[usize], config: &TrainConfig) -> Result<Vec<EpochMetrics>> {
        config.schedule.validate()?;
        let sampler = PkSampler::new(config.pk, self.train_ids.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut log = Vec::with_capacity(config.schedule.total_epochs);
        for epoch in 0..config.schedule.total_epochs {
            let batches = sampler.epoch_batches(dataset, &mut rng)?;
            let steps = batches.len();
            let mut losses = Vec::with_capacity(steps);
            for (step, indices) in batches.iter().enumerate() {
                let lr = config.schedule.lr_at(epoch, step, steps);
                let batch = dataset.batch(indices)?;
                losses.push(self.step(&batch, lr, config.schedule.weight_decay)?);
            }
            let eval = evaluate_retrieval(&self.model, dataset, test_ids, config.direction)?;
            let loss = losses.iter().sum::<f64>() / steps.max(1) as f64;
            debug!(
                "epoch {epoch}: loss {loss:.4} rank1 {:.4} mAP {:.4}",
                eval.rank1(),
                eval.map
            );
            log.push(EpochMetrics {
                epoch,
                loss,
                rank1: eval.rank1(),
                map: eval.map,
            });
        }
        Ok(log)
    }
}

/// Trains `model` on `train_ids` and returns it with the per-epoch log.
pub fn train(
    model: Model,
    dataset: &Dataset,
    train_ids: &[usize],
    test_ids: &[usize],
    config: &TrainConfig,
) -> Result<(Model, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(model, train_ids.to_vec())?;
    let log = trainer.fit(dataset, test_ids, config)?;
    Ok((trainer.into_model(), log))
}

/// Evaluation of an untrained or trained model as a metrics row.
pub fn evaluation_row(epoch: usize, loss: f64, result: &RetrievalResult) -> EpochMetrics {
    EpochMetrics {
        epoch,
        loss,
        rank1: result.rank1(),
        map: result.map,
    }
}
