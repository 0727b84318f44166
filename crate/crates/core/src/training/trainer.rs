//! Minibatch optimisation loop with pretrain and fine-tune phases.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::loss::{evaluate, BatchItem, EmbeddingTable, LossError, LossParts, Mode, Objective};
use super::optim::{Adam, AdamConfig};
use crate::reward_model::{
    Checkpoint, CheckpointError, CheckpointMeta, LanguageEncoder, ModelShape, RewardModel, Scalar,
};
use crate::seed::{self, Rng};
use crate::types::{AnnotatedExample, Trajectory};
use crate::world::TrajectoryBank;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda: f64,
    pub mask_draws: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub fine_tune_epochs: usize,
    /// Negatives per demonstration, drawn from the demo's bank group.
    pub n_neg: usize,
    pub film_hidden: usize,
    pub seed: u64,
    /// Checkpoint period in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            mode: Mode::MaskedIrl,
            lambda: 10.0,
            mask_draws: 1,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 64,
            epochs: 300,
            fine_tune_epochs: 0,
            n_neg: 8,
            film_hidden: 128,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::Config(what.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.mask_draws == 0 || self.film_hidden == 0 {
            return bad("batch_size, mask_draws and film_hidden must be positive");
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            mode: self.mode,
            lambda: self.lambda,
            mask_draws: self.mask_draws,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Hex SHA-256 of the JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    FineTune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::FineTune => "fine_tune",
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("example {demo_id}: no bank group for config {config_id} pair {pair_id}")]
    MissingGroup {
        demo_id: usize,
        config_id: usize,
        pair_id: usize,
    },
    #[error(
        "non-finite loss in {phase} epoch {epoch} batch {batch}: irl={irl} mask={mask}; first examples {demo_ids:?}"
    )]
    NonFinite {
        phase: &'static str,
        epoch: usize,
        batch: usize,
        irl: f64,
        mask: f64,
        demo_ids: Vec<usize>,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub irl_loss: f64,
    pub mask_loss: f64,
    pub total_loss: f64,
    /// Seconds since the phase started.
    pub wall_time: f64,
}

pub const LOG_HEADER: &str = "epoch,phase,irl_loss,mask_loss,total_loss,wall_time";

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{:.9},{:.9},{:.9},{:.3}",
            r.epoch, r.phase, r.irl_loss, r.mask_loss, r.total_loss, r.wall_time
        );
    }
    out
}

/// Training state: weights, optimizer moments, epoch counter and log.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub config: TrainConfig,
    pub model: RewardModel<F>,
    adam: Adam<F>,
    /// Epochs completed across all phases.
    pub epochs_done: usize,
    pub log: Vec<EpochRecord>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: RewardModel<F>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = Adam::new(config.adam(), &model);
        Ok(Trainer {
            config,
            model,
            adam,
            epochs_done: 0,
            log: Vec::new(),
        })
    }

    /// Fresh model sized for `encoder`, initialised from the config seed.
    pub fn init(encoder: &dyn LanguageEncoder, config: TrainConfig) -> Result<Self, TrainError> {
        let shape = ModelShape::new(encoder.dim(), config.film_hidden);
        let model = RewardModel::init(shape, config.seed);
        Self::new(model, config)
    }

    /// Resumes weights, optimizer moments and the epoch counter.
    pub fn resume(checkpoint: &Checkpoint, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = checkpoint.model::<F>()?;
        let adam = match &checkpoint.optimizer {
            Some(state) => Adam::restore(config.adam(), &model, state)?,
            None => Adam::new(config.adam(), &model),
        };
        Ok(Trainer {
            config,
            model,
            adam,
            epochs_done: checkpoint.metadata.epoch,
            log: Vec::new(),
        })
    }

    /// Discards optimizer moments, as at the start of fine-tuning.
    pub fn reset_optimizer(&mut self) {
        self.adam = Adam::new(self.config.adam(), &self.model);
    }

    pub fn checkpoint(&self, phase: Phase) -> Checkpoint {
        let meta = CheckpointMeta {
            shape: self.model.shape(),
            seed: self.config.seed,
            precision: F::NAME.to_string(),
            epoch: self.epochs_done,
            phase: phase.name().to_string(),
            config_hash: self.config.hash(),
        };
        Checkpoint::new(&self.model, meta, Some(self.adam.state()))
    }

    /// Runs `epochs` epochs over `examples`. `on_checkpoint` is called every
    /// `checkpoint_every` epochs and after the last one.
    pub fn run(
        &mut self,
        phase: Phase,
        epochs: usize,
        examples: &[AnnotatedExample],
        bank: &TrajectoryBank,
        encoder: &dyn LanguageEncoder,
        mut on_checkpoint: impl FnMut(&Self, Phase) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        if epochs == 0 {
            return Ok(());
        }
        if examples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let pools = negative_pools(examples, bank)?;
        let table = EmbeddingTable::<F>::build(encoder, examples.iter().map(|e| e.instruction.text.as_str()))
            .map_err(LossError::from)?;
        let objective = self.config.objective();
        let seed = self.config.seed;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..examples.len()).collect();

        for _ in 0..epochs {
            let epoch = self.epochs_done;
            order.sort_unstable();
            order.shuffle(&mut seed::rng_for(seed, &[seed::tag("shuffle"), epoch as u64]));
            let mut sums = LossParts::default();
            for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
                let tags = |label| [seed::tag(label), epoch as u64, b as u64];
                let mut neg_rng = seed::rng_for(seed, &tags("negatives"));
                let mut noise_rng = seed::rng_for(seed, &tags("noise"));
                let items: Vec<BatchItem<'_>> = chunk
                    .iter()
                    .map(|&i| batch_item(&examples[i], &pools[i], self.config.n_neg, objective.mode, &mut neg_rng))
                    .collect();
                let mut grads = self.model.zeros_like();
                let parts = evaluate(
                    &self.model,
                    &table,
                    &items,
                    &objective,
                    &mut noise_rng,
                    Some(&mut grads),
                )?;
                if !parts.total.is_finite() {
                    return Err(TrainError::NonFinite {
                        phase: phase.name(),
                        epoch,
                        batch: b,
                        irl: parts.irl,
                        mask: parts.mask,
                        demo_ids: chunk.iter().take(8).map(|&i| examples[i].demo_id).collect(),
                    });
                }
                self.adam.step(&mut self.model, &grads);
                let w = chunk.len() as f64;
                sums.irl += parts.irl * w;
                sums.mask += parts.mask * w;
                sums.total += parts.total * w;
            }
            let n = examples.len() as f64;
            self.epochs_done += 1;
            self.log.push(EpochRecord {
                epoch: self.epochs_done,
                phase: phase.name().to_string(),
                irl_loss: sums.irl / n,
                mask_loss: sums.mask / n,
                total_loss: sums.total / n,
                wall_time: started.elapsed().as_secs_f64(),
            });
            log::debug!(
                "{} epoch {}: irl {:.5} mask {:.5}",
                phase.name(),
                self.epochs_done,
                sums.irl / n,
                sums.mask / n
            );
            let every = self.config.checkpoint_every;
            if every > 0 && self.epochs_done.is_multiple_of(every) {
                on_checkpoint(self, phase)?;
            }
        }
        if self.config.checkpoint_every == 0 || !self.epochs_done.is_multiple_of(self.config.checkpoint_every) {
            on_checkpoint(self, phase)?;
        }
        Ok(())
    }
}

/// Same-group alternatives to each example's demonstration.
fn negative_pools<'b>(
    examples: &[AnnotatedExample],
    bank: &'b TrajectoryBank,
) -> Result<Vec<Vec<&'b Trajectory>>, TrainError> {
    examples
        .iter()
        .map(|e| {
            let group = bank.pair(e.config_id, e.pair_id).ok_or(TrainError::MissingGroup {
                demo_id: e.demo_id,
                config_id: e.config_id,
                pair_id: e.pair_id,
            })?;
            Ok(group
                .trajectories
                .iter()
                .enumerate()
                .filter(|&(k, t)| k != e.bank_index && t != &e.trajectory)
                .map(|(_, t)| t)
                .collect())
        })
        .collect()
}

fn batch_item<'a>(
    example: &'a AnnotatedExample,
    pool: &[&'a Trajectory],
    n_neg: usize,
    mode: Mode,
    rng: &mut Rng,
) -> BatchItem<'a> {
    let mut candidates = Vec::with_capacity(1 + n_neg.min(pool.len()));
    candidates.push(&example.trajectory);
    candidates.extend(pool.choose_multiple(rng, n_neg).copied());
    BatchItem {
        instruction: &example.instruction.text,
        mask: if mode.uses_masks() { example.mask.as_ref() } else { None },
        candidates,
    }
}

/// Pretrains a fresh model for `config.epochs` epochs.
pub fn train<F: Scalar>(
    examples: &[AnnotatedExample],
    bank: &TrajectoryBank,
    encoder: &dyn LanguageEncoder,
    config: &TrainConfig,
) -> Result<(RewardModel<F>, Vec<EpochRecord>), TrainError> {
    let mut trainer = Trainer::<F>::init(encoder, config.clone())?;
    trainer.run(Phase::Pretrain, config.epochs, examples, bank, encoder, |_, _| Ok(()))?;
    Ok((trainer.model, trainer.log))
}

/// Continues optimisation of `model` on new examples with a fresh optimizer.
/// The encoder stays frozen; every network parameter is updated.
pub fn fine_tune<F: Scalar>(
    model: RewardModel<F>,
    examples: &[AnnotatedExample],
    bank: &TrajectoryBank,
    encoder: &dyn LanguageEncoder,
    config: &TrainConfig,
) -> Result<(RewardModel<F>, Vec<EpochRecord>), TrainError> {
    let mut trainer = Trainer::new(model, config.clone())?;
    trainer.run(
        Phase::FineTune,
        config.fine_tune_epochs,
        examples,
        bank,
        encoder,
        |_, _| Ok(()),
    )?;
    Ok((trainer.model, trainer.log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hash_tracks_fields() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            seed: 1,
            ..TrainConfig::default()
        };
        assert_eq!(a.hash(), TrainConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let rec = EpochRecord {
            epoch: 1,
            phase: "pretrain".into(),
            irl_loss: 1.0,
            mask_loss: 0.5,
            total_loss: 6.0,
            wall_time: 0.25,
        };
        let csv = log_csv(&[rec]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert!(lines[1].starts_with("1,pretrain,1.0"));
    }
}
