//! Objectives and the optimisation loop.

pub mod augment;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use augment::{annotate_masks, augment_best_of_rounds, augment_with_disambiguations, AugmentReport};
pub use gradcheck::{check_gradients, relative_error, GradCheck};
pub use loss::{
    demo_nll, evaluate, irl_loss, masking_loss, masking_loss_with, total_loss, BatchItem, EmbeddingTable, LossError,
    LossParts, Mode, Objective,
};
pub use optim::{Adam, AdamConfig};
pub use trainer::{fine_tune, log_csv, train, EpochRecord, Phase, TrainConfig, TrainError, Trainer};
