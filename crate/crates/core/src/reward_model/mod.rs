//! Language-conditioned reward network.

pub mod checkpoint;
pub mod encoder;
pub mod network;
pub mod scalar;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
pub use encoder::{CachedEmbeddingEncoder, EncoderError, HashEncoder, LanguageEncoder};
pub use network::{film_modulate, ModelError, ModelShape, RewardModel};
pub use scalar::Scalar;
