//! Staged experiment pipeline behind the `mirl` binary: data generation,
//! annotation, training, evaluation and report aggregation.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod commands;
pub mod config;
pub mod datafile;
pub mod experiment;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Dataset { path: PathBuf, line: usize, reason: String },
    #[error("no API key: set {0} or use the mock or replay provider")]
    NoApiKey(&'static str),
    #[error("{0} examples have no mask; run `mirl annotate` first or train with mode lc_rl")]
    Unannotated(usize),
    #[error("annotation failed for {failed} examples; partial output written, see {}", manifest.display())]
    Annotation { failed: usize, manifest: PathBuf },
    #[error("train and test banks share object configuration {0}")]
    SharedConfig(usize),
    #[error("no evaluation records under {0}")]
    NoRecords(PathBuf),
    #[error(transparent)]
    World(#[from] mirl_core::world::WorldError),
    #[error(transparent)]
    Data(#[from] mirl_core::dataset::DatasetError),
    #[error(transparent)]
    Llm(#[from] mirl_core::llm::LlmError),
    #[error(transparent)]
    Train(#[from] mirl_core::training::TrainError),
    #[error(transparent)]
    Eval(#[from] mirl_core::evaluation::EvalError),
    #[error(transparent)]
    Model(#[from] mirl_core::reward_model::ModelError),
    #[error(transparent)]
    Encoder(#[from] mirl_core::reward_model::EncoderError),
    #[error(transparent)]
    Checkpoint(#[from] mirl_core::reward_model::CheckpointError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
