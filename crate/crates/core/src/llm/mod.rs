//! Language-model annotation: relevance masks and disambiguation.

pub mod cache;
pub mod mock;
pub mod parse;
pub mod pipeline;
pub mod prompts;
pub mod provider;

use thiserror::Error;

pub use cache::{cache_key, AnnotationCache, CacheRecord};
pub use mock::{closeness_deltas, heuristic_candidates, heuristic_mask, MockAnnotator, DISCRIMINATIVE_THRESHOLD};
pub use parse::{parse_disambiguation_response, parse_mask_response, ParseError, ParseErrorKind};
pub use pipeline::{Annotator, AnnotatorConfig};
pub use prompts::{build_disambiguation_prompt, build_mask_prompt, render_trajectory_text, Prompt, PromptFamily};
pub use provider::{ChatProvider, ChatRequest, HttpProvider, ProviderError, ReplayProvider};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("instruction {0:?} is empty or spans several lines")]
    BadInstruction(String),
    #[error("demonstration and reference differ in start, goal or scene")]
    MismatchedReference,
    #[error("{} response unparseable after {attempts} attempts: {error}", family.name())]
    Parse {
        family: PromptFamily,
        attempts: u32,
        error: ParseError,
    },
    #[error("{} provider failed after {attempts} attempts: {error}", family.name())]
    Provider {
        family: PromptFamily,
        attempts: u32,
        error: ProviderError,
    },
    #[error("annotation cache line {line}: {reason}")]
    Cache { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
