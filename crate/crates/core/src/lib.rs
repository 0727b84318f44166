//! Language-conditioned reward learning from demonstrations.
//!
//! A single reward network `r(s | ℓ)` is trained from trajectories labelled
//! with instructions. A relevance mask per example marks which state
//! dimensions the instruction cares about, and a masking loss penalises
//! reward changes when the other dimensions are perturbed. Ambiguous
//! instructions are clarified by contrasting a demonstration with the
//! shortest path between the same endpoints.

pub mod dataset;
pub mod evaluation;
pub mod llm;
pub mod preferences;
pub mod reward_model;
pub mod seed;
pub mod state;
pub mod training;
pub mod types;
pub mod world;

pub use preferences::{
    classify_density, closeness, enumerate_preferences, gt_return, gt_reward, oracle_mask, parse_instruction,
    render_instruction, Density,
};
pub use state::{pack_state, unpack_state, StateVector, STATE_DIM, TRAJECTORY_LEN};
pub use types::{
    Ambiguity, AnnotatedExample, CanonicalForm, EnvironmentConfig, FeatureId, Instruction, MaskProvenance,
    PreferenceWeights, Sign, StateMask, Trajectory,
};
pub use world::{build_bank, PerturbationSpec, SceneLayout, Split, TrajectoryBank};
