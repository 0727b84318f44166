//! Deterministic offline stand-in for the hosted model.
//!
//! The mock reads everything it needs back out of the rendered prompt: the
//! instruction text and, for disambiguation, both trajectory matrices. Its
//! answers are oracle answers corrupted by seeded noise.

use rand::Rng as _;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::prompts::{disambiguation_prompt_instruction, mask_prompt_instruction, parse_trajectory_text, PromptFamily};
use super::provider::{ChatProvider, ChatRequest, ProviderError};
use crate::preferences::{closeness, mask_for_features, parse_fragment, parse_instruction, spec, Fragment};
use crate::seed::{self, Rng};
use crate::state::{StateBlock, StateVector, STATE_DIM};
use crate::types::{FeatureId, MaskProvenance, Sign, StateMask};

/// Minimum mean-closeness difference that counts as intended signal.
pub const DISCRIMINATIVE_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockAnnotator {
    /// Probability of flipping each mask bit.
    pub p_flip: f64,
    /// Probability of dropping the top disambiguation candidate.
    pub p_miss: f64,
    pub seed: u64,
}

impl MockAnnotator {
    pub fn new(p_flip: f64, p_miss: f64, seed: u64) -> Self {
        MockAnnotator { p_flip, p_miss, seed }
    }

    pub fn exact() -> Self {
        MockAnnotator::new(0.0, 0.0, 0)
    }

    pub fn model_id(&self) -> String {
        format!("mock(p_flip={},p_miss={},seed={})", self.p_flip, self.p_miss, self.seed)
    }

    fn rng(&self, request: &ChatRequest) -> Rng {
        let digest = Sha256::new()
            .chain_update(request.family.name())
            .chain_update(&request.system)
            .chain_update(&request.user)
            .finalize();
        let prompt = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        seed::rng_for(self.seed, &[seed::tag("mock"), prompt, request.round as u64])
    }
}

/// Mask implied by instruction text: clear instructions give their features,
/// a bare relation gives every object feature, a bare referent gives that
/// feature, anything else attends to everything.
pub fn heuristic_mask(instruction: &str) -> StateMask {
    let canonical = parse_instruction(instruction);
    if !canonical.is_empty() {
        return mask_for_features(canonical.features(), MaskProvenance::Mock);
    }
    match parse_fragment(instruction) {
        Some(Fragment::Relation(_)) => mask_for_features(FeatureId::OBJECTS, MaskProvenance::Mock),
        Some(Fragment::Referent(f)) => mask_for_features([f], MaskProvenance::Mock),
        None => StateMask::all_ones(MaskProvenance::Mock),
    }
}

/// Mean closeness of the demonstration minus that of the reference, per
/// object feature (table, human, laptop).
pub fn closeness_deltas(demo: &[StateVector], reference: &[StateVector]) -> [f64; 3] {
    let mean = |states: &[StateVector], f| states.iter().map(|s| closeness(f, s)).sum::<f64>() / states.len() as f64;
    FeatureId::OBJECTS.map(|f| mean(demo, f) - mean(reference, f))
}

/// Candidate (feature, sign) readings of an ambiguous fragment, strongest
/// first. Only differences of at least [`DISCRIMINATIVE_THRESHOLD`] count.
pub fn heuristic_candidates(fragment: Fragment, deltas: &[f64; 3]) -> Vec<(FeatureId, Sign)> {
    let mut out: Vec<(FeatureId, Sign, f64)> = FeatureId::OBJECTS
        .into_iter()
        .zip(deltas)
        .filter(|(_, d)| d.abs() >= DISCRIMINATIVE_THRESHOLD)
        .map(|(f, &d)| (f, if d > 0.0 { Sign::Positive } else { Sign::Negative }, d.abs()))
        .filter(|&(f, s, _)| match fragment {
            Fragment::Relation(want) => s == want,
            Fragment::Referent(want) => f == want,
        })
        .collect();
    out.sort_by(|a, b| b.2.total_cmp(&a.2));
    out.into_iter().map(|(f, s, _)| (f, s)).collect()
}

fn states_of(rows: Vec<[f64; STATE_DIM]>) -> Vec<StateVector> {
    rows.into_iter().map(StateVector).collect()
}

impl MockAnnotator {
    fn answer_mask(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let instruction = mask_prompt_instruction(&request.user)
            .ok_or_else(|| ProviderError::Unsupported("no instruction line in mask prompt".into()))?;
        let mask = heuristic_mask(instruction);
        let mut rng = self.rng(request);
        let mut bits = *mask.bits();
        for b in &mut bits {
            if rng.random::<f64>() < self.p_flip {
                *b ^= 1;
            }
        }
        let block = |b: StateBlock| bits[b.range()].to_vec();
        let obj = json!({
            "eef_pos": block(StateBlock::EefPos),
            "eef_rot": block(StateBlock::EefRot),
            "human": block(StateBlock::Human),
            "laptop": block(StateBlock::Laptop),
            "table": block(StateBlock::Table),
        });
        Ok(format!("Relevant dimensions for {instruction:?}:\n{obj}"))
    }

    fn answer_disambiguation(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let unsupported = |what: &str| ProviderError::Unsupported(format!("disambiguation prompt lacks {what}"));
        let instruction = disambiguation_prompt_instruction(&request.user).ok_or_else(|| unsupported("a command"))?;
        let reference = parse_trajectory_text(&request.system).ok_or_else(|| unsupported("a reference"))?;
        let demo = parse_trajectory_text(&request.user).ok_or_else(|| unsupported("a demonstration"))?;

        let clear = parse_instruction(instruction);
        let mut chosen: Vec<(FeatureId, Sign)> = if !clear.is_empty() {
            clear.0.into_iter().collect()
        } else if let Some(fragment) = parse_fragment(instruction) {
            heuristic_candidates(fragment, &closeness_deltas(&states_of(demo), &states_of(reference)))
        } else {
            Vec::new()
        };
        if !chosen.is_empty() && self.rng(request).random::<f64>() < self.p_miss {
            chosen.remove(0);
        }
        let texts: Vec<&str> = chosen.iter().map(|&(f, s)| spec(f).template(s)).collect();
        Ok(serde_json::to_string(&texts).expect("strings serialise"))
    }
}

impl ChatProvider for MockAnnotator {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        match request.family {
            PromptFamily::Mask => self.answer_mask(request),
            PromptFamily::Disambiguation => self.answer_disambiguation(request),
        }
    }

    fn provenance(&self) -> MaskProvenance {
        MaskProvenance::Mock
    }

    fn is_remote(&self) -> bool {
        false
    }
}
