//! Ground-truth features, rewards, oracle masks and instruction templates.

use std::collections::BTreeSet;

use rand::seq::IteratorRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::Rng;
use crate::state::{StateVector, EEF_X, EEF_Y, EEF_Z, HUMAN_X, HUMAN_Y, HUMAN_Z, LAPTOP_X, LAPTOP_Y, ROT_ZX, TABLE_Z};
use crate::types::{
    Ambiguity, CanonicalForm, FeatureId, Instruction, MaskProvenance, PreferenceWeights, Sign, StateMask, Trajectory,
    WORKSPACE,
};

/// Vertical offset from the human position to the face point (m).
pub const FACE_OFFSET: f64 = 0.4;

/// Normaliser for vertical distances: workspace height.
pub const Z_MAX: f64 = WORKSPACE.max[2] - WORKSPACE.min[2];

/// Normaliser for xy distances: workspace footprint diagonal.
pub fn d_max() -> f64 {
    let e = WORKSPACE.extent();
    (e[0] * e[0] + e[1] * e[1]).sqrt()
}

/// Normaliser for 3-D distances: workspace space diagonal.
pub fn d3_max() -> f64 {
    let e = WORKSPACE.extent();
    (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PreferenceError {
    #[error("{mode:?} instructions need exactly one active table/human/laptop feature, got {weights}")]
    NotAmbiguable {
        mode: Ambiguity,
        weights: PreferenceWeights,
    },
    #[error("cannot render an instruction in mode {0:?}")]
    UnsupportedMode(Ambiguity),
}

/// Static description of one feature.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSpec {
    pub id: FeatureId,
    /// State indices the closeness function reads.
    pub relevant: &'static [usize],
    pub positive_template: &'static str,
    pub negative_template: &'static str,
    /// Referent-only fragment, for object features.
    pub referent: Option<&'static str>,
}

pub const FEATURES: [FeatureSpec; 5] = [
    FeatureSpec {
        id: FeatureId::Table,
        relevant: &[EEF_Z, TABLE_Z],
        positive_template: "Stay close to the table",
        negative_template: "Stay away from the table",
        referent: Some("The table"),
    },
    FeatureSpec {
        id: FeatureId::Human,
        relevant: &[EEF_X, EEF_Y, HUMAN_X, HUMAN_Y],
        positive_template: "Stay close to the human",
        negative_template: "Stay away from the human",
        referent: Some("The human"),
    },
    FeatureSpec {
        id: FeatureId::Laptop,
        relevant: &[EEF_X, EEF_Y, LAPTOP_X, LAPTOP_Y],
        positive_template: "Stay close to the laptop",
        negative_template: "Stay away from the laptop",
        referent: Some("The laptop"),
    },
    FeatureSpec {
        id: FeatureId::Face,
        relevant: &[EEF_X, EEF_Y, EEF_Z, HUMAN_X, HUMAN_Y, HUMAN_Z],
        positive_template: "Keep the mug near my face",
        negative_template: "Keep the mug away from my face",
        referent: None,
    },
    FeatureSpec {
        id: FeatureId::Orient,
        relevant: &[ROT_ZX],
        positive_template: "Keep the mug upright",
        negative_template: "Tilt the mug",
        referent: None,
    },
];

pub fn spec(feature: FeatureId) -> &'static FeatureSpec {
    &FEATURES[feature.index()]
}

/// Relation-only fragment for a sign.
pub fn relation_fragment(sign: Sign) -> &'static str {
    match sign {
        Sign::Positive => "Stay close",
        Sign::Negative => "Stay away",
    }
}

impl FeatureSpec {
    pub fn template(&self, sign: Sign) -> &'static str {
        match sign {
            Sign::Positive => self.positive_template,
            Sign::Negative => self.negative_template,
        }
    }
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Closeness in `[0, 1]`; reads only the feature's relevant indices.
///
/// Object positions come from the state's own object dims, which equal the
/// trajectory's environment config.
pub fn closeness(feature: FeatureId, s: &StateVector) -> f64 {
    let v = &s.0;
    match feature {
        FeatureId::Table => clip01(1.0 - (v[EEF_Z] - v[TABLE_Z]).abs() / Z_MAX),
        FeatureId::Human => {
            let d = (v[EEF_X] - v[HUMAN_X]).hypot(v[EEF_Y] - v[HUMAN_Y]);
            clip01(1.0 - d / d_max())
        }
        FeatureId::Laptop => {
            let d = (v[EEF_X] - v[LAPTOP_X]).hypot(v[EEF_Y] - v[LAPTOP_Y]);
            clip01(1.0 - d / d_max())
        }
        FeatureId::Face => {
            let dz = v[EEF_Z] - (v[HUMAN_Z] + FACE_OFFSET);
            let d = ((v[EEF_X] - v[HUMAN_X]).powi(2) + (v[EEF_Y] - v[HUMAN_Y]).powi(2) + dz * dz).sqrt();
            clip01(1.0 - d / d3_max())
        }
        FeatureId::Orient => clip01(0.5 * (1.0 + v[ROT_ZX])),
    }
}

/// `Σ wᵢ · cᵢ(s)`; inactive features are never evaluated.
pub fn gt_reward(weights: &PreferenceWeights, s: &StateVector) -> f64 {
    weights
        .active()
        .map(|(f, sign)| sign.value() as f64 * closeness(f, s))
        .sum()
}

pub fn gt_return(weights: &PreferenceWeights, trajectory: &Trajectory) -> f64 {
    trajectory.states().iter().map(|s| gt_reward(weights, s)).sum()
}

/// Mean closeness of each feature over a trajectory.
pub fn mean_closeness(trajectory: &Trajectory) -> [f64; 5] {
    let n = trajectory.states().len() as f64;
    let mut out = [0.0; 5];
    for f in FeatureId::ALL {
        out[f.index()] = trajectory.states().iter().map(|s| closeness(f, s)).sum::<f64>() / n;
    }
    out
}

pub fn oracle_mask(weights: &PreferenceWeights) -> StateMask {
    mask_for_features(weights.active().map(|(f, _)| f), MaskProvenance::Oracle)
}

/// Union of relevant-index sets.
pub fn mask_for_features(features: impl IntoIterator<Item = FeatureId>, provenance: MaskProvenance) -> StateMask {
    StateMask::from_indices(
        features.into_iter().flat_map(|f| spec(f).relevant.iter().copied()),
        provenance,
    )
}

/// All 242 nonzero weight vectors in `{-1, 0, 1}^5`.
///
/// Ordered by base-3 code with the table weight most significant and digit
/// `d` mapping to weight `d - 1`.
pub fn enumerate_preferences() -> Vec<PreferenceWeights> {
    (0..243u32)
        .filter_map(|code| {
            let mut w = [0i8; 5];
            let mut c = code;
            for k in (0..5).rev() {
                w[k] = (c % 3) as i8 - 1;
                c /= 3;
            }
            PreferenceWeights::new(w).ok()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    Sparse,
    Medium,
    Dense,
}

impl Density {
    pub const ALL: [Density; 3] = [Density::Sparse, Density::Medium, Density::Dense];

    pub fn name(self) -> &'static str {
        match self {
            Density::Sparse => "sparse",
            Density::Medium => "medium",
            Density::Dense => "dense",
        }
    }
}

/// Sparse: 1–2 active features, medium: 3, dense: 4–5.
pub fn classify_density(weights: &PreferenceWeights) -> Density {
    match weights.active_count() {
        0..=2 => Density::Sparse,
        3 => Density::Medium,
        _ => Density::Dense,
    }
}

/// The single active object feature, if that is all the weights contain.
pub fn single_object_feature(weights: &PreferenceWeights) -> Option<(FeatureId, Sign)> {
    let active: Vec<_> = weights.active().collect();
    match active.as_slice() {
        [(f, s)] if FeatureId::OBJECTS.contains(f) => Some((*f, *s)),
        _ => None,
    }
}

fn render_clauses(clauses: &[(FeatureId, Sign)]) -> String {
    clauses
        .iter()
        .map(|&(f, s)| spec(f).template(s))
        .collect::<Vec<_>>()
        .join(". ")
}

/// Renders the instruction a simulated user would give.
pub fn render_instruction(weights: &PreferenceWeights, mode: Ambiguity) -> Result<Instruction, PreferenceError> {
    match mode {
        Ambiguity::Clear => {
            let clauses: Vec<_> = weights.active().collect();
            Ok(Instruction {
                text: render_clauses(&clauses),
                ambiguity: Ambiguity::Clear,
                canonical: Some(weights.canonical()),
            })
        }
        Ambiguity::ReferentOmitted | Ambiguity::ExpressionOmitted => {
            let (f, s) = single_object_feature(weights).ok_or(PreferenceError::NotAmbiguable {
                mode,
                weights: *weights,
            })?;
            let text = if mode == Ambiguity::ReferentOmitted {
                relation_fragment(s)
            } else {
                spec(f).referent.expect("object features have referents")
            };
            Ok(Instruction::ambiguous(text, mode))
        }
        Ambiguity::Disambiguated => Err(PreferenceError::UnsupportedMode(mode)),
    }
}

/// Clear instruction describing a random non-empty subset of the active features.
pub fn render_subset_instruction(weights: &PreferenceWeights, rng: &mut Rng) -> Instruction {
    let active: Vec<_> = weights.active().collect();
    let k = rng.random_range(1..=active.len());
    let mut chosen: Vec<_> = active.into_iter().choose_multiple(rng, k);
    chosen.sort();
    Instruction {
        text: render_clauses(&chosen),
        ambiguity: Ambiguity::Clear,
        canonical: Some(CanonicalForm(chosen.into_iter().collect())),
    }
}

const DETERMINERS: [&str; 5] = ["the", "a", "an", "my", "your"];

fn normalize_tokens(clause: &str) -> Vec<String> {
    clause
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .map(|t| if t == "cup" { "mug".to_string() } else { t })
        .filter(|t| !DETERMINERS.contains(&t.as_str()))
        .collect()
}

fn split_clauses(text: &str) -> Vec<Vec<String>> {
    let lowered = text.to_lowercase();
    lowered
        .split(['.', '!', '?', ';', ',', '\n'])
        .flat_map(|c| c.split(" and "))
        .map(normalize_tokens)
        .filter(|t| !t.is_empty())
        .collect()
}

fn template_table() -> Vec<(Vec<String>, FeatureId, Sign)> {
    FEATURES
        .iter()
        .flat_map(|f| {
            [Sign::Positive, Sign::Negative]
                .into_iter()
                .map(move |s| (normalize_tokens(f.template(s)), f.id, s))
        })
        .collect()
}

/// Maps template sentences back to their (feature, sign) set.
///
/// Case-, punctuation- and determiner-insensitive. Any clause outside the
/// template grammar, or contradictory signs for one feature, yields the
/// empty set.
pub fn parse_instruction(text: &str) -> CanonicalForm {
    let table = template_table();
    let mut out = BTreeSet::new();
    for clause in split_clauses(text) {
        match table.iter().find(|(tokens, _, _)| *tokens == clause) {
            Some((_, f, s)) => {
                if out.contains(&(*f, s.flip())) {
                    return CanonicalForm::default();
                }
                out.insert((*f, *s));
            }
            None => return CanonicalForm::default(),
        }
    }
    CanonicalForm(out)
}

/// What an ambiguous instruction does specify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fragment {
    /// Relation without referent, e.g. "Stay away".
    Relation(Sign),
    /// Referent without relation, e.g. "The table".
    Referent(FeatureId),
}

pub fn parse_fragment(text: &str) -> Option<Fragment> {
    let clauses = split_clauses(text);
    let [tokens] = clauses.as_slice() else {
        return None;
    };
    for s in [Sign::Positive, Sign::Negative] {
        if *tokens == normalize_tokens(relation_fragment(s)) {
            return Some(Fragment::Relation(s));
        }
    }
    FeatureId::OBJECTS
        .into_iter()
        .find(|f| spec(*f).referent.is_some_and(|r| *tokens == normalize_tokens(r)))
        .map(Fragment::Referent)
}

impl Sign {
    pub fn flip(self) -> Sign {
        match self {
            Sign::Positive => Sign::Negative,
            Sign::Negative => Sign::Positive,
        }
    }
}
