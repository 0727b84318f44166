//! Shared domain types built on the canonical state layout.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{StateVector, Vec3, HUMAN_X, LAPTOP_X, STATE_DIM, TABLE_Z, TRAJECTORY_LEN};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("trajectory must have {TRAJECTORY_LEN} states, got {0}")]
    TrajectoryLength(usize),
    #[error("state {index} object dims differ from its environment config")]
    ObjectMismatch { index: usize },
    #[error("preference weights must lie in {{-1, 0, 1}}, got {0:?}")]
    WeightRange([i8; 5]),
    #[error("preference weights are all zero")]
    ZeroPreference,
    #[error("mask must have {STATE_DIM} binary entries: {0}")]
    InvalidMask(String),
    #[error("{0:?} instruction requires a non-empty canonical form")]
    MissingCanonical(Ambiguity),
    #[error("position {0:?} outside workspace")]
    OutsideWorkspace(Vec3),
    #[error("laptop z {laptop_z} differs from table height {table_z}")]
    LaptopOffTable { laptop_z: f64, table_z: f64 },
}

/// Axis-aligned box in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
            p[2].clamp(self.min[2], self.max[2]),
        ]
    }

    pub fn extent(&self) -> Vec3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }
}

/// The default 1.6 m workspace cube centred over the table in xy.
pub const WORKSPACE: Bounds = Bounds {
    min: [-0.8, -0.8, 0.0],
    max: [0.8, 0.8, 1.6],
};

/// Object placement for one scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    pub human: Vec3,
    pub laptop: Vec3,
    pub table_z: f64,
    pub bounds: Bounds,
}

impl EnvironmentConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        for p in [&self.human, &self.laptop] {
            if !self.bounds.contains(p) {
                return Err(DomainError::OutsideWorkspace(*p));
            }
        }
        if self.laptop[2] != self.table_z {
            return Err(DomainError::LaptopOffTable {
                laptop_z: self.laptop[2],
                table_z: self.table_z,
            });
        }
        Ok(())
    }

    /// Whether the object dims (12..19) of `state` equal this config bitwise.
    pub fn matches(&self, state: &StateVector) -> bool {
        state.0[HUMAN_X..HUMAN_X + 3] == self.human
            && state.0[LAPTOP_X..LAPTOP_X + 3] == self.laptop
            && state.0[TABLE_Z] == self.table_z
    }

    /// Writes object dims into `state`.
    pub fn stamp(&self, state: &mut StateVector) {
        state.0[HUMAN_X..HUMAN_X + 3].copy_from_slice(&self.human);
        state.0[LAPTOP_X..LAPTOP_X + 3].copy_from_slice(&self.laptop);
        state.0[TABLE_Z] = self.table_z;
    }
}

/// Ordered sequence of exactly 21 states sharing one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory")]
pub struct Trajectory {
    states: Vec<StateVector>,
    config: EnvironmentConfig,
}

/// Unchecked wire form; deserialisation goes through [`Trajectory::new`].
#[derive(Deserialize)]
struct RawTrajectory {
    states: Vec<StateVector>,
    config: EnvironmentConfig,
}

impl TryFrom<RawTrajectory> for Trajectory {
    type Error = DomainError;

    fn try_from(raw: RawTrajectory) -> Result<Self, DomainError> {
        Trajectory::new(raw.states, raw.config)
    }
}

impl Trajectory {
    pub fn new(states: Vec<StateVector>, config: EnvironmentConfig) -> Result<Self, DomainError> {
        if states.len() != TRAJECTORY_LEN {
            return Err(DomainError::TrajectoryLength(states.len()));
        }
        if let Some(index) = states.iter().position(|s| !config.matches(s)) {
            return Err(DomainError::ObjectMismatch { index });
        }
        Ok(Trajectory { states, config })
    }

    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    pub fn config(&self) -> &EnvironmentConfig {
        &self.config
    }

    pub fn start(&self) -> &StateVector {
        &self.states[0]
    }

    pub fn goal(&self) -> &StateVector {
        &self.states[TRAJECTORY_LEN - 1]
    }

    /// Sum of Euclidean segment lengths of the end-effector path.
    pub fn path_length(&self) -> f64 {
        self.states
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0].eef_pos(), w[1].eef_pos());
                ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt()
            })
            .sum()
    }

    /// Row-major 21x19 values.
    pub fn flat(&self) -> Vec<f64> {
        self.states.iter().flat_map(|s| s.0).collect()
    }
}

/// The five semantic trajectory features, in fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureId {
    Table,
    Human,
    Laptop,
    Face,
    Orient,
}

impl FeatureId {
    pub const ALL: [FeatureId; 5] = [
        FeatureId::Table,
        FeatureId::Human,
        FeatureId::Laptop,
        FeatureId::Face,
        FeatureId::Orient,
    ];

    /// Features that name a physical object and may appear in ambiguous instructions.
    pub const OBJECTS: [FeatureId; 3] = [FeatureId::Table, FeatureId::Human, FeatureId::Laptop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureId::Table => "table",
            FeatureId::Human => "human",
            FeatureId::Laptop => "laptop",
            FeatureId::Face => "face",
            FeatureId::Orient => "orient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Negative,
    Positive,
}

impl Sign {
    pub fn value(self) -> i8 {
        match self {
            Sign::Negative => -1,
            Sign::Positive => 1,
        }
    }

    pub fn of(w: i8) -> Option<Sign> {
        match w {
            1 => Some(Sign::Positive),
            -1 => Some(Sign::Negative),
            _ => None,
        }
    }
}

/// Hidden ground-truth weights over the five features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[i8; 5]", into = "[i8; 5]")]
pub struct PreferenceWeights([i8; 5]);

impl PreferenceWeights {
    pub fn new(w: [i8; 5]) -> Result<Self, DomainError> {
        if w.iter().any(|v| !(-1..=1).contains(v)) {
            return Err(DomainError::WeightRange(w));
        }
        if w.iter().all(|&v| v == 0) {
            return Err(DomainError::ZeroPreference);
        }
        Ok(PreferenceWeights(w))
    }

    /// Weights with exactly one active feature.
    pub fn single(feature: FeatureId, sign: Sign) -> Self {
        let mut w = [0; 5];
        w[feature.index()] = sign.value();
        PreferenceWeights(w)
    }

    pub fn values(&self) -> [i8; 5] {
        self.0
    }

    pub fn weight(&self, f: FeatureId) -> i8 {
        self.0[f.index()]
    }

    pub fn active(&self) -> impl Iterator<Item = (FeatureId, Sign)> + '_ {
        FeatureId::ALL
            .into_iter()
            .filter_map(|f| Sign::of(self.weight(f)).map(|s| (f, s)))
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }

    pub fn canonical(&self) -> CanonicalForm {
        CanonicalForm(self.active().collect())
    }
}

impl TryFrom<[i8; 5]> for PreferenceWeights {
    type Error = DomainError;
    fn try_from(w: [i8; 5]) -> Result<Self, DomainError> {
        PreferenceWeights::new(w)
    }
}

impl From<PreferenceWeights> for [i8; 5] {
    fn from(w: PreferenceWeights) -> [i8; 5] {
        w.0
    }
}

impl fmt::Display for PreferenceWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| format!("{v:+}").replace("+0", "0")).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Set of (feature, sign) pairs an instruction expresses.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CanonicalForm(pub BTreeSet<(FeatureId, Sign)>);

impl CanonicalForm {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn features(&self) -> impl Iterator<Item = FeatureId> + '_ {
        self.0.iter().map(|(f, _)| *f)
    }

    pub fn weights(&self) -> Option<PreferenceWeights> {
        let mut w = [0i8; 5];
        for (f, s) in &self.0 {
            w[f.index()] = s.value();
        }
        PreferenceWeights::new(w).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskProvenance {
    Oracle,
    Llm,
    Mock,
}

/// Binary relevance flag per state dimension; 1 means relevant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawMask")]
pub struct StateMask {
    bits: [u8; STATE_DIM],
    pub provenance: MaskProvenance,
}

#[derive(Deserialize)]
struct RawMask {
    bits: [u8; STATE_DIM],
    provenance: MaskProvenance,
}

impl TryFrom<RawMask> for StateMask {
    type Error = DomainError;

    fn try_from(raw: RawMask) -> Result<Self, DomainError> {
        StateMask::new(raw.bits, raw.provenance)
    }
}

impl StateMask {
    pub fn new(bits: [u8; STATE_DIM], provenance: MaskProvenance) -> Result<Self, DomainError> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(DomainError::InvalidMask(format!("non-binary entry {b}")));
        }
        Ok(StateMask { bits, provenance })
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>, provenance: MaskProvenance) -> Self {
        let mut bits = [0u8; STATE_DIM];
        for i in indices {
            bits[i] = 1;
        }
        StateMask { bits, provenance }
    }

    pub fn all_ones(provenance: MaskProvenance) -> Self {
        StateMask {
            bits: [1; STATE_DIM],
            provenance,
        }
    }

    pub fn bits(&self) -> &[u8; STATE_DIM] {
        &self.bits
    }

    pub fn is_relevant(&self, dim: usize) -> bool {
        self.bits[dim] == 1
    }

    pub fn relevant(&self) -> impl Iterator<Item = usize> + '_ {
        (0..STATE_DIM).filter(|&j| self.bits[j] == 1)
    }

    pub fn irrelevant(&self) -> impl Iterator<Item = usize> + '_ {
        (0..STATE_DIM).filter(|&j| self.bits[j] == 0)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_degenerate(&self) -> bool {
        self.count_ones() == 0
    }

    /// Element-wise product `s ⊙ m`.
    pub fn apply(&self, s: &StateVector) -> StateVector {
        let mut out = *s;
        for (v, &b) in out.0.iter_mut().zip(&self.bits) {
            if b == 0 {
                *v = 0.0;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ambiguity {
    Clear,
    ReferentOmitted,
    ExpressionOmitted,
    Disambiguated,
}

impl Ambiguity {
    pub fn is_ambiguous(self) -> bool {
        matches!(self, Ambiguity::ReferentOmitted | Ambiguity::ExpressionOmitted)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub ambiguity: Ambiguity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical: Option<CanonicalForm>,
}

impl Instruction {
    pub fn new(
        text: impl Into<String>,
        ambiguity: Ambiguity,
        canonical: Option<CanonicalForm>,
    ) -> Result<Self, DomainError> {
        if matches!(ambiguity, Ambiguity::Clear | Ambiguity::Disambiguated)
            && canonical.as_ref().is_none_or(|c| c.is_empty())
        {
            return Err(DomainError::MissingCanonical(ambiguity));
        }
        Ok(Instruction {
            text: text.into(),
            ambiguity,
            canonical,
        })
    }

    pub fn ambiguous(text: impl Into<String>, ambiguity: Ambiguity) -> Self {
        Instruction {
            text: text.into(),
            ambiguity,
            canonical: None,
        }
    }
}

/// Annotation bookkeeping attached to an example.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleFlags {
    /// Disambiguation was attempted and failed; the ambiguous text was kept.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub disambiguation_failed: bool,
    /// The ambiguous text this example was clarified from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_text: Option<String>,
    /// The annotation provider returned an all-zero mask.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate_mask: bool,
}

/// One training record.
///
/// `preference` is the hidden label. Training code never reads it; it is kept
/// for evaluation and oracle masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub demo_id: usize,
    pub config_id: usize,
    pub pair_id: usize,
    /// Position of the demonstration inside its bank group (0 is the reference path).
    pub bank_index: usize,
    pub trajectory: Trajectory,
    pub instruction: Instruction,
    #[serde(default)]
    pub mask: Option<StateMask>,
    pub preference: PreferenceWeights,
    #[serde(default)]
    pub flags: ExampleFlags,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preference_validation() {
        assert_eq!(PreferenceWeights::new([0; 5]), Err(DomainError::ZeroPreference));
        assert!(PreferenceWeights::new([2, 0, 0, 0, 0]).is_err());
        let w = PreferenceWeights::new([0, 0, -1, 0, 1]).unwrap();
        let active: Vec<_> = w.active().collect();
        assert_eq!(
            active,
            vec![(FeatureId::Laptop, Sign::Negative), (FeatureId::Orient, Sign::Positive)]
        );
        assert_eq!(w.to_string(), "(0,0,-1,0,+1)");
    }

    #[test]
    fn mask_rejects_non_binary() {
        let mut bits = [0u8; STATE_DIM];
        bits[4] = 2;
        assert!(StateMask::new(bits, MaskProvenance::Llm).is_err());
    }

    #[test]
    fn clear_instruction_needs_canonical() {
        assert!(Instruction::new("Stay away", Ambiguity::Clear, None).is_err());
        let c = PreferenceWeights::single(FeatureId::Table, Sign::Positive).canonical();
        assert!(Instruction::new("Stay close to the table", Ambiguity::Clear, Some(c)).is_ok());
    }

    #[test]
    fn trajectory_rejects_wrong_length() {
        let cfg = EnvironmentConfig {
            human: [0.0; 3],
            laptop: [0.0; 3],
            table_z: 0.0,
            bounds: WORKSPACE,
        };
        let s = StateVector([0.0; STATE_DIM]);
        assert_eq!(
            Trajectory::new(vec![s; 20], cfg),
            Err(DomainError::TrajectoryLength(20))
        );
    }
}
