//! Simulated users: preference sampling, demonstration selection and
//! instruction labelling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preferences::{
    classify_density, enumerate_preferences, gt_return, oracle_mask, render_instruction, render_subset_instruction,
    single_object_feature, Density, PreferenceError,
};
use crate::seed;
use crate::types::{Ambiguity, AnnotatedExample, ExampleFlags, PreferenceWeights};
use crate::world::{TrajectoryBank, TrajectoryId};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("asked for {wanted} {what} but only {available} are available")]
    Infeasible {
        what: &'static str,
        wanted: usize,
        available: usize,
    },
    #[error("boltzmann temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
}

/// Which preferences a split may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferencePool {
    #[default]
    All,
    Sparse,
    /// One active table, human or laptop feature: the six preferences that
    /// admit ambiguous instructions.
    SingleObject,
}

impl PreferencePool {
    pub fn members(self) -> Vec<PreferenceWeights> {
        enumerate_preferences()
            .into_iter()
            .filter(|w| match self {
                PreferencePool::All => true,
                PreferencePool::Sparse => classify_density(w) == Density::Sparse,
                PreferencePool::SingleObject => single_object_feature(w).is_some(),
            })
            .collect()
    }
}

/// Draws disjoint train and test preference sets from `pool`.
pub fn sample_preference_split(
    pool: PreferencePool,
    n_train: usize,
    n_test: usize,
    master_seed: u64,
) -> Result<(Vec<PreferenceWeights>, Vec<PreferenceWeights>), DatasetError> {
    let mut members = pool.members();
    if n_train + n_test > members.len() {
        return Err(DatasetError::Infeasible {
            what: "preferences",
            wanted: n_train + n_test,
            available: members.len(),
        });
    }
    members.shuffle(&mut seed::rng_for(master_seed, &[seed::tag("preferences")]));
    let test = members.split_off(n_train).into_iter().take(n_test).collect();
    Ok((members, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DemoSelection {
    /// Highest ground-truth return among the perturbed trajectories.
    #[default]
    Best,
    /// Perturbed trajectory sampled with probability ∝ exp(R_gt / temperature).
    Boltzmann { temperature: f64 },
}

/// How the simulated user phrases the instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionStyle {
    /// Every active feature, in feature order.
    #[default]
    Clear,
    /// A random non-empty subset of the active features.
    Subset,
    ReferentOmitted,
    ExpressionOmitted,
    /// Referent-omitted and expression-omitted alternately within each
    /// preference's demonstrations, starting with referent-omitted.
    Ambiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoSpec {
    pub demos_per_preference: usize,
    pub selection: DemoSelection,
    pub style: InstructionStyle,
}

impl Default for DemoSpec {
    fn default() -> Self {
        DemoSpec {
            demos_per_preference: 10,
            selection: DemoSelection::Best,
            style: InstructionStyle::Clear,
        }
    }
}

/// Picks one demonstration in each of `n` distinct start-goal groups.
pub fn select_demos(
    weights: &PreferenceWeights,
    bank: &TrajectoryBank,
    n: usize,
    selection: DemoSelection,
    rng: &mut seed::Rng,
) -> Result<Vec<TrajectoryId>, DatasetError> {
    if let DemoSelection::Boltzmann { temperature } = selection {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(DatasetError::Temperature(temperature));
        }
    }
    let groups: Vec<_> = bank.pair_groups().filter(|(_, p)| p.trajectories.len() > 1).collect();
    if n > groups.len() {
        return Err(DatasetError::Infeasible {
            what: "start-goal groups with perturbed trajectories",
            wanted: n,
            available: groups.len(),
        });
    }
    let mut chosen: Vec<_> = groups.choose_multiple(rng, n).collect();
    chosen.sort_by_key(|(c, p)| (*c, p.pair_id));
    Ok(chosen
        .into_iter()
        .map(|&(config_id, group)| {
            let returns: Vec<f64> = group.perturbed().iter().map(|t| gt_return(weights, t)).collect();
            let pick = match selection {
                DemoSelection::Best => {
                    let mut best = 0;
                    for (i, r) in returns.iter().enumerate() {
                        if *r > returns[best] {
                            best = i;
                        }
                    }
                    best
                }
                DemoSelection::Boltzmann { temperature } => {
                    let top = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = returns.iter().map(|r| ((r - top) / temperature).exp()).collect();
                    WeightedIndex::new(&w).expect("max weight is 1").sample(rng)
                }
            };
            TrajectoryId {
                config_id,
                pair_id: group.pair_id,
                index: pick + 1,
            }
        })
        .collect())
}

/// Labelled demonstrations for every preference, without masks.
///
/// Preference `i` draws from its own stream, so adding preferences leaves
/// earlier ones untouched. Demo ids count up across the whole dataset.
pub fn build_examples(
    preferences: &[PreferenceWeights],
    bank: &TrajectoryBank,
    spec: &DemoSpec,
    master_seed: u64,
) -> Result<Vec<AnnotatedExample>, DatasetError> {
    let mut out = Vec::with_capacity(preferences.len() * spec.demos_per_preference);
    for (i, w) in preferences.iter().enumerate() {
        let mut rng = seed::rng_for(master_seed, &[seed::tag("demos"), i as u64]);
        let ids = select_demos(w, bank, spec.demos_per_preference, spec.selection, &mut rng)?;
        for (k, id) in ids.into_iter().enumerate() {
            let instruction = match spec.style {
                InstructionStyle::Clear => render_instruction(w, Ambiguity::Clear)?,
                InstructionStyle::Subset => render_subset_instruction(w, &mut rng),
                InstructionStyle::ReferentOmitted => render_instruction(w, Ambiguity::ReferentOmitted)?,
                InstructionStyle::ExpressionOmitted => render_instruction(w, Ambiguity::ExpressionOmitted)?,
                InstructionStyle::Ambiguous if k % 2 == 0 => render_instruction(w, Ambiguity::ReferentOmitted)?,
                InstructionStyle::Ambiguous => render_instruction(w, Ambiguity::ExpressionOmitted)?,
            };
            out.push(AnnotatedExample {
                demo_id: out.len(),
                config_id: id.config_id,
                pair_id: id.pair_id,
                bank_index: id.index,
                trajectory: bank.get(id).expect("selected from bank").clone(),
                instruction,
                mask: None,
                preference: *w,
                flags: ExampleFlags::default(),
            });
        }
    }
    Ok(out)
}

/// Sets every mask to the oracle mask of the example's hidden preference.
pub fn attach_oracle_masks(examples: &mut [AnnotatedExample]) {
    for e in examples {
        e.mask = Some(oracle_mask(&e.preference));
        e.flags.degenerate_mask = false;
    }
}
