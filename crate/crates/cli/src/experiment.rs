//! Per-preference evaluation of trained models and reward stubs.

use std::collections::BTreeMap;

use mirl_core::evaluation::{
    bank_states, regret, reward_variance, win_rate, EvalError, EvalRecord, GtReward, LearnedReward, StateReward,
};
use mirl_core::reward_model::{LanguageEncoder, RewardModel, Scalar};
use mirl_core::seed::{rng_for, tag};
use mirl_core::state::StateVector;
use mirl_core::types::{AnnotatedExample, PreferenceWeights, StateMask};
use mirl_core::world::TrajectoryBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSettings {
    pub n_pairs: usize,
    pub n_draws: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_pairs: 1000,
            n_draws: 5,
        }
    }
}

/// One way a user phrased their preference in training, with its share of
/// that preference's rows and the mask annotated for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub text: String,
    pub weight: f64,
    pub mask: Option<StateMask>,
}

/// Groups training instructions by hidden preference. At test time a user
/// speaks as they did in training, so metrics are averaged over these
/// texts with their training frequencies.
pub fn utterances(examples: &[AnnotatedExample]) -> BTreeMap<PreferenceWeights, Vec<Utterance>> {
    let mut counts: BTreeMap<PreferenceWeights, BTreeMap<&str, (usize, Option<StateMask>)>> = BTreeMap::new();
    for e in examples {
        let entry = counts
            .entry(e.preference)
            .or_default()
            .entry(e.instruction.text.as_str())
            .or_insert((0, e.mask));
        entry.0 += 1;
    }
    counts
        .into_iter()
        .map(|(w, texts)| {
            let total: usize = texts.values().map(|(n, _)| n).sum();
            let list = texts
                .into_iter()
                .map(|(text, (n, mask))| Utterance {
                    text: text.to_string(),
                    weight: n as f64 / total as f64,
                    mask,
                })
                .collect();
            (w, list)
        })
        .collect()
}

/// Stable per-preference stream tag: the weights read as a base-3 number.
fn preference_key(w: &PreferenceWeights) -> u64 {
    w.values().iter().fold(0, |acc, &v| acc * 3 + (v + 1) as u64)
}

/// Win rate, reward variance and regret of one reward on one preference.
/// Random streams depend on the seed and the preference only, so every
/// method is scored on the same pairs and noise draws.
pub fn metrics(
    reward: &dyn StateReward,
    weights: &PreferenceWeights,
    bank: &TrajectoryBank,
    states: &[StateVector],
    settings: EvalSettings,
    seed: u64,
) -> Result<[f64; 3], EvalError> {
    let key = preference_key(weights);
    let win = win_rate(
        reward,
        weights,
        bank,
        settings.n_pairs,
        &mut rng_for(seed, &[tag("win_rate"), key]),
    )?;
    let var = reward_variance(
        reward,
        weights,
        states,
        settings.n_draws,
        &mut rng_for(seed, &[tag("variance"), key]),
    );
    let reg = regret(reward, weights, bank)?;
    Ok([win, var, reg])
}

fn record(method: &str, seed: u64, demos: usize, w: PreferenceWeights, m: [f64; 3]) -> EvalRecord {
    EvalRecord {
        method: method.to_string(),
        seed,
        demos_per_preference: demos,
        preference: w,
        win_rate: m[0],
        reward_variance: m[1],
        regret: m[2],
    }
}

/// Scores a trained model on every preference in `users`. With
/// `explicit_mask` each text's annotated mask is applied to the inputs.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model<F: Scalar>(
    model: &RewardModel<F>,
    encoder: &dyn LanguageEncoder,
    explicit_mask: bool,
    users: &BTreeMap<PreferenceWeights, Vec<Utterance>>,
    bank: &TrajectoryBank,
    settings: EvalSettings,
    seed: u64,
    method: &str,
    demos: usize,
) -> Result<Vec<EvalRecord>, EvalError> {
    let states = bank_states(bank);
    let mut out = Vec::with_capacity(users.len());
    for (w, list) in users {
        let mut sum = [0.0; 3];
        for u in list {
            let mask = if explicit_mask { u.mask } else { None };
            let reward = LearnedReward::new(model, encoder, &u.text, mask)?;
            let m = metrics(&reward, w, bank, &states, settings, seed)?;
            for (s, v) in sum.iter_mut().zip(m) {
                *s += u.weight * v;
            }
        }
        out.push(record(method, seed, demos, *w, sum));
    }
    Ok(out)
}

/// The ground-truth reward in place of a model; an upper bound for wiring checks.
pub fn evaluate_gt_stub(
    preferences: impl IntoIterator<Item = PreferenceWeights>,
    bank: &TrajectoryBank,
    settings: EvalSettings,
    seed: u64,
    demos: usize,
) -> Result<Vec<EvalRecord>, EvalError> {
    let states = bank_states(bank);
    preferences
        .into_iter()
        .map(|w| {
            Ok(record(
                "gt_stub",
                seed,
                demos,
                w,
                metrics(&GtReward(w), &w, bank, &states, settings, seed)?,
            ))
        })
        .collect()
}
