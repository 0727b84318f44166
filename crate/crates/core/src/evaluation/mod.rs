//! Reward-quality metrics and multi-seed reports.

pub mod report;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preferences::{gt_reward, oracle_mask};
use crate::reward_model::{LanguageEncoder, ModelError, RewardModel, Scalar};
use crate::seed::{self, Rng};
use crate::state::{StateVector, STATE_DIM};
use crate::types::{CanonicalForm, PreferenceWeights, StateMask, Trajectory};
use crate::world::TrajectoryBank;

pub use report::{build_report, per_preference_csv, plot_data, seed_means, EvalRecord, EvalReport, ReportRow, Stat};

/// Ground-truth return differences at or below this count as ties.
pub const GT_TIE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("only {available} trajectory pairs have distinct ground-truth returns, {wanted} requested")]
    TooFewPairs { wanted: usize, available: usize },
    #[error("candidate group {0} is empty")]
    EmptyGroup(usize),
    #[error("{what}: {left} vs {right} entries")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("ground-truth instruction {0} has no canonical form")]
    UnparsedTruth(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A per-state reward function bound to one instruction.
pub trait StateReward {
    fn rewards(&self, states: &[StateVector]) -> Vec<f64>;

    /// Returns of several trajectories, evaluated in one pass.
    fn returns(&self, trajectories: &[&Trajectory]) -> Vec<f64> {
        let states: Vec<StateVector> = trajectories.iter().flat_map(|t| t.states().iter().copied()).collect();
        let r = self.rewards(&states);
        let mut out = Vec::with_capacity(trajectories.len());
        let mut at = 0;
        for t in trajectories {
            let n = t.states().len();
            out.push(r[at..at + n].iter().sum());
            at += n;
        }
        out
    }
}

/// The hidden ground-truth reward.
#[derive(Debug, Clone, Copy)]
pub struct GtReward(pub PreferenceWeights);

impl StateReward for GtReward {
    fn rewards(&self, states: &[StateVector]) -> Vec<f64> {
        states.iter().map(|s| gt_reward(&self.0, s)).collect()
    }
}

/// The negated ground-truth reward.
#[derive(Debug, Clone, Copy)]
pub struct NegGtReward(pub PreferenceWeights);

impl StateReward for NegGtReward {
    fn rewards(&self, states: &[StateVector]) -> Vec<f64> {
        states.iter().map(|s| -gt_reward(&self.0, s)).collect()
    }
}

/// A fixed pseudo-random function of the state bits, uniform in `[0, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct RandomReward {
    pub seed: u64,
}

impl StateReward for RandomReward {
    fn rewards(&self, states: &[StateVector]) -> Vec<f64> {
        states
            .iter()
            .map(|s| {
                let h =
                    s.0.iter()
                        .fold(seed::splitmix64(self.seed), |h, v| seed::splitmix64(h ^ v.to_bits()));
                (h >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect()
    }
}

/// Any closure over single states.
pub struct FnReward<F>(pub F);

impl<F: Fn(&StateVector) -> f64> StateReward for FnReward<F> {
    fn rewards(&self, states: &[StateVector]) -> Vec<f64> {
        states.iter().map(&self.0).collect()
    }
}

/// A trained network conditioned on one instruction. With `input_mask` the
/// states are masked before the network sees them, as in explicit masking.
pub struct LearnedReward<'a, F> {
    model: &'a RewardModel<F>,
    embedding: Vec<f64>,
    input_mask: Option<StateMask>,
}

impl<'a, F: Scalar> LearnedReward<'a, F> {
    pub fn new(
        model: &'a RewardModel<F>,
        encoder: &dyn LanguageEncoder,
        instruction: &str,
        input_mask: Option<StateMask>,
    ) -> Result<Self, ModelError> {
        let embedding = encoder.encode(instruction)?;
        model.film_params(&embedding)?;
        Ok(LearnedReward {
            model,
            embedding,
            input_mask,
        })
    }
}

impl<F: Scalar> StateReward for LearnedReward<'_, F> {
    fn rewards(&self, states: &[StateVector]) -> Vec<f64> {
        self.model
            .rewards(&self.embedding, states, self.input_mask.as_ref())
            .expect("embedding checked at construction")
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Fraction of sampled trajectory pairs that `reward` orders like the
/// ground truth. Pairs are drawn uniformly from the whole bank; pairs with
/// a ground-truth gap of at most [`GT_TIE`] are redrawn.
pub fn win_rate(
    reward: &dyn StateReward,
    weights: &PreferenceWeights,
    bank: &TrajectoryBank,
    n_pairs: usize,
    rng: &mut Rng,
) -> Result<f64, EvalError> {
    let trajectories: Vec<&Trajectory> = bank.iter().map(|(_, t)| t).collect();
    let gt = GtReward(*weights).returns(&trajectories);
    let n = gt.len();
    let available = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| (gt[i] - gt[j]).abs() > GT_TIE)
        .count();
    if available < n_pairs || n_pairs == 0 {
        return Err(EvalError::TooFewPairs {
            wanted: n_pairs,
            available,
        });
    }
    let learned = reward.returns(&trajectories);
    let mut agree = 0usize;
    let mut drawn = 0usize;
    while drawn < n_pairs {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let d_gt = gt[i] - gt[j];
        if d_gt.abs() <= GT_TIE {
            continue;
        }
        drawn += 1;
        agree += (sign(learned[i] - learned[j]) == sign(d_gt)) as usize;
    }
    Ok(agree as f64 / n_pairs as f64)
}

/// Mean over states of the sample variance (n−1 denominator) of the reward
/// across `n_draws` copies with standard-normal noise on every dimension the
/// oracle mask marks irrelevant.
pub fn reward_variance(
    reward: &dyn StateReward,
    weights: &PreferenceWeights,
    states: &[StateVector],
    n_draws: usize,
    rng: &mut Rng,
) -> f64 {
    if states.is_empty() || n_draws < 2 {
        return 0.0;
    }
    let mask = oracle_mask(weights);
    let irrelevant: Vec<usize> = mask.irrelevant().collect();
    let mut noisy = Vec::with_capacity(states.len() * n_draws);
    for s in states {
        for _ in 0..n_draws {
            let mut x = *s;
            for &j in &irrelevant {
                let e: f64 = StandardNormal.sample(rng);
                x.0[j] += e;
            }
            noisy.push(x);
        }
    }
    let r = reward.rewards(&noisy);
    let total: f64 = r
        .chunks(n_draws)
        .map(|c| {
            // Shifted by the first draw so identical rewards give exactly 0.
            let d: Vec<f64> = c.iter().map(|v| v - c[0]).collect();
            let mean = d.iter().sum::<f64>() / n_draws as f64;
            d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_draws - 1) as f64
        })
        .sum();
    total / states.len() as f64
}

/// Normalised regret of picking the highest-`reward` candidate in each
/// group, averaged over groups. A group whose candidates all tie on the
/// ground truth contributes 0.
pub fn regret_over<'a>(
    reward: &dyn StateReward,
    weights: &PreferenceWeights,
    groups: impl IntoIterator<Item = &'a [Trajectory]>,
) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (g, group) in groups.into_iter().enumerate() {
        if group.is_empty() {
            return Err(EvalError::EmptyGroup(g));
        }
        let refs: Vec<&Trajectory> = group.iter().collect();
        let gt = GtReward(*weights).returns(&refs);
        let learned = reward.returns(&refs);
        let mut chosen = 0;
        for (i, r) in learned.iter().enumerate() {
            if *r > learned[chosen] {
                chosen = i;
            }
        }
        let hi = gt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = gt.iter().copied().fold(f64::INFINITY, f64::min);
        if hi - lo > 0.0 {
            sum += (hi - gt[chosen]) / (hi - lo);
        }
        count += 1;
    }
    if count == 0 {
        return Err(EvalError::EmptyGroup(0));
    }
    Ok(sum / count as f64)
}

/// [`regret_over`] with every (config, start-goal) group of `bank` as a
/// candidate set.
pub fn regret(reward: &dyn StateReward, weights: &PreferenceWeights, bank: &TrajectoryBank) -> Result<f64, EvalError> {
    regret_over(
        reward,
        weights,
        bank.pair_groups().map(|(_, g)| g.trajectories.as_slice()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged precision, recall and F1 over all bits, with "relevant"
/// as the positive class. Empty denominators give 0.
pub fn mask_metrics(predicted: &[StateMask], oracle: &[StateMask]) -> Result<MaskMetrics, EvalError> {
    if predicted.len() != oracle.len() {
        return Err(EvalError::LengthMismatch {
            what: "predicted vs oracle masks",
            left: predicted.len(),
            right: oracle.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, o) in predicted.iter().zip(oracle) {
        for j in 0..STATE_DIM {
            match (p.is_relevant(j), o.is_relevant(j)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MaskMetrics { precision, recall, f1 })
}

/// Fraction of queries whose candidate list contains the ground truth.
pub fn instruction_accuracy(candidates: &[Vec<CanonicalForm>], truth: &[CanonicalForm]) -> Result<f64, EvalError> {
    if candidates.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            what: "candidate lists vs ground truths",
            left: candidates.len(),
            right: truth.len(),
        });
    }
    if let Some(i) = truth.iter().position(CanonicalForm::is_empty) {
        return Err(EvalError::UnparsedTruth(i));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let hits = candidates.iter().zip(truth).filter(|(c, t)| c.contains(t)).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Every state of every trajectory in `bank`.
pub fn bank_states(bank: &TrajectoryBank) -> Vec<StateVector> {
    bank.iter().flat_map(|(_, t)| t.states().iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::MaskProvenance;

    #[test]
    fn mask_metrics_closed_forms() {
        let w = [
            PreferenceWeights::new([0, 0, -1, 0, 0]).unwrap(),
            PreferenceWeights::new([1, 0, 0, 0, 1]).unwrap(),
        ];
        let oracle: Vec<_> = w.iter().map(oracle_mask).collect();
        let m = mask_metrics(&oracle, &oracle).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        let ones = vec![StateMask::all_ones(MaskProvenance::Llm); 2];
        let m = mask_metrics(&ones, &oracle).unwrap();
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.precision, (4 + 3) as f64 / 38.0);
        assert!(mask_metrics(&ones[..1], &oracle).is_err());
    }

    #[test]
    fn instruction_accuracy_edges() {
        let t = PreferenceWeights::new([0, 1, 0, 0, 0]).unwrap().canonical();
        let other = PreferenceWeights::new([0, -1, 0, 0, 0]).unwrap().canonical();
        let truth = vec![t.clone(), t.clone()];
        assert_eq!(
            instruction_accuracy(&[vec![other.clone(), t.clone()], vec![t.clone()]], &truth).unwrap(),
            1.0
        );
        assert_eq!(instruction_accuracy(&[vec![], vec![]], &truth).unwrap(), 0.0);
        assert!(instruction_accuracy(&[vec![]], &[CanonicalForm::default()]).is_err());
    }
}
