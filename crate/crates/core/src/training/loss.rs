//! Sample-based MaxEnt IRL loss, masking loss and their combination.
//!
//! For a demonstration `τ` with instruction `ℓ` and candidate set `C ∋ τ`
//! drawn from the same scene and start-goal pair:
//!
//! ```text
//! L_IRL  = mean_τ [ logsumexp_{c∈C} R(c|ℓ) − R(τ|ℓ) ]
//! L_mask = mean_{τ, s∈τ, j: m_j=0} | r(s + ε e_j | ℓ) − r(s | ℓ) |,  ε ~ U(0, 1)
//! J      = L_IRL + λ L_mask
//! ```

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward_model::network::{ModelError, RewardModel};
use crate::reward_model::{LanguageEncoder, Scalar};
use crate::seed::Rng;
use crate::state::{StateVector, STATE_DIM, TRAJECTORY_LEN};
use crate::types::{StateMask, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// IRL loss plus λ-weighted masking loss.
    MaskedIrl,
    /// IRL loss on `s ⊙ m` inputs.
    ExplicitMask,
    /// IRL loss only; masks are never read.
    LcRl,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::MaskedIrl => "masked_irl",
            Mode::ExplicitMask => "explicit_mask",
            Mode::LcRl => "lc_rl",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "masked_irl" => Some(Mode::MaskedIrl),
            "explicit_mask" => Some(Mode::ExplicitMask),
            "lc_rl" => Some(Mode::LcRl),
            _ => None,
        }
    }

    /// Whether the examples' masks are consumed.
    pub fn uses_masks(self) -> bool {
        !matches!(self, Mode::LcRl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub mode: Mode,
    /// Masking weight; ignored outside [`Mode::MaskedIrl`].
    pub lambda: f64,
    /// Noise draws per (state, masked dim).
    pub mask_draws: usize,
}

impl Objective {
    pub fn new(mode: Mode, lambda: f64) -> Self {
        Objective {
            mode,
            lambda,
            mask_draws: 1,
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::MaskedIrl => self.lambda,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("batch item {0} has no mask but the objective needs one")]
    MissingMask(usize),
    #[error("batch item {0} has an empty candidate set")]
    EmptyCandidates(usize),
    #[error("instruction {0:?} missing from the embedding table")]
    UnknownInstruction(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One demonstration with its candidate set; `candidates[0]` is the demonstration.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub instruction: &'a str,
    pub mask: Option<&'a StateMask>,
    pub candidates: Vec<&'a Trajectory>,
}

impl<'a> BatchItem<'a> {
    pub fn demo(&self) -> &'a Trajectory {
        self.candidates[0]
    }
}

/// Instruction embeddings, one row per distinct text.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<F> {
    index: HashMap<String, usize>,
    pub matrix: Array2<F>,
}

impl<F: Scalar> EmbeddingTable<F> {
    pub fn build<'t>(
        encoder: &dyn LanguageEncoder,
        texts: impl IntoIterator<Item = &'t str>,
    ) -> Result<Self, ModelError> {
        let mut index = HashMap::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for t in texts {
            if !index.contains_key(t) {
                index.insert(t.to_string(), rows.len());
                rows.push(encoder.encode(t)?);
            }
        }
        let dim = encoder.dim();
        let mut matrix = Array2::<F>::zeros((rows.len(), dim));
        for (mut dst, src) in matrix.axis_iter_mut(Axis(0)).zip(&rows) {
            if src.len() != dim {
                return Err(ModelError::EmbeddingDim {
                    expected: dim,
                    got: src.len(),
                });
            }
            dst.iter_mut().zip(src).for_each(|(d, &v)| *d = F::of(v));
        }
        Ok(EmbeddingTable { index, matrix })
    }

    pub fn row(&self, text: &str) -> Option<usize> {
        self.index.get(text).copied()
    }

    pub fn embedding(&self, text: &str) -> Option<Vec<f64>> {
        self.row(text)
            .map(|r| self.matrix.row(r).iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub irl: f64,
    pub mask: f64,
    pub total: f64,
    /// Number of perturbation terms averaged in `mask`.
    pub mask_terms: usize,
}

fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-demonstration negative log-likelihood under the sampled partition function.
pub fn demo_nll(returns: &[f64]) -> f64 {
    logsumexp(returns) - returns[0]
}

/// Visits every masking perturbation in a fixed order, drawing `ε` from `rng`.
///
/// Order: item, state, masked dim ascending, draw.
fn for_each_perturbation(
    items: &[BatchItem<'_>],
    draws: usize,
    rng: &mut Rng,
    mut f: impl FnMut(usize, usize, usize, f64),
) -> Result<(), LossError> {
    for (i, item) in items.iter().enumerate() {
        let mask = item.mask.ok_or(LossError::MissingMask(i))?;
        for t in 0..item.demo().states().len() {
            for j in mask.irrelevant() {
                for _ in 0..draws {
                    let eps: f64 = rng.random();
                    f(i, t, j, eps);
                }
            }
        }
    }
    Ok(())
}

/// Masking loss for an arbitrary batched reward function.
///
/// Draws noise in the same order as [`evaluate`], so for a network both
/// give the same value under the same RNG state.
pub fn masking_loss_with(
    reward: impl Fn(&[StateVector], usize) -> Vec<f64>,
    items: &[BatchItem<'_>],
    draws: usize,
    rng: &mut Rng,
) -> Result<f64, LossError> {
    let mut perturbed: Vec<Vec<StateVector>> = vec![Vec::new(); items.len()];
    let mut bases: Vec<Vec<usize>> = vec![Vec::new(); items.len()];
    for_each_perturbation(items, draws, rng, |i, t, j, eps| {
        let mut s = items[i].demo().states()[t];
        s.0[j] += eps;
        perturbed[i].push(s);
        bases[i].push(t);
    })?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, item) in items.iter().enumerate() {
        let base = reward(item.demo().states(), i);
        let pert = reward(&perturbed[i], i);
        for (r, &t) in pert.iter().zip(&bases[i]) {
            sum += (r - base[t]).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Rows per forward/backward block; small blocks stay cache resident.
const ROW_CHUNK: usize = 1024;

struct ItemLayout {
    candidate_offset: usize,
    n_candidates: usize,
}

/// Loss value and, when `grads` is given, its gradient accumulated into `grads`.
pub fn evaluate<F: Scalar>(
    model: &RewardModel<F>,
    table: &EmbeddingTable<F>,
    items: &[BatchItem<'_>],
    objective: &Objective,
    rng: &mut Rng,
    grads: Option<&mut RewardModel<F>>,
) -> Result<LossParts, LossError> {
    if items.is_empty() {
        return Ok(LossParts::default());
    }
    let explicit = objective.mode == Mode::ExplicitMask;
    let with_mask_loss = objective.mode == Mode::MaskedIrl;

    let mut groups = Vec::new();
    let mut layouts = Vec::with_capacity(items.len());
    let mut item_groups = Vec::with_capacity(items.len());
    let mut candidate_rows = 0;
    for (i, item) in items.iter().enumerate() {
        if item.candidates.is_empty() {
            return Err(LossError::EmptyCandidates(i));
        }
        if (explicit || with_mask_loss) && item.mask.is_none() {
            return Err(LossError::MissingMask(i));
        }
        let g = table
            .row(item.instruction)
            .ok_or_else(|| LossError::UnknownInstruction(item.instruction.to_string()))?;
        item_groups.push(g);
        layouts.push(ItemLayout {
            candidate_offset: candidate_rows,
            n_candidates: item.candidates.len(),
        });
        candidate_rows += item.candidates.len() * TRAJECTORY_LEN;
        groups.extend(std::iter::repeat_n(g, item.candidates.len() * TRAJECTORY_LEN));
    }

    // (perturbed row, base row) pairs plus perturbed inputs.
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut perturbed: Vec<[f64; STATE_DIM]> = Vec::new();
    if with_mask_loss {
        for_each_perturbation(items, objective.mask_draws, rng, |i, t, j, eps| {
            let mut s = items[i].demo().states()[t].0;
            s[j] += eps;
            pairs.push((candidate_rows + perturbed.len(), layouts[i].candidate_offset + t));
            perturbed.push(s);
            groups.push(item_groups[i]);
        })?;
    }

    let mut x = Array2::<F>::zeros((candidate_rows + perturbed.len(), STATE_DIM));
    let mut row = 0;
    for item in items {
        let input_mask = if explicit { item.mask } else { None };
        for c in &item.candidates {
            for s in c.states() {
                let s = input_mask.map_or(*s, |m| m.apply(s));
                x.row_mut(row).iter_mut().zip(&s.0).for_each(|(d, &v)| *d = F::of(v));
                row += 1;
            }
        }
    }
    for s in &perturbed {
        x.row_mut(row).iter_mut().zip(s).for_each(|(d, &v)| *d = F::of(v));
        row += 1;
    }

    let film = model.film(&table.matrix)?;
    let mut r: Vec<f64> = Vec::with_capacity(x.nrows());
    let mut caches = Vec::with_capacity(x.nrows().div_ceil(ROW_CHUNK));
    for (k, rows) in x.axis_chunks_iter(Axis(0), ROW_CHUNK).enumerate() {
        let start = k * ROW_CHUNK;
        let g = groups[start..start + rows.nrows()].to_vec();
        let (rewards, cache) = model.forward_rows(&film, rows.to_owned(), g);
        r.extend(rewards.iter().map(|v| v.as_f64()));
        if grads.is_some() {
            caches.push(cache);
        }
    }
    let mut d_r = vec![0.0f64; r.len()];

    let n_items = items.len() as f64;
    let mut irl = 0.0;
    for layout in &layouts {
        let returns: Vec<f64> = (0..layout.n_candidates)
            .map(|c| {
                let start = layout.candidate_offset + c * TRAJECTORY_LEN;
                r[start..start + TRAJECTORY_LEN].iter().sum()
            })
            .collect();
        let lse = logsumexp(&returns);
        irl += lse - returns[0];
        for (c, ret) in returns.iter().enumerate() {
            let p = (ret - lse).exp();
            let g = (p - if c == 0 { 1.0 } else { 0.0 }) / n_items;
            let start = layout.candidate_offset + c * TRAJECTORY_LEN;
            d_r[start..start + TRAJECTORY_LEN].iter_mut().for_each(|d| *d += g);
        }
    }
    irl /= n_items;

    let lambda = objective.effective_lambda();
    let mut mask = 0.0;
    if !pairs.is_empty() {
        let n = pairs.len() as f64;
        for &(p, b) in &pairs {
            let diff = r[p] - r[b];
            mask += diff.abs();
            let g = lambda * sign(diff) / n;
            d_r[p] += g;
            d_r[b] -= g;
        }
        mask /= n;
    }

    if let Some(grads) = grads {
        // Backward is linear in the upstream gradient, so chunks accumulate.
        for (cache, d) in caches.iter().zip(d_r.chunks(ROW_CHUNK)) {
            let d = Array1::from_iter(d.iter().map(|&v| F::of(v)));
            model.backward_rows(&film, cache, d.view(), grads);
        }
    }

    Ok(LossParts {
        irl,
        mask,
        total: irl + lambda * mask,
        mask_terms: pairs.len(),
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn table_for<F: Scalar>(
    encoder: &dyn LanguageEncoder,
    items: &[BatchItem<'_>],
) -> Result<EmbeddingTable<F>, LossError> {
    Ok(EmbeddingTable::build(encoder, items.iter().map(|i| i.instruction))?)
}

/// Mean negative log-likelihood of the demonstrations.
pub fn irl_loss<F: Scalar>(
    model: &RewardModel<F>,
    encoder: &dyn LanguageEncoder,
    items: &[BatchItem<'_>],
) -> Result<f64, LossError> {
    let table = table_for(encoder, items)?;
    let mut rng = crate::seed::rng_for(0, &[]);
    Ok(evaluate(model, &table, items, &Objective::new(Mode::LcRl, 0.0), &mut rng, None)?.irl)
}

/// Mean absolute reward change under single-dimension uniform noise on masked-out dims.
pub fn masking_loss<F: Scalar>(
    model: &RewardModel<F>,
    encoder: &dyn LanguageEncoder,
    items: &[BatchItem<'_>],
    rng: &mut Rng,
) -> Result<f64, LossError> {
    let table = table_for(encoder, items)?;
    Ok(evaluate(model, &table, items, &Objective::new(Mode::MaskedIrl, 1.0), rng, None)?.mask)
}

/// `J = L_IRL + λ L_mask` for the objective's mode.
pub fn total_loss<F: Scalar>(
    model: &RewardModel<F>,
    encoder: &dyn LanguageEncoder,
    items: &[BatchItem<'_>],
    objective: &Objective,
    rng: &mut Rng,
) -> Result<LossParts, LossError> {
    let table = table_for(encoder, items)?;
    evaluate(model, &table, items, objective, rng, None)
}
