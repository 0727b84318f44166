//! Central finite-difference check of the analytic loss gradient.

use super::loss::{evaluate, BatchItem, EmbeddingTable, LossError, Objective};
use crate::reward_model::RewardModel;
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn set_param(model: &mut RewardModel<f64>, tensor: usize, index: usize, value: f64) {
    let mut views = model.tensors_mut();
    let t = &mut views[tensor];
    *t.iter_mut().nth(index).expect("index in range") = value;
}

/// Compares every parameter's analytic gradient of the objective with
/// `(J(θ + h) − J(θ − h)) / 2h`. Each evaluation replays `rng` from the
/// same state so the masking noise is identical.
pub fn check_gradients(
    model: &RewardModel<f64>,
    table: &EmbeddingTable<f64>,
    items: &[BatchItem<'_>],
    objective: &Objective,
    rng: &Rng,
    h: f64,
    floor: f64,
) -> Result<GradCheck, LossError> {
    let mut grads = model.zeros_like();
    evaluate(model, table, items, objective, &mut rng.clone(), Some(&mut grads))?;
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    for (k, ((name, params), (_, grad))) in model.tensors().into_iter().zip(grads.tensors()).enumerate() {
        let mut rel: f64 = 0.0;
        let mut abs: f64 = 0.0;
        for (i, (&theta, &a)) in params.iter().zip(grad.iter()).enumerate() {
            let mut at = |v: f64| -> Result<f64, LossError> {
                set_param(&mut probe, k, i, v);
                Ok(evaluate(&probe, table, items, objective, &mut rng.clone(), None)?.total)
            };
            let numeric = (at(theta + h)? - at(theta - h)?) / (2.0 * h);
            set_param(&mut probe, k, i, theta);
            rel = rel.max(relative_error(a, numeric, floor));
            abs = abs.max((a - numeric).abs());
        }
        tensors.push(TensorCheck {
            name,
            max_rel_error: rel,
            max_abs_error: abs,
        });
    }
    Ok(GradCheck { tensors })
}
