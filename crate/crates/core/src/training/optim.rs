//! Adam optimizer over a [`RewardModel`]'s tensors.

use serde::{Deserialize, Serialize};

use crate::reward_model::checkpoint::{NamedTensor, OptimizerState};
use crate::reward_model::{RewardModel, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    m: RewardModel<F>,
    v: RewardModel<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig, model: &RewardModel<F>) -> Self {
        Adam {
            config,
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of `model` along `grads`.
    pub fn step(&mut self, model: &mut RewardModel<F>, grads: &RewardModel<F>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = F::of(c.beta1);
        let b2 = F::of(c.beta2);
        let one = F::one();
        let step_size = F::of(c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t)));
        let eps_hat = F::of(c.eps * (1.0 - c.beta2.powi(t)).sqrt());
        let params = model.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        let gs = grads.tensors();
        for (((mut p, mut m), mut v), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(gs) {
            ndarray::Zip::from(&mut p)
                .and(&mut m)
                .and(&mut v)
                .and(&g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p -= step_size * *m / (v.sqrt() + eps_hat);
                });
        }
    }

    pub fn state(&self) -> OptimizerState {
        let named =
            |model: &RewardModel<F>| -> Vec<NamedTensor> { crate::reward_model::checkpoint::export_tensors(model) };
        OptimizerState {
            step: self.step,
            first_moment: named(&self.m),
            second_moment: named(&self.v),
        }
    }

    pub fn restore(
        config: AdamConfig,
        model: &RewardModel<F>,
        state: &OptimizerState,
    ) -> Result<Self, crate::reward_model::CheckpointError> {
        let mut adam = Adam::new(config, model);
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        crate::reward_model::checkpoint::import_into(adam.m.tensors_mut(), &names, &state.first_moment)?;
        crate::reward_model::checkpoint::import_into(adam.v.tensors_mut(), &names, &state.second_moment)?;
        adam.step = state.step;
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward_model::ModelShape;

    #[test]
    fn first_step_moves_each_param_by_lr() {
        let mut model = RewardModel::<f64>::init(ModelShape::new(4, 3), 1);
        let before = model.clone();
        let mut grads = model.zeros_like();
        for mut t in grads.tensors_mut() {
            t.fill(0.5);
        }
        let mut adam = Adam::new(AdamConfig::default(), &model);
        adam.step(&mut model, &grads);
        for ((_, a), (_, b)) in before.tensors().iter().zip(model.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y - 1e-3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn state_round_trip() {
        let mut model = RewardModel::<f64>::init(ModelShape::new(4, 3), 1);
        let mut grads = model.zeros_like();
        for mut t in grads.tensors_mut() {
            t.fill(-0.25);
        }
        let mut adam = Adam::new(AdamConfig::default(), &model);
        adam.step(&mut model, &grads);
        let restored = Adam::restore(AdamConfig::default(), &model, &adam.state()).unwrap();
        assert_eq!(restored.steps(), 1);
        assert_eq!(restored.state(), adam.state());
    }
}
