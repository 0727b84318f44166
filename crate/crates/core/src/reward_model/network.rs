//! FiLM-conditioned reward MLP with hand-written backpropagation.
//!
//! ```text
//! h      = encode(ℓ)                          (frozen, dim E)
//! γ      = W_γ1 · relu(W_γ0 h + b_γ0) + b_γ1   (19)
//! β      = W_β1 · relu(W_β0 h + b_β0) + b_β1   (19)
//! fused  = γ ⊙ s + β
//! r(s|ℓ) = MLP(fused), 19 → 128 → 256 → 128 → 1, relu on hidden layers
//! ```
//!
//! Rows are batched: many states share one conditioning row, identified by
//! a group index per row.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::encoder::{EncoderError, LanguageEncoder};
use super::scalar::Scalar;
use crate::seed::{self, Rng};
use crate::state::{StateVector, STATE_DIM};
use crate::types::{StateMask, Trajectory};

/// Scale applied to the FiLM output-layer init so that γ ≈ 1 and β ≈ 0.
pub const FILM_OUTPUT_INIT_SCALE: f64 = 0.1;

/// Rows evaluated per forward chunk in [`RewardModel::rewards`].
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("embedding dimension {got} does not match model input {expected}")]
    EmbeddingDim { expected: usize, got: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Element-wise `γ ⊙ s + β`.
pub fn film_modulate(state: &[f64], gamma: &[f64], beta: &[f64]) -> Result<Vec<f64>, ModelError> {
    for v in [gamma.len(), beta.len()] {
        if v != state.len() {
            return Err(ModelError::Length {
                expected: state.len(),
                got: v,
            });
        }
    }
    if state.len() != STATE_DIM {
        return Err(ModelError::Length {
            expected: STATE_DIM,
            got: state.len(),
        });
    }
    Ok(state.iter().zip(gamma).zip(beta).map(|((s, g), b)| g * s + b).collect())
}

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub film_hidden: usize,
    pub hidden: [usize; 3],
}

impl ModelShape {
    pub fn new(embed_dim: usize, film_hidden: usize) -> Self {
        ModelShape {
            embed_dim,
            film_hidden,
            hidden: [128, 256, 128],
        }
    }

    fn film_dims(&self) -> [(usize, usize); 2] {
        [(self.embed_dim, self.film_hidden), (self.film_hidden, STATE_DIM)]
    }

    fn mlp_dims(&self) -> [(usize, usize); 4] {
        let [a, b, c] = self.hidden;
        [(STATE_DIM, a), (a, b), (b, c), (c, 1)]
    }

    pub fn param_count(&self) -> usize {
        let film: usize = self.film_dims().iter().map(|(i, o)| i * o + o).sum();
        let mlp: usize = self.mlp_dims().iter().map(|(i, o)| i * o + o).sum();
        2 * film + mlp
    }
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape::new(512, 128)
    }
}

/// Affine layer; `weight` is stored input-major (`in × out`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Dense<F> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform `±scale/sqrt(fan_in)` for weights and biases.
    fn init(inputs: usize, outputs: usize, scale: f64, rng: &mut Rng) -> Self {
        let bound = scale / (inputs as f64).sqrt();
        let mut draw = || {
            F::of(if bound > 0.0 {
                rng.random_range(-bound..bound)
            } else {
                0.0
            })
        };
        let weight = Array2::from_shape_simple_fn((inputs, outputs), &mut draw);
        let bias = Array1::from_shape_simple_fn(outputs, &mut draw);
        Dense { weight, bias }
    }

    fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(
        &self,
        input: &Array2<F>,
        d_out: &Array2<F>,
        grad: &mut Dense<F>,
        need_input: bool,
    ) -> Option<Array2<F>> {
        grad.weight += &input.t().dot(d_out);
        grad.bias += &d_out.sum_axis(Axis(0));
        need_input.then(|| d_out.dot(&self.weight.t()))
    }
}

fn relu<F: Scalar>(mut x: Array2<F>) -> Array2<F> {
    x.mapv_inplace(|v| v.max(F::zero()));
    x
}

/// Zeroes `d` where the post-activation was not positive.
fn relu_backward<F: Scalar>(mut d: Array2<F>, activated: &Array2<F>) -> Array2<F> {
    Zip::from(&mut d).and(activated).for_each(|g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
    d
}

/// The complete parameter set. Also used as its own gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel<F> {
    shape: ModelShape,
    film_gamma: [Dense<F>; 2],
    film_beta: [Dense<F>; 2],
    mlp: [Dense<F>; 4],
}

/// Conditioning for a set of instruction embeddings.
#[derive(Debug, Clone)]
pub struct Film<F> {
    embeddings: Array2<F>,
    gamma_hidden: Array2<F>,
    beta_hidden: Array2<F>,
    pub gamma: Array2<F>,
    pub beta: Array2<F>,
}

/// Activations saved for the backward pass.
#[derive(Debug, Clone)]
pub struct RowCache<F> {
    inputs: Array2<F>,
    groups: Vec<usize>,
    fused: Array2<F>,
    hidden: [Array2<F>; 3],
}

impl<F: Scalar> RewardModel<F> {
    pub fn zeros(shape: ModelShape) -> Self {
        let f = shape.film_dims();
        let m = shape.mlp_dims();
        RewardModel {
            shape,
            film_gamma: f.map(|(i, o)| Dense::zeros(i, o)),
            film_beta: f.map(|(i, o)| Dense::zeros(i, o)),
            mlp: m.map(|(i, o)| Dense::zeros(i, o)),
        }
    }

    /// Fan-in scaled uniform init with identity FiLM at the start: the FiLM
    /// output layers use a reduced scale and γ's output bias is 1.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = seed::rng_for(seed, &[seed::tag("init")]);
        let f = shape.film_dims();
        let film = |rng: &mut Rng| {
            [
                Dense::init(f[0].0, f[0].1, 1.0, rng),
                Dense::init(f[1].0, f[1].1, FILM_OUTPUT_INIT_SCALE, rng),
            ]
        };
        let mut film_gamma = film(&mut rng);
        let mut film_beta = film(&mut rng);
        film_gamma[1].bias.fill(F::one());
        film_beta[1].bias.fill(F::zero());
        let mlp = shape.mlp_dims().map(|(i, o)| Dense::init(i, o, 1.0, &mut rng));
        RewardModel {
            shape,
            film_gamma,
            film_beta,
            mlp,
        }
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    /// Sets the final layer to zero so every reward is exactly 0.
    pub fn zero_output_head(&mut self) {
        self.mlp[3].weight.fill(F::zero());
        self.mlp[3].bias.fill(F::zero());
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        let groups: [(&str, &[Dense<F>]); 3] = [
            ("film_gamma", &self.film_gamma),
            ("film_beta", &self.film_beta),
            ("mlp", &self.mlp),
        ];
        for (name, layers) in groups {
            for (k, l) in layers.iter().enumerate() {
                out.push((format!("{name}.{k}.weight"), l.weight.view().into_dyn()));
                out.push((format!("{name}.{k}.bias"), l.bias.view().into_dyn()));
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut out = Vec::new();
        for l in self
            .film_gamma
            .iter_mut()
            .chain(self.film_beta.iter_mut())
            .chain(self.mlp.iter_mut())
        {
            out.push(l.weight.view_mut().into_dyn());
            out.push(l.bias.view_mut().into_dyn());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Converts every parameter to another precision.
    pub fn cast<G: Scalar>(&self) -> RewardModel<G> {
        let conv = |l: &Dense<F>| Dense {
            weight: l.weight.mapv(|v| G::of(v.as_f64())),
            bias: l.bias.mapv(|v| G::of(v.as_f64())),
        };
        RewardModel {
            shape: self.shape,
            film_gamma: self.film_gamma.each_ref().map(conv),
            film_beta: self.film_beta.each_ref().map(conv),
            mlp: self.mlp.each_ref().map(conv),
        }
    }

    pub fn film(&self, embeddings: &Array2<F>) -> Result<Film<F>, ModelError> {
        if embeddings.ncols() != self.shape.embed_dim {
            return Err(ModelError::EmbeddingDim {
                expected: self.shape.embed_dim,
                got: embeddings.ncols(),
            });
        }
        let gamma_hidden = relu(self.film_gamma[0].forward(embeddings));
        let gamma = self.film_gamma[1].forward(&gamma_hidden);
        let beta_hidden = relu(self.film_beta[0].forward(embeddings));
        let beta = self.film_beta[1].forward(&beta_hidden);
        Ok(Film {
            embeddings: embeddings.clone(),
            gamma_hidden,
            beta_hidden,
            gamma,
            beta,
        })
    }

    /// Rewards for `inputs` (`n × 19`), row `i` conditioned on `film` row `groups[i]`.
    pub fn forward_rows(&self, film: &Film<F>, inputs: Array2<F>, groups: Vec<usize>) -> (Array1<F>, RowCache<F>) {
        assert_eq!(inputs.nrows(), groups.len());
        assert_eq!(inputs.ncols(), STATE_DIM);
        let mut fused = inputs.clone();
        for (mut row, &g) in fused.axis_iter_mut(Axis(0)).zip(&groups) {
            Zip::from(&mut row)
                .and(film.gamma.row(g))
                .and(film.beta.row(g))
                .for_each(|x, &ga, &be| *x = ga * *x + be);
        }
        let h1 = relu(self.mlp[0].forward(&fused));
        let h2 = relu(self.mlp[1].forward(&h1));
        let h3 = relu(self.mlp[2].forward(&h2));
        let out = self.mlp[3].forward(&h3);
        let rewards = out.column(0).to_owned();
        (
            rewards,
            RowCache {
                inputs,
                groups,
                fused,
                hidden: [h1, h2, h3],
            },
        )
    }

    /// Accumulates `Σᵢ d_rewards[i] · ∂rᵢ/∂θ` into `grads`.
    pub fn backward_rows(
        &self,
        film: &Film<F>,
        cache: &RowCache<F>,
        d_rewards: ArrayView1<F>,
        grads: &mut RewardModel<F>,
    ) {
        let n = d_rewards.len();
        let d_out = d_rewards.to_owned().into_shape_with_order((n, 1)).expect("column");
        let [h1, h2, h3] = &cache.hidden;
        let d = self.mlp[3]
            .backward(h3, &d_out, &mut grads.mlp[3], true)
            .expect("input grad");
        let d = relu_backward(d, h3);
        let d = self.mlp[2]
            .backward(h2, &d, &mut grads.mlp[2], true)
            .expect("input grad");
        let d = relu_backward(d, h2);
        let d = self.mlp[1]
            .backward(h1, &d, &mut grads.mlp[1], true)
            .expect("input grad");
        let d = relu_backward(d, h1);
        let d_fused = self.mlp[0]
            .backward(&cache.fused, &d, &mut grads.mlp[0], true)
            .expect("input grad");

        let groups = film.gamma.nrows();
        let mut d_gamma = Array2::<F>::zeros((groups, STATE_DIM));
        let mut d_beta = Array2::<F>::zeros((groups, STATE_DIM));
        for ((dr, x), &g) in d_fused
            .axis_iter(Axis(0))
            .zip(cache.inputs.axis_iter(Axis(0)))
            .zip(&cache.groups)
        {
            Zip::from(d_gamma.row_mut(g))
                .and(&dr)
                .and(&x)
                .for_each(|acc, &d, &x| *acc += d * x);
            Zip::from(d_beta.row_mut(g)).and(&dr).for_each(|acc, &d| *acc += d);
        }
        self.film_backward(film, &d_gamma, &d_beta, grads);
    }

    fn film_backward(&self, film: &Film<F>, d_gamma: &Array2<F>, d_beta: &Array2<F>, grads: &mut RewardModel<F>) {
        let d = self.film_gamma[1]
            .backward(&film.gamma_hidden, d_gamma, &mut grads.film_gamma[1], true)
            .expect("input grad");
        let d = relu_backward(d, &film.gamma_hidden);
        self.film_gamma[0].backward(&film.embeddings, &d, &mut grads.film_gamma[0], false);

        let d = self.film_beta[1]
            .backward(&film.beta_hidden, d_beta, &mut grads.film_beta[1], true)
            .expect("input grad");
        let d = relu_backward(d, &film.beta_hidden);
        self.film_beta[0].backward(&film.embeddings, &d, &mut grads.film_beta[0], false);
    }

    /// Per-state rewards under one instruction embedding. With `input_mask`
    /// the states are multiplied by the mask before conditioning.
    pub fn rewards(
        &self,
        embedding: &[f64],
        states: &[StateVector],
        input_mask: Option<&StateMask>,
    ) -> Result<Vec<f64>, ModelError> {
        let emb = Array2::from_shape_vec((1, embedding.len()), embedding.iter().map(|&v| F::of(v)).collect())
            .expect("row vector");
        let film = self.film(&emb)?;
        let mut out = Vec::with_capacity(states.len());
        for chunk in states.chunks(EVAL_CHUNK) {
            let x = states_matrix(chunk, input_mask);
            let (r, _) = self.forward_rows(&film, x, vec![0; chunk.len()]);
            out.extend(r.iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }

    /// `r_θ(s | ℓ)`.
    pub fn reward(
        &self,
        encoder: &dyn LanguageEncoder,
        state: &StateVector,
        instruction: &str,
    ) -> Result<f64, ModelError> {
        let emb = encoder.encode(instruction)?;
        Ok(self.rewards(&emb, std::slice::from_ref(state), None)?[0])
    }

    /// `R_θ(τ | ℓ) = Σ_{s∈τ} r_θ(s | ℓ)`.
    pub fn trajectory_return(
        &self,
        encoder: &dyn LanguageEncoder,
        trajectory: &Trajectory,
        instruction: &str,
    ) -> Result<f64, ModelError> {
        let emb = encoder.encode(instruction)?;
        Ok(self.rewards(&emb, trajectory.states(), None)?.iter().sum())
    }

    /// `γ` and `β` for one embedding.
    pub fn film_params(&self, embedding: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let emb = Array2::from_shape_vec((1, embedding.len()), embedding.iter().map(|&v| F::of(v)).collect())
            .expect("row vector");
        let film = self.film(&emb)?;
        let to = |a: &Array2<F>| a.row(0).iter().map(|v| v.as_f64()).collect();
        Ok((to(&film.gamma), to(&film.beta)))
    }

    /// Dense copies of each tensor for serialisation.
    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.tensors()
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec(), t.iter().map(|v| v.as_f64()).collect()))
            .collect()
    }
}

/// Stacks states into an `n × 19` matrix, optionally masked.
pub fn states_matrix<F: Scalar>(states: &[StateVector], mask: Option<&StateMask>) -> Array2<F> {
    let mut x = Array2::<F>::zeros((states.len(), STATE_DIM));
    for (mut row, s) in x.axis_iter_mut(Axis(0)).zip(states) {
        let s = mask.map_or(*s, |m| m.apply(s));
        for (dst, &v) in row.iter_mut().zip(&s.0) {
            *dst = F::of(v);
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward_model::encoder::HashEncoder;
    use crate::state::{pack_state, IDENTITY_ROTATION};
    use crate::types::{EnvironmentConfig, WORKSPACE};

    fn sample_state(z: f64) -> StateVector {
        pack_state(
            [0.1, -0.2, z],
            IDENTITY_ROTATION,
            [0.3, 0.6, 1.0],
            [0.0, -0.2, 0.7],
            0.7,
        )
        .unwrap()
    }

    #[test]
    fn modulation_cases() {
        let s: Vec<f64> = (0..STATE_DIM).map(|i| i as f64 * 0.1 - 0.5).collect();
        let ones = vec![1.0; STATE_DIM];
        let zeros = vec![0.0; STATE_DIM];
        let beta: Vec<f64> = (0..STATE_DIM).map(|i| i as f64).collect();
        assert_eq!(film_modulate(&s, &ones, &zeros).unwrap(), s);
        assert_eq!(film_modulate(&s, &zeros, &beta).unwrap(), beta);
        let gamma: Vec<f64> = (0..STATE_DIM).map(|i| 0.5 + i as f64 * 0.01).collect();
        let scaled: Vec<f64> = s.iter().map(|v| 3.0 * v).collect();
        let a = film_modulate(&scaled, &gamma, &zeros).unwrap();
        let b = film_modulate(&s, &gamma, &zeros).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - 3.0 * y).abs() < 1e-12);
        }
        assert!(film_modulate(&s[..18], &ones[..18], &zeros[..18]).is_err());
        assert!(film_modulate(&s, &ones[..18], &zeros).is_err());
    }

    #[test]
    fn param_count_closed_form() {
        let shape = ModelShape::new(512, 128);
        let model = RewardModel::<f64>::init(shape, 0);
        // γ/β nets: 512·128 + 128 + 128·19 + 19 each; MLP: 19·128+128 + 128·256+256 + 256·128+128 + 128+1.
        let film = 512 * 128 + 128 + 128 * 19 + 19;
        let mlp = 19 * 128 + 128 + 128 * 256 + 256 + 256 * 128 + 128 + 128 + 1;
        assert_eq!(model.param_count(), 2 * film + mlp);
        assert_eq!(shape.param_count(), 204_839);
    }

    #[test]
    fn init_is_identity_film_and_deterministic() {
        let shape = ModelShape::new(64, 32);
        let a = RewardModel::<f64>::init(shape, 7);
        assert_eq!(a, RewardModel::<f64>::init(shape, 7));
        assert_ne!(a, RewardModel::<f64>::init(shape, 8));
        let enc = HashEncoder::new(64);
        let (g, b) = a
            .film_params(&enc.encode("Stay away from the laptop").unwrap())
            .unwrap();
        assert!(g.iter().all(|v| (v - 1.0).abs() < 0.1), "{g:?}");
        assert!(b.iter().all(|v| v.abs() < 0.1), "{b:?}");
    }

    #[test]
    fn zero_head_and_additivity() {
        let shape = ModelShape::new(32, 8);
        let enc = HashEncoder::new(32);
        let mut model = RewardModel::<f64>::init(shape, 1);
        let s = sample_state(1.0);
        let cfg = EnvironmentConfig {
            human: [0.3, 0.6, 1.0],
            laptop: [0.0, -0.2, 0.7],
            table_z: 0.7,
            bounds: WORKSPACE,
        };
        let constant = Trajectory::new(vec![s; 21], cfg).unwrap();
        let r = model.reward(&enc, &s, "Stay close to the table").unwrap();
        assert_eq!(r, model.reward(&enc, &s, "Stay close to the table").unwrap());
        let ret = model
            .trajectory_return(&enc, &constant, "Stay close to the table")
            .unwrap();
        assert!((ret - 21.0 * r).abs() < 1e-10);

        let mut states: Vec<StateVector> = (0..21).map(|k| sample_state(0.8 + 0.02 * k as f64)).collect();
        let t1 = Trajectory::new(states.clone(), cfg).unwrap();
        states.reverse();
        let t2 = Trajectory::new(states, cfg).unwrap();
        let r1 = model.trajectory_return(&enc, &t1, "Tilt the mug").unwrap();
        let r2 = model.trajectory_return(&enc, &t2, "Tilt the mug").unwrap();
        assert!((r1 - r2).abs() < 1e-10);

        model.zero_output_head();
        assert_eq!(model.reward(&enc, &s, "anything").unwrap(), 0.0);
        assert_eq!(model.trajectory_return(&enc, &constant, "anything").unwrap(), 0.0);
    }

    #[test]
    fn embedding_dimension_checked() {
        let model = RewardModel::<f64>::init(ModelShape::new(16, 4), 0);
        assert!(matches!(
            model.rewards(&[0.0; 8], &[sample_state(1.0)], None),
            Err(ModelError::EmbeddingDim { .. })
        ));
    }
}
