//! Checkpoint file: metadata plus one named flat array per tensor.

use std::fs;
use std::path::Path;

use ndarray::ArrayViewMutD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::{ModelShape, RewardModel};
use super::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "mirl-checkpoint/1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format {0:?}")]
    Format(String),
    #[error("tensor {name}: {reason}")]
    Tensor { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub shape: ModelShape,
    pub seed: u64,
    pub precision: String,
    /// Epochs completed across all phases.
    pub epoch: usize,
    pub phase: String,
    /// Hash of the training configuration that produced the weights.
    pub config_hash: String,
}

/// Adam moments, in tensor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<NamedTensor>,
    pub second_moment: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub metadata: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
}

pub(crate) fn export_tensors<F: Scalar>(model: &RewardModel<F>) -> Vec<NamedTensor> {
    model
        .export()
        .into_iter()
        .map(|(name, shape, data)| NamedTensor { name, shape, data })
        .collect()
}

pub(crate) fn import_into<F: Scalar>(
    targets: Vec<ArrayViewMutD<'_, F>>,
    names: &[String],
    tensors: &[NamedTensor],
) -> Result<(), CheckpointError> {
    if tensors.len() != targets.len() {
        return Err(CheckpointError::Tensor {
            name: "*".into(),
            reason: format!("expected {} tensors, found {}", targets.len(), tensors.len()),
        });
    }
    for ((mut dst, name), src) in targets.into_iter().zip(names).zip(tensors) {
        if &src.name != name || src.shape != dst.shape() || src.data.len() != dst.len() {
            return Err(CheckpointError::Tensor {
                name: src.name.clone(),
                reason: format!("expected {name} with shape {:?}", dst.shape()),
            });
        }
        for (d, &v) in dst.iter_mut().zip(&src.data) {
            *d = F::of(v);
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn new<F: Scalar>(model: &RewardModel<F>, metadata: CheckpointMeta, optimizer: Option<OptimizerState>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            metadata,
            tensors: export_tensors(model),
            optimizer,
        }
    }

    pub fn model<F: Scalar>(&self) -> Result<RewardModel<F>, CheckpointError> {
        let mut model = RewardModel::<F>::zeros(self.metadata.shape);
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        import_into(model.tensors_mut(), &names, &self.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(ckpt.format));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let model = RewardModel::<f64>::init(ModelShape::new(8, 4), 3);
        let meta = CheckpointMeta {
            shape: model.shape(),
            seed: 3,
            precision: "f64".into(),
            epoch: 5,
            phase: "pretrain".into(),
            config_hash: "abc".into(),
        };
        let ckpt = Checkpoint::new(&model, meta, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.model::<f64>().unwrap(), model);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = RewardModel::<f64>::init(ModelShape::new(8, 4), 3);
        let meta = CheckpointMeta {
            shape: ModelShape::new(8, 5),
            seed: 3,
            precision: "f64".into(),
            epoch: 0,
            phase: "pretrain".into(),
            config_hash: String::new(),
        };
        let ckpt = Checkpoint::new(&model, meta, None);
        assert!(ckpt.model::<f64>().is_err());
    }
}
