//! Run configuration: a TOML file of documented keys plus `key=value`
//! overrides.
//!
//! Every key has a default, so an empty file is the desk configuration.
//!
//! | key | meaning |
//! |---|---|
//! | `seed` | master seed; also the training seed |
//! | `out` | output directory of the stage |
//! | `data` | directory holding banks and raw datasets (defaults to `out`) |
//! | `precision` | `f32` or `f64` network arithmetic |
//! | `world.train_configs`, `world.test_configs` | object configurations per split |
//! | `world.pairs`, `world.perturbed` | start-goal pairs per config, perturbed paths per pair |
//! | `world.perturbation.*` | bump count, amplitude, rotation noise, min width |
//! | `preferences.pool` | `all`, `sparse` or `single_object` |
//! | `preferences.train`, `preferences.test` | disjoint preference counts |
//! | `demos.demos_per_preference` | demonstrations per preference |
//! | `demos.selection.kind` | `best` or `boltzmann` (with `demos.selection.temperature`) |
//! | `demos.style` | `clear`, `subset`, `referent_omitted`, `expression_omitted`, `ambiguous` |
//! | `annotation.provider` | `oracle`, `mock`, `replay` or `live` |
//! | `annotation.p_flip`, `annotation.p_miss` | mock noise |
//! | `annotation.disambiguate` | clarify ambiguous instructions before masking |
//! | `annotation.rounds` | disambiguation rounds; the most accurate is kept |
//! | `annotation.cache` | cache file, relative to `data` |
//! | `annotation.llm.*` | model ids, temperature, attempts, backoff |
//! | `encoder.dim`, `encoder.embeddings` | hash encoder width or a precomputed embedding file |
//! | `train.*` | optimisation settings (`mode`, `lambda`, `lr`, `epochs`, ...) |
//! | `eval.n_pairs`, `eval.n_draws` | win-rate pairs and variance draws per preference |
//! | `eval.preferences` | evaluate the `train` or `test` preference set |
//! | `eval.method` | label in reports (defaults to the training mode) |

use std::fs;
use std::path::{Path, PathBuf};

use mirl_core::dataset::{DemoSpec, PreferencePool};
use mirl_core::llm::AnnotatorConfig;
use mirl_core::training::TrainConfig;
use mirl_core::world::PerturbationSpec;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub train_configs: usize,
    pub test_configs: usize,
    pub pairs: usize,
    pub perturbed: usize,
    pub perturbation: PerturbationSpec,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            train_configs: 4,
            test_configs: 4,
            pairs: 3,
            perturbed: 5,
            perturbation: PerturbationSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceConfig {
    pub pool: PreferencePool,
    pub train: usize,
    pub test: usize,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        PreferenceConfig {
            pool: PreferencePool::Sparse,
            train: 6,
            test: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Masks from the hidden preferences; no language model involved.
    Oracle,
    /// Offline simulated annotator.
    #[default]
    Mock,
    /// Cache only; any miss is an error.
    Replay,
    /// OpenAI-compatible endpoint, keyed by environment variable.
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub provider: ProviderKind,
    pub p_flip: f64,
    pub p_miss: f64,
    pub disambiguate: bool,
    pub rounds: u32,
    pub cache: PathBuf,
    pub llm: AnnotatorConfig,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            provider: ProviderKind::Mock,
            p_flip: 0.0,
            p_miss: 0.0,
            disambiguate: true,
            rounds: 5,
            cache: PathBuf::from("annotation_cache.jsonl"),
            llm: AnnotatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    /// Line-delimited embedding records from an external encoder; replaces
    /// the hash encoder when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 512,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_pairs: usize,
    pub n_draws: usize,
    pub preferences: EvalSet,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_pairs: 1000,
            n_draws: 5,
            preferences: EvalSet::Train,
            method: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub precision: Precision,
    pub world: WorldConfig,
    pub preferences: PreferenceConfig,
    pub demos: DemoSpec,
    pub annotation: AnnotationConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            data: None,
            precision: Precision::F32,
            world: WorldConfig::default(),
            preferences: PreferenceConfig::default(),
            demos: DemoSpec::default(),
            annotation: AnnotationConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `dotted.key = value` inside `table`, creating tables on the way.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cursor = table;
    for p in path {
        let entry = cursor
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {p} is not a table")))?;
    }
    cursor.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str::<Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let w = &self.world;
        if w.train_configs == 0 || w.test_configs == 0 || w.pairs == 0 {
            return Err(CliError::Config("world counts must be positive".into()));
        }
        if self.preferences.train == 0 {
            return Err(CliError::Config("preferences.train must be positive".into()));
        }
        for (name, p) in [("p_flip", self.annotation.p_flip), ("p_miss", self.annotation.p_miss)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CliError::Config(format!("annotation.{name} must lie in [0, 1]")));
            }
        }
        if self.eval.n_pairs == 0 || self.eval.n_draws < 2 {
            return Err(CliError::Config(
                "eval.n_pairs must be positive and eval.n_draws at least 2".into(),
            ));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn data_dir(&self) -> &Path {
        self.data.as_deref().unwrap_or(&self.out)
    }

    pub fn cache_path(&self) -> PathBuf {
        self.data_dir().join(&self.annotation.cache)
    }

    /// Report label of the evaluated model.
    pub fn method(&self) -> String {
        self.eval
            .method
            .clone()
            .unwrap_or_else(|| self.train.mode.name().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Writes `config.<stage>.toml` into `dir`.
    pub fn write_resolved(&self, dir: &Path, stage: &str) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(format!("config.{stage}.toml"));
        fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
