//! The pipeline stages. Each reads its inputs from disk, so stages can run
//! in separate processes.
//!
//! Layout of the data directory: `bank_train.json`, `bank_test.json`,
//! `train.jsonl` and (with test preferences) `finetune.jsonl`. Annotated
//! datasets, checkpoints, logs and reports go to the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mirl_core::dataset::{attach_oracle_masks, build_examples, sample_preference_split};
use mirl_core::evaluation::{build_report, mask_metrics, per_preference_csv, plot_data, EvalRecord};
use mirl_core::llm::provider::API_KEY_VAR;
use mirl_core::llm::{AnnotationCache, Annotator, ChatProvider, HttpProvider, LlmError, MockAnnotator, ReplayProvider};
use mirl_core::preferences::oracle_mask;
use mirl_core::reward_model::{CachedEmbeddingEncoder, Checkpoint, HashEncoder, LanguageEncoder, Scalar};
use mirl_core::seed::{derive_seed, tag};
use mirl_core::training::{augment_best_of_rounds, log_csv, AugmentReport, Mode, Phase, Trainer};
use mirl_core::types::{AnnotatedExample, PreferenceWeights};
use mirl_core::world::{build_bank, SceneLayout, Split, TrajectoryBank};
use serde::{Deserialize, Serialize};

use crate::config::{EvalSet, Precision, ProviderKind, RunConfig};
use crate::datafile::{read_bank, write_atomic, write_bank, Dataset};
use crate::experiment::{evaluate_gt_stub, evaluate_model, utterances, EvalSettings, Utterance};
use crate::CliError;

pub const BANK_TRAIN: &str = "bank_train.json";
pub const BANK_TEST: &str = "bank_test.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const TRAIN_MANIFEST: &str = "train_manifest.json";
pub const EVAL_RECORDS: &str = "eval_records.jsonl";
pub const ANNOTATE_FAILURES: &str = "annotate_failures.json";
pub const ANNOTATE_REPORT: &str = "annotate_report.json";

pub fn raw_dataset(dir: &Path, kind: &str) -> PathBuf {
    dir.join(format!("{kind}.jsonl"))
}

pub fn annotated_dataset(dir: &Path, kind: &str) -> PathBuf {
    dir.join(format!("{kind}.annotated.jsonl"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serialises");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Dataset {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })
}

/// Banks and raw datasets for one seed.
pub fn gen_data(config: &RunConfig) -> Result<(), CliError> {
    let dir = config.data_dir();
    let w = &config.world;
    let layout = SceneLayout::default();
    let bank = |n, split| build_bank(n, w.pairs, w.perturbed, &w.perturbation, &layout, config.seed, split);
    let train_bank = bank(w.train_configs, Split::Train)?;
    let test_bank = bank(w.test_configs, Split::Test)?;
    for g in &test_bank.groups {
        if train_bank.groups.iter().any(|t| t.config == g.config) {
            return Err(CliError::SharedConfig(g.config_id));
        }
    }
    let p = &config.preferences;
    let (train_prefs, test_prefs) = sample_preference_split(p.pool, p.train, p.test, config.seed)?;
    let train = build_examples(&train_prefs, &train_bank, &config.demos, config.seed)?;
    write_bank(&dir.join(BANK_TRAIN), &train_bank)?;
    write_bank(&dir.join(BANK_TEST), &test_bank)?;
    Dataset::new("train", config.seed, train, false).write(&raw_dataset(dir, "train"))?;
    if !test_prefs.is_empty() {
        let seed = derive_seed(config.seed, &[tag("finetune")]);
        let finetune = build_examples(&test_prefs, &train_bank, &config.demos, seed)?;
        Dataset::new("finetune", config.seed, finetune, false).write(&raw_dataset(dir, "finetune"))?;
    }
    config.write_resolved(dir, "gen_data")?;
    log::info!(
        "wrote {} train and {} test trajectories, {} train preferences to {}",
        train_bank.len(),
        test_bank.len(),
        train_prefs.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Failure {
    demo_id: usize,
    instruction: String,
    error: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotateSummary {
    pub kind: String,
    pub provider: ProviderKind,
    pub rows: usize,
    pub augment: Option<AugmentReport>,
    pub best_round: Option<u32>,
    /// Micro-averaged mask F1 against the oracle masks of the hidden preferences.
    pub mask_f1: f64,
}

fn failure_is_local(e: &LlmError) -> bool {
    matches!(
        e,
        LlmError::Parse { .. } | LlmError::BadInstruction(_) | LlmError::Provider { .. }
    )
}

/// Masks (and with disambiguation, clarified rows) for every raw dataset.
pub fn annotate(config: &RunConfig) -> Result<(), CliError> {
    let data = config.data_dir();
    let bank = read_bank(&data.join(BANK_TRAIN))?;
    let a = &config.annotation;
    let mut llm = a.llm.clone();
    let mock = MockAnnotator::new(a.p_flip, a.p_miss, config.seed);
    let live;
    let provider: &dyn ChatProvider = match a.provider {
        ProviderKind::Oracle => &ReplayProvider,
        ProviderKind::Mock => {
            // Mock answers must never be mistaken for a real model's.
            llm.mask_model = mock.model_id();
            llm.disambiguation_model = mock.model_id();
            &mock
        }
        ProviderKind::Replay => &ReplayProvider,
        ProviderKind::Live => {
            live = HttpProvider::from_env().ok_or(CliError::NoApiKey(API_KEY_VAR))?;
            &live
        }
    };
    let cache = AnnotationCache::open(&config.cache_path())?;
    let annotator = Annotator::new(provider, &cache, llm);

    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for kind in ["train", "finetune"] {
        let path = raw_dataset(data, kind);
        if kind == "finetune" && !path.exists() {
            continue;
        }
        let raw = Dataset::read(&path)?;
        let (mut rows, augment, best_round) = if a.provider == ProviderKind::Oracle {
            (raw.examples, None, None)
        } else if a.disambiguate && raw.examples.iter().any(|e| e.instruction.ambiguity.is_ambiguous()) {
            let (rows, report, round) = augment_best_of_rounds(&raw.examples, &bank, &annotator, a.rounds)?;
            (rows, Some(report), Some(round))
        } else {
            (raw.examples, None, None)
        };
        let before = failures.len();
        if a.provider == ProviderKind::Oracle {
            attach_oracle_masks(&mut rows);
        } else {
            for e in rows.iter_mut().filter(|e| e.mask.is_none()) {
                match annotator.predict_mask(&e.instruction.text) {
                    Ok(mask) => {
                        e.flags.degenerate_mask = mask.is_degenerate();
                        e.mask = Some(mask);
                    }
                    Err(err) if failure_is_local(&err) => failures.push(Failure {
                        demo_id: e.demo_id,
                        instruction: e.instruction.text.clone(),
                        error: err.to_string(),
                    }),
                    Err(err) => return Err(err.into()),
                }
            }
        }
        let masked: Vec<&AnnotatedExample> = rows.iter().filter(|e| e.mask.is_some()).collect();
        let predicted: Vec<_> = masked.iter().map(|e| e.mask.expect("filtered")).collect();
        let oracle: Vec<_> = masked.iter().map(|e| oracle_mask(&e.preference)).collect();
        let mask_f1 = mask_metrics(&predicted, &oracle)?.f1;
        summaries.push(AnnotateSummary {
            kind: kind.to_string(),
            provider: a.provider,
            rows: rows.len(),
            augment,
            best_round,
            mask_f1,
        });
        let complete = failures.len() == before;
        Dataset::new(kind, raw.header.seed, rows, complete).write(&annotated_dataset(&config.out, kind))?;
    }
    config.write_resolved(&config.out, "annotate")?;
    write_json(&config.out.join(ANNOTATE_REPORT), &summaries)?;
    if !failures.is_empty() {
        let manifest = config.out.join(ANNOTATE_FAILURES);
        write_json(&manifest, &failures)?;
        return Err(CliError::Annotation {
            failed: failures.len(),
            manifest,
        });
    }
    Ok(())
}

/// Annotated dataset from the output or data directory, else the raw one.
pub fn find_dataset(config: &RunConfig, kind: &str) -> Option<PathBuf> {
    [
        annotated_dataset(&config.out, kind),
        annotated_dataset(config.data_dir(), kind),
        raw_dataset(config.data_dir(), kind),
    ]
    .into_iter()
    .find(|p| p.exists())
}

fn load_training_set(config: &RunConfig, kind: &str) -> Result<Option<(PathBuf, Dataset)>, CliError> {
    let Some(path) = find_dataset(config, kind) else {
        return Ok(None);
    };
    let data = Dataset::read(&path)?;
    if config.train.mode.uses_masks() {
        let missing = data.examples.iter().filter(|e| e.mask.is_none()).count();
        if missing > 0 {
            return Err(CliError::Unannotated(missing));
        }
    }
    Ok(Some((path, data)))
}

pub fn encoder(config: &RunConfig) -> Result<Box<dyn LanguageEncoder>, CliError> {
    Ok(match &config.encoder.embeddings {
        Some(path) => Box::new(CachedEmbeddingEncoder::load(path)?),
        None => Box::new(HashEncoder::new(config.encoder.dim)),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainManifest {
    pub dataset: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_dataset: Option<PathBuf>,
    pub mode: Mode,
    pub precision: Precision,
    pub epochs_done: usize,
    pub config_hash: String,
    pub demos_per_preference: usize,
}

fn train_with<F: Scalar>(config: &RunConfig, resume: bool) -> Result<(), CliError> {
    let out = &config.out;
    let bank = read_bank(&config.data_dir().join(BANK_TRAIN))?;
    let (path, train_set) = load_training_set(config, "train")?.ok_or_else(|| {
        CliError::io(
            &raw_dataset(config.data_dir(), "train"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no training dataset; run gen-data"),
        )
    })?;
    let finetune = if config.train.fine_tune_epochs > 0 {
        load_training_set(config, "finetune")?
    } else {
        None
    };
    let enc = encoder(config)?;
    let ckpt_path = out.join(CHECKPOINT);
    let mut trainer = if resume {
        Trainer::<F>::resume(&Checkpoint::load(&ckpt_path)?, config.train.clone())?
    } else {
        Trainer::<F>::init(enc.as_ref(), config.train.clone())?
    };
    let log_path = out.join(TRAIN_LOG);
    let mut previous = if resume && log_path.exists() {
        fs::read_to_string(&log_path).map_err(|e| CliError::io(&log_path, e))?
    } else {
        String::new()
    };
    let save = |t: &Trainer<F>, phase: Phase| t.checkpoint(phase).save(&ckpt_path).map_err(Into::into);

    let epochs = config.train.epochs;
    let pretrain_left = epochs.saturating_sub(trainer.epochs_done);
    trainer.run(
        Phase::Pretrain,
        pretrain_left,
        &train_set.examples,
        &bank,
        enc.as_ref(),
        save,
    )?;
    if let Some((_, ft)) = &finetune {
        let total = epochs + config.train.fine_tune_epochs;
        let left = total.saturating_sub(trainer.epochs_done);
        if left == config.train.fine_tune_epochs {
            trainer.reset_optimizer();
        }
        trainer.run(Phase::FineTune, left, &ft.examples, &bank, enc.as_ref(), save)?;
    }
    if trainer.log.is_empty() && !ckpt_path.exists() {
        save(&trainer, Phase::Pretrain)?;
    }

    let fresh = log_csv(&trainer.log);
    if previous.is_empty() {
        previous = fresh;
    } else {
        previous.extend(fresh.lines().skip(1).map(|l| format!("{l}\n")));
    }
    write_atomic(&log_path, previous.as_bytes())?;
    let manifest = TrainManifest {
        dataset: path,
        finetune_dataset: finetune.map(|(p, _)| p),
        mode: config.train.mode,
        precision: config.precision,
        epochs_done: trainer.epochs_done,
        config_hash: config.train.hash(),
        demos_per_preference: config.demos.demos_per_preference,
    };
    write_json(&out.join(TRAIN_MANIFEST), &manifest)?;
    config.write_resolved(out, "train")?;
    log::info!(
        "trained {} epochs, checkpoint at {}",
        trainer.epochs_done,
        ckpt_path.display()
    );
    Ok(())
}

pub fn train(config: &RunConfig, resume: bool) -> Result<(), CliError> {
    match config.precision {
        Precision::F32 => train_with::<f32>(config, resume),
        Precision::F64 => train_with::<f64>(config, resume),
    }
}

fn write_reports(out: &Path, records: &[EvalRecord]) -> Result<(), CliError> {
    write_atomic(&out.join("report.csv"), build_report(records).to_csv().as_bytes())?;
    write_atomic(&out.join("per_preference.csv"), per_preference_csv(records).as_bytes())?;
    for (stem, csv) in plot_data(records) {
        write_atomic(&out.join(format!("{stem}.csv")), csv.as_bytes())?;
    }
    Ok(())
}

fn write_records(path: &Path, records: &[EvalRecord]) -> Result<(), CliError> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r).expect("record serialises");
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Dataset {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Scores the trained model (or with `gt_stub`, the ground-truth reward) on
/// the held-out bank. Nothing under the checkpoint is modified.
pub fn eval(config: &RunConfig, gt_stub: bool) -> Result<Vec<EvalRecord>, CliError> {
    let out = &config.out;
    let bank: TrajectoryBank = read_bank(&config.data_dir().join(BANK_TEST))?;
    let settings = EvalSettings {
        n_pairs: config.eval.n_pairs,
        n_draws: config.eval.n_draws,
    };
    let manifest: Option<TrainManifest> = {
        let p = out.join(TRAIN_MANIFEST);
        if p.exists() {
            Some(read_json(&p)?)
        } else {
            None
        }
    };
    let kind = match config.eval.preferences {
        EvalSet::Train => "train",
        EvalSet::Test => "finetune",
    };
    let dataset_path = match (&manifest, config.eval.preferences) {
        (Some(m), EvalSet::Train) => Some(m.dataset.clone()),
        (Some(m), EvalSet::Test) => m.finetune_dataset.clone(),
        (None, _) => None,
    }
    .or_else(|| find_dataset(config, kind))
    .ok_or_else(|| CliError::NoRecords(config.data_dir().to_path_buf()))?;
    let users = utterances(&Dataset::read(&dataset_path)?.examples);
    let demos = config.demos.demos_per_preference;

    let records = if gt_stub {
        evaluate_gt_stub(users.keys().copied(), &bank, settings, config.seed, demos)?
    } else {
        let checkpoint = Checkpoint::load(&out.join(CHECKPOINT))?;
        let enc = encoder(config)?;
        let explicit = config.train.mode == Mode::ExplicitMask;
        let method = config.method();
        let ctx = (
            enc.as_ref(),
            explicit,
            &users,
            &bank,
            settings,
            config.seed,
            method.as_str(),
            demos,
        );
        match checkpoint.metadata.precision.as_str() {
            "f64" => score::<f64>(&checkpoint, ctx)?,
            _ => score::<f32>(&checkpoint, ctx)?,
        }
    };
    write_records(&out.join(EVAL_RECORDS), &records)?;
    write_reports(out, &records)?;
    config.write_resolved(out, "eval")?;
    Ok(records)
}

type ScoreContext<'a> = (
    &'a dyn LanguageEncoder,
    bool,
    &'a BTreeMap<PreferenceWeights, Vec<Utterance>>,
    &'a TrajectoryBank,
    EvalSettings,
    u64,
    &'a str,
    usize,
);

fn score<F: Scalar>(checkpoint: &Checkpoint, ctx: ScoreContext<'_>) -> Result<Vec<EvalRecord>, CliError> {
    let (enc, explicit, users, bank, settings, seed, method, demos) = ctx;
    let model = checkpoint.model::<F>()?;
    Ok(evaluate_model(
        &model, enc, explicit, users, bank, settings, seed, method, demos,
    )?)
}

/// Merges the evaluation records of several runs into one report.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<Vec<EvalRecord>, CliError> {
    let mut records = Vec::new();
    for dir in inputs {
        let path = dir.join(EVAL_RECORDS);
        if !path.exists() {
            return Err(CliError::NoRecords(dir.clone()));
        }
        records.extend(read_records(&path)?);
    }
    if records.is_empty() {
        return Err(CliError::NoRecords(out.to_path_buf()));
    }
    write_reports(out, &records)?;
    Ok(records)
}
