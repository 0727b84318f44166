//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines reach the terminal
//! uncaptured. `MIRL_ACCEPT=4,8` restricts the run to those criteria.
//! Exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use mirl_cli::experiment::{evaluate_gt_stub, evaluate_model, utterances, EvalSettings};
use mirl_core::dataset::{
    attach_oracle_masks, build_examples, sample_preference_split, DemoSpec, InstructionStyle, PreferencePool,
};
use mirl_core::evaluation::{
    bank_states, mask_metrics, regret, regret_over, reward_variance, win_rate, EvalRecord, GtReward, NegGtReward,
    RandomReward,
};
use mirl_core::llm::{
    closeness_deltas, AnnotationCache, Annotator, AnnotatorConfig, MockAnnotator, DISCRIMINATIVE_THRESHOLD,
};
use mirl_core::preferences::{classify_density, enumerate_preferences, oracle_mask, single_object_feature, Density};
use mirl_core::reward_model::{HashEncoder, ModelShape, RewardModel};
use mirl_core::seed::rng_for;
use mirl_core::state::{pack_state, IDENTITY_ROTATION};
use mirl_core::training::{
    annotate_masks, augment_best_of_rounds, augment_with_disambiguations, check_gradients, irl_loss, masking_loss,
    masking_loss_with, total_loss, train, BatchItem, EmbeddingTable, Mode, Objective, TrainConfig,
};
use mirl_core::types::{
    AnnotatedExample, EnvironmentConfig, FeatureId, MaskProvenance, PreferenceWeights, Sign, StateMask, Trajectory,
    WORKSPACE,
};
use mirl_core::world::{build_bank, PerturbationSpec, SceneLayout, Split, TrajectoryBank};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn desk_bank(seed: u64, split: Split) -> TrajectoryBank {
    build_bank(
        4,
        3,
        5,
        &PerturbationSpec::default(),
        &SceneLayout::default(),
        seed,
        split,
    )
    .unwrap()
}

fn averages(records: &[EvalRecord]) -> [f64; 3] {
    let n = records.len() as f64;
    records.iter().fold([0.0; 3], |a, r| {
        [a[0] + r.win_rate / n, a[1] + r.reward_variance / n, a[2] + r.regret / n]
    })
}

fn tiny_fixture() -> (TrajectoryBank, [StateMask; 2]) {
    let bank = build_bank(
        1,
        2,
        3,
        &PerturbationSpec::default(),
        &SceneLayout::default(),
        11,
        Split::Train,
    )
    .unwrap();
    let masks = [
        oracle_mask(&PreferenceWeights::single(FeatureId::Laptop, Sign::Negative)),
        oracle_mask(&PreferenceWeights::new([1, 0, 0, 0, 1]).unwrap()),
    ];
    (bank, masks)
}

fn tiny_items<'a>(bank: &'a TrajectoryBank, masks: &'a [StateMask; 2], n: usize) -> Vec<BatchItem<'a>> {
    let texts = [
        "Stay away from the laptop",
        "Stay close to the table. Keep the mug upright",
    ];
    (0..2)
        .map(|i| BatchItem {
            instruction: texts[i],
            mask: Some(&masks[i]),
            candidates: bank.groups[0].pairs[i].trajectories[1..1 + n].iter().collect(),
        })
        .collect()
}

fn tiny_shape() -> ModelShape {
    ModelShape {
        embed_dim: 8,
        film_hidden: 4,
        hidden: [4, 8, 4],
    }
}

fn c1_gradients() -> Outcome {
    let (bank, masks) = tiny_fixture();
    let items = tiny_items(&bank, &masks, 2);
    let enc = HashEncoder::new(8);
    let table = EmbeddingTable::<f64>::build(&enc, items.iter().map(|i| i.instruction)).unwrap();
    let model = RewardModel::<f64>::init(tiny_shape(), 5);
    let rng = rng_for(3, &[]);
    let mut worst = 0.0f64;
    for (mode, lambda) in [(Mode::MaskedIrl, 10.0), (Mode::ExplicitMask, 10.0), (Mode::LcRl, 0.0)] {
        let report = check_gradients(&model, &table, &items, &Objective::new(mode, lambda), &rng, 1e-5, 1e-6).unwrap();
        worst = worst.max(report.max_rel_error());
    }
    // Masking term alone: singleton candidates zero the IRL term.
    let single = tiny_items(&bank, &masks, 1);
    let model0 = RewardModel::<f64>::init(tiny_shape(), 0);
    let report = check_gradients(
        &model0,
        &table,
        &single,
        &Objective::new(Mode::MaskedIrl, 1.0),
        &rng_for(4, &[]),
        1e-5,
        1e-6,
    )
    .unwrap();
    worst = worst.max(report.max_rel_error());
    outcome(worst <= 1e-4, format!("max relative error {worst:.2e} (≤ 1e-4)"))
}

fn c2_identities() -> Outcome {
    let (bank, masks) = tiny_fixture();
    let enc = HashEncoder::new(8);
    let model = RewardModel::<f64>::init(tiny_shape(), 1);
    let singleton = irl_loss(&model, &enc, &tiny_items(&bank, &masks, 1)).unwrap();
    let mut doubled = tiny_items(&bank, &masks, 1);
    for it in &mut doubled {
        let demo = it.candidates[0];
        it.candidates.push(demo);
    }
    let ln2 = irl_loss(&model, &enc, &doubled).unwrap();
    let ones = StateMask::all_ones(MaskProvenance::Oracle);
    let mut all_ones = tiny_items(&bank, &masks, 2);
    for it in &mut all_ones {
        it.mask = Some(&ones);
    }
    let ones_loss = masking_loss(&model, &enc, &all_ones, &mut rng_for(0, &[])).unwrap();
    let items = tiny_items(&bank, &masks, 3);
    let masked = total_loss(
        &model,
        &enc,
        &items,
        &Objective::new(Mode::MaskedIrl, 0.0),
        &mut rng_for(1, &[]),
    )
    .unwrap();
    let lc = total_loss(
        &model,
        &enc,
        &items,
        &Objective::new(Mode::LcRl, 0.0),
        &mut rng_for(1, &[]),
    )
    .unwrap();
    let gap = (masked.total - lc.total).abs();
    let ln2_err = (ln2 - std::f64::consts::LN_2).abs();
    outcome(
        singleton == 0.0 && ln2_err <= 1e-9 && ones_loss == 0.0 && gap <= 1e-12,
        format!("singleton {singleton}, |two-equal − ln2| {ln2_err:.1e}, all-ones mask {ones_loss}, |λ=0 − lc_rl| {gap:.1e}"),
    )
}

fn c3_monte_carlo() -> Outcome {
    let (bank, _) = tiny_fixture();
    let j = 4;
    let mask = StateMask::from_indices((0..19).filter(|&d| d != j), MaskProvenance::Oracle);
    let items = [BatchItem {
        instruction: "probe",
        mask: Some(&mask),
        candidates: vec![&bank.groups[0].pairs[0].trajectories[1]],
    }];
    // 21 states per draw, so ⌈10⁵/21⌉ draws give at least 10⁵ samples.
    let draws = 100_000usize.div_ceil(21);
    let v = masking_loss_with(
        |s, _| s.iter().map(|x| x.0[j]).collect(),
        &items,
        draws,
        &mut rng_for(42, &[]),
    )
    .unwrap();
    outcome(
        (0.48..=0.52).contains(&v),
        format!("E|ε| ≈ {v:.4} over {} draws (in [0.48, 0.52])", draws * 21),
    )
}

/// Per-seed (masked, lc_rl, gt) metric means for criteria 4 to 6.
struct SparseRuns {
    masked: Vec<[f64; 3]>,
    lc: Vec<[f64; 3]>,
    gt_regret: Vec<f64>,
    seconds: f64,
}

fn sparse_runs() -> SparseRuns {
    let started = Instant::now();
    let enc = HashEncoder::new(512);
    let settings = EvalSettings::default();
    let mut runs = SparseRuns {
        masked: Vec::new(),
        lc: Vec::new(),
        gt_regret: Vec::new(),
        seconds: 0.0,
    };
    for seed in SEEDS {
        let train_bank = desk_bank(seed, Split::Train);
        let test_bank = desk_bank(seed, Split::Test);
        let (prefs, _) = sample_preference_split(PreferencePool::Sparse, 6, 0, seed).unwrap();
        let mut ex = build_examples(&prefs, &train_bank, &DemoSpec::default(), seed).unwrap();
        attach_oracle_masks(&mut ex);
        let users = utterances(&ex);
        for mode in [Mode::MaskedIrl, Mode::LcRl] {
            let cfg = TrainConfig {
                mode,
                seed,
                ..TrainConfig::default()
            };
            let (model, _) = train::<f32>(&ex, &train_bank, &enc, &cfg).unwrap();
            let records =
                evaluate_model(&model, &enc, false, &users, &test_bank, settings, seed, mode.name(), 10).unwrap();
            let m = averages(&records);
            println!(
                "    seed {seed} {:<10} win {:.3} variance {:.5} regret {:.3}",
                mode.name(),
                m[0],
                m[1],
                m[2]
            );
            match mode {
                Mode::MaskedIrl => runs.masked.push(m),
                _ => runs.lc.push(m),
            }
        }
        let gt = evaluate_gt_stub(prefs.iter().copied(), &test_bank, settings, seed, 10).unwrap();
        runs.gt_regret.push(gt.iter().map(|r| r.regret).fold(0.0, f64::max));
    }
    runs.seconds = started.elapsed().as_secs_f64();
    runs
}

fn count(runs: &SparseRuns, better: impl Fn(&[f64; 3], &[f64; 3]) -> bool) -> usize {
    runs.masked.iter().zip(&runs.lc).filter(|(m, l)| better(m, l)).count()
}

fn c4_variance(runs: &SparseRuns) -> Outcome {
    let n = count(runs, |m, l| m[1] < l[1]);
    outcome(
        n >= 4 && runs.seconds < 900.0,
        format!(
            "masked variance < lc_rl in {n}/5 seeds (need ≥ 4); 10 runs took {:.0} s (< 900)",
            runs.seconds
        ),
    )
}

fn c5_win_rate(runs: &SparseRuns) -> Outcome {
    let above = runs.masked.iter().filter(|m| m[0] > 0.5).count();
    let n = count(runs, |m, l| m[0] >= l[0]);
    outcome(
        above == 5 && n >= 4,
        format!("masked win > 0.5 in {above}/5 seeds (need 5), ≥ lc_rl in {n}/5 (need ≥ 4)"),
    )
}

fn c6_regret(runs: &SparseRuns) -> Outcome {
    let n = count(runs, |m, l| m[2] <= l[2]);
    let gt = runs.gt_regret.iter().copied().fold(0.0, f64::max);
    outcome(
        n >= 4 && gt == 0.0,
        format!("masked regret ≤ lc_rl in {n}/5 seeds (need ≥ 4); gt stub max regret {gt}"),
    )
}

/// The demo contrasts its hidden feature with the reference in the hidden
/// direction by at least the threshold, more strongly than any other object
/// feature moving the same way.
fn discriminative(e: &AnnotatedExample, bank: &TrajectoryBank) -> bool {
    let Some((feature, sign)) = single_object_feature(&e.preference) else {
        return false;
    };
    let reference = bank.pair(e.config_id, e.pair_id).unwrap().reference();
    let d = closeness_deltas(e.trajectory.states(), reference.states());
    let k = FeatureId::OBJECTS.iter().position(|&f| f == feature).unwrap();
    let signed = |x: f64| x * sign.value() as f64;
    signed(d[k]) >= DISCRIMINATIVE_THRESHOLD && (0..3).all(|i| i == k || signed(d[i]) < signed(d[k]))
}

fn c7_mock_exact() -> Outcome {
    let started = Instant::now();
    let bank = build_bank(
        20,
        10,
        5,
        &PerturbationSpec::default(),
        &SceneLayout::default(),
        7,
        Split::Train,
    )
    .unwrap();
    let cache = AnnotationCache::in_memory();
    let mock = MockAnnotator::exact();
    let annotator = Annotator::new(&mock, &cache, AnnotatorConfig::default());

    let clear_spec = DemoSpec {
        demos_per_preference: 2,
        ..DemoSpec::default()
    };
    let mut clear = build_examples(&enumerate_preferences(), &bank, &clear_spec, 7).unwrap();
    annotate_masks(&mut clear, &annotator).unwrap();
    let predicted: Vec<StateMask> = clear.iter().map(|e| e.mask.unwrap()).collect();
    let oracle: Vec<StateMask> = clear.iter().map(|e| oracle_mask(&e.preference)).collect();
    let f1 = mask_metrics(&predicted, &oracle).unwrap().f1;

    let mut detail = format!("clear mask F1 {f1} over {} rows", clear.len());
    let mut pass = f1 == 1.0;
    for style in [InstructionStyle::ReferentOmitted, InstructionStyle::ExpressionOmitted] {
        let spec = DemoSpec {
            demos_per_preference: 30,
            style,
            ..DemoSpec::default()
        };
        let all = build_examples(&PreferencePool::SingleObject.members(), &bank, &spec, 7).unwrap();
        let kept: Vec<AnnotatedExample> = all.into_iter().filter(|e| discriminative(e, &bank)).collect();
        let (_, report) = augment_with_disambiguations(kept.clone(), &bank, &annotator, 0).unwrap();
        pass &= report.accuracy == 1.0 && !kept.is_empty();
        detail += &format!("; {style:?} accuracy {} over {} demos", report.accuracy, kept.len());
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(pass && secs < 120.0, format!("{detail}; {secs:.1} s (< 120)"))
}

fn c8_disambiguation() -> Outcome {
    let started = Instant::now();
    let enc = HashEncoder::new(512);
    let settings = EvalSettings::default();
    let spec = DemoSpec {
        style: InstructionStyle::Ambiguous,
        ..DemoSpec::default()
    };
    let mut wins = 0;
    for seed in SEEDS {
        let train_bank = desk_bank(seed, Split::Train);
        let test_bank = desk_bank(seed, Split::Test);
        let prefs = PreferencePool::SingleObject.members();
        let raw = build_examples(&prefs, &train_bank, &spec, seed).unwrap();
        let cache = AnnotationCache::in_memory();
        let mock = MockAnnotator::new(0.15, 0.0, seed);
        let annotator = Annotator::new(&mock, &cache, AnnotatorConfig::default());

        let mut ambiguous = raw.clone();
        annotate_masks(&mut ambiguous, &annotator).unwrap();
        let (clarified, report, _) = augment_best_of_rounds(&raw, &train_bank, &annotator, 5).unwrap();

        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let score = |ex: &[AnnotatedExample], label: &str| {
            let (model, _) = train::<f32>(ex, &train_bank, &enc, &cfg).unwrap();
            let users = utterances(ex);
            let r = evaluate_model(&model, &enc, false, &users, &test_bank, settings, seed, label, 10).unwrap();
            averages(&r)[0]
        };
        let ai = score(&ambiguous, "ambiguous");
        let di = score(&clarified, "disambiguated");
        println!(
            "    seed {seed} ambiguous win {ai:.3} disambiguated win {di:.3} (clarification accuracy {:.2})",
            report.accuracy
        );
        wins += (di >= ai) as usize;
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        wins >= 4,
        format!("disambiguated ≥ ambiguous in {wins}/5 seeds (need ≥ 4); {secs:.0} s"),
    )
}

fn evenly_spaced_group(k: usize) -> Vec<Trajectory> {
    let config = EnvironmentConfig {
        human: [1.0, 1.0, 0.0],
        laptop: [0.0, 0.0, 0.8],
        table_z: 0.8,
        bounds: WORKSPACE,
    };
    (0..k)
        .map(|i| {
            let s = pack_state(
                [0.2, 0.2, 0.8 + 0.1 * i as f64],
                IDENTITY_ROTATION,
                config.human,
                config.laptop,
                0.8,
            )
            .unwrap();
            Trajectory::new(vec![s; 21], config).unwrap()
        })
        .collect()
}

fn c9_metric_oracles() -> Outcome {
    let bank = build_bank(
        20,
        10,
        5,
        &PerturbationSpec::default(),
        &SceneLayout::default(),
        99,
        Split::Test,
    )
    .unwrap();
    let w = PreferenceWeights::new([1, 0, -1, 0, 1]).unwrap();
    let mut rng = rng_for(1, &[]);
    let gt = win_rate(&GtReward(w), &w, &bank, 1000, &mut rng).unwrap();
    let neg = win_rate(&NegGtReward(w), &w, &bank, 1000, &mut rng).unwrap();
    let random = win_rate(&RandomReward { seed: 5 }, &w, &bank, 1000, &mut rng).unwrap();
    let states = bank_states(&bank);
    let var = reward_variance(&GtReward(w), &w, &states, 5, &mut rng_for(3, &[]));
    let table = PreferenceWeights::single(FeatureId::Table, Sign::Positive);
    let group = evenly_spaced_group(5);
    let neg_regret = regret_over(&NegGtReward(table), &table, [group.as_slice()]).unwrap();
    let bank_regret = regret(&GtReward(w), &w, &bank).unwrap();
    outcome(
        gt == 1.0
            && neg == 0.0
            && (0.45..=0.55).contains(&random)
            && var == 0.0
            && neg_regret == 1.0
            && bank_regret == 0.0,
        format!(
            "win gt {gt}, −gt {neg}, random {random:.3}; variance gt {var}; regret −gt {neg_regret}, gt {bank_regret}"
        ),
    )
}

/// The `mirl` binary from the same target directory as this test, built on
/// demand when only this package was compiled.
fn mirl_binary() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let bin = profile_dir.join(format!("mirl{}", std::env::consts::EXE_SUFFIX));
    if !bin.exists() {
        let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
        let mut build = Command::new(cargo);
        build.args(["build", "-p", "mirl-cli", "--bin", "mirl"]);
        if profile_dir.ends_with("release") {
            build.arg("--release");
        }
        assert!(build.status().unwrap().success(), "building mirl failed");
    }
    bin
}

fn run_pipeline(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let bin = mirl_binary();
    let out = dir.to_str().unwrap();
    for (stage, extra) in [
        ("gen-data", vec![]),
        ("annotate", vec![]),
        ("train", vec!["--set", "train.epochs=40"]),
        ("eval", vec![]),
    ] {
        let status = Command::new(&bin)
            .args([
                stage,
                "--seed",
                "3",
                "--provider",
                "mock",
                "--set",
                "annotation.p_flip=0.1",
                "--out",
                out,
            ])
            .args(extra)
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success(), "{stage} failed");
    }
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && !p.ends_with("train_log.csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_pipeline(&tmp.path().join("a"));
    let b = run_pipeline(&tmp.path().join("b"));
    outcome(
        a == b && a.contains_key("report.csv"),
        format!("{} report CSVs compared, identical: {}", a.len(), a == b),
    )
}

fn c11_enumeration() -> Vec<(String, Outcome)> {
    let all = enumerate_preferences();
    let mut strata = BTreeMap::new();
    for w in &all {
        *strata.entry(classify_density(w).name()).or_insert(0usize) += 1;
    }
    let got = |d: Density| strata.get(d.name()).copied().unwrap_or(0);
    let (s, m, d) = (got(Density::Sparse), got(Density::Medium), got(Density::Dense));
    vec![
        (
            "11a".into(),
            outcome(all.len() == 242, format!("{} preferences (need 242)", all.len())),
        ),
        (
            "11b".into(),
            outcome(
                (s, m, d) == (90, 80, 72),
                format!("strata sparse {s}, medium {m}, dense {d} (need 90/80/72)"),
            ),
        ),
    ]
}

fn main() -> ExitCode {
    let only: Option<Vec<String>> = std::env::var("MIRL_ACCEPT")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == id));
    let mut results: Vec<(String, Outcome, f64)> = Vec::new();
    let mut run = |id: &str, f: &dyn Fn() -> Outcome| {
        if wanted(id) {
            let t = Instant::now();
            let o = f();
            let secs = t.elapsed().as_secs_f64();
            println!(
                "criterion {id}: {} ({secs:.1} s) {}",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            );
            results.push((id.to_string(), o, secs));
        }
    };
    run("1", &c1_gradients);
    run("2", &c2_identities);
    run("3", &c3_monte_carlo);
    if ["4", "5", "6"].iter().any(|id| wanted(id)) {
        let runs = sparse_runs();
        run("4", &|| c4_variance(&runs));
        run("5", &|| c5_win_rate(&runs));
        run("6", &|| c6_regret(&runs));
    }
    run("7", &c7_mock_exact);
    run("8", &c8_disambiguation);
    run("9", &c9_metric_oracles);
    run("10", &c10_determinism);
    if wanted("11") {
        for (id, o) in c11_enumeration() {
            println!("criterion {id}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((id, o, 0.0));
        }
    }
    println!("\nsummary:");
    for (id, o, _) in &results {
        println!("  {id:>3} {}", if o.pass { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|(_, o, _)| !o.pass).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
