use mirl_core::dataset::{build_examples, DemoSpec, InstructionStyle, PreferencePool};
use mirl_core::llm::{closeness_deltas, AnnotationCache, Annotator, AnnotatorConfig, LlmError, MockAnnotator};
use mirl_core::preferences::{oracle_mask, spec};
use mirl_core::training::{annotate_masks, augment_best_of_rounds, augment_with_disambiguations};
use mirl_core::types::{Ambiguity, FeatureId, PreferenceWeights, Sign, Trajectory};
use mirl_core::world::{build_bank, PerturbationSpec, SceneLayout, Split, TrajectoryBank};

fn bank() -> TrajectoryBank {
    build_bank(
        4,
        3,
        5,
        &PerturbationSpec::default(),
        &SceneLayout::default(),
        21,
        Split::Train,
    )
    .unwrap()
}

/// Large enough that every delta pattern the tests look for occurs.
fn big_bank() -> TrajectoryBank {
    build_bank(
        20,
        10,
        5,
        &PerturbationSpec::default(),
        &SceneLayout::default(),
        21,
        Split::Train,
    )
    .unwrap()
}

/// First perturbed trajectory whose closeness deltas against its reference
/// satisfy `keep`, with its reference.
fn find_demo(bank: &TrajectoryBank, keep: impl Fn(&[f64; 3]) -> bool) -> (&Trajectory, &Trajectory) {
    bank.pair_groups()
        .flat_map(|(_, g)| g.perturbed().iter().map(move |t| (t, g.reference())))
        .find(|(t, r)| keep(&closeness_deltas(t.states(), r.states())))
        .expect("bank contains a suitable demonstration")
}

fn texts(list: &[mirl_core::Instruction]) -> Vec<&str> {
    list.iter().map(|i| i.text.as_str()).collect()
}

#[test]
fn stay_away_from_laptop_only() {
    let bank = big_bank();
    // Laptop closeness clearly drops; table and human do not drop past the threshold.
    let (demo, reference) = find_demo(&bank, |d| d[2] < -0.06 && d[0] > -0.04 && d[1] > -0.04);
    let cache = AnnotationCache::in_memory();
    let mock = MockAnnotator::exact();
    let a = Annotator::new(&mock, &cache, AnnotatorConfig::default());
    let out = a.disambiguate("Stay away", demo, reference, 0).unwrap();
    assert_eq!(texts(&out), ["Stay away from the laptop"]);
    assert_eq!(out[0].ambiguity, Ambiguity::Disambiguated);
    assert_eq!(
        out[0].canonical.as_ref().unwrap(),
        &PreferenceWeights::single(FeatureId::Laptop, Sign::Negative).canonical()
    );
}

#[test]
fn stay_away_from_two_objects() {
    let bank = big_bank();
    let two =
        |d: &[f64; 3]| d.iter().filter(|x| **x < -0.052).count() == 2 && d.iter().all(|x| *x < -0.052 || *x > -0.048);
    let (demo, reference) = find_demo(&bank, two);
    let deltas = closeness_deltas(demo.states(), reference.states());
    let mut expected: Vec<&str> = FeatureId::OBJECTS
        .iter()
        .zip(deltas)
        .filter(|(_, d)| *d < -0.052)
        .map(|(f, _)| spec(*f).template(Sign::Negative))
        .collect();
    let cache = AnnotationCache::in_memory();
    let mock = MockAnnotator::exact();
    let a = Annotator::new(&mock, &cache, AnnotatorConfig::default());
    let out = a.disambiguate("Stay away", demo, reference, 0).unwrap();
    let mut got = texts(&out);
    got.sort();
    expected.sort();
    assert_eq!(got, expected);
}

#[test]
fn identical_demo_and_reference_is_an_error() {
    let bank = bank();
    let reference = bank.pair(0, 0).unwrap().reference();
    let cache = AnnotationCache::in_memory();
    let mock = MockAnnotator::exact();
    let a = Annotator::new(&mock, &cache, AnnotatorConfig::default());
    let err = a.disambiguate("Stay away", reference, reference, 0).unwrap_err();
    assert!(matches!(err, LlmError::Parse { .. }), "{err}");
}

#[test]
fn mismatched_reference_is_rejected() {
    let bank = bank();
    let a_ref = bank.pair(0, 0).unwrap().reference();
    let b_ref = bank.pair(1, 0).unwrap().reference();
    let cache = AnnotationCache::in_memory();
    let mock = MockAnnotator::exact();
    let a = Annotator::new(&mock, &cache, AnnotatorConfig::default());
    assert!(matches!(
        a.disambiguate("Stay away", a_ref, b_ref, 0),
        Err(LlmError::MismatchedReference)
    ));
}

#[test]
fn clear_dataset_gets_oracle_masks_from_exact_mock() {
    let bank = bank();
    let spec = DemoSpec {
        demos_per_preference: 3,
        style: InstructionStyle::Clear,
        ..DemoSpec::default()
    };
    let mut examples = build_examples(&PreferencePool::All.members()[..40], &bank, &spec, 2).unwrap();
    let cache = AnnotationCache::in_memory();
    let mock = MockAnnotator::exact();
    annotate_masks(
        &mut examples,
        &Annotator::new(&mock, &cache, AnnotatorConfig::default()),
    )
    .unwrap();
    for e in &examples {
        assert_eq!(e.mask.as_ref().unwrap().bits(), oracle_mask(&e.preference).bits());
    }
}

#[test]
fn augmentation_semantics() {
    let bank = bank();
    let spec = DemoSpec {
        demos_per_preference: 12,
        style: InstructionStyle::ReferentOmitted,
        ..DemoSpec::default()
    };
    let examples = build_examples(&PreferencePool::SingleObject.members(), &bank, &spec, 5).unwrap();
    let cache = AnnotationCache::in_memory();

    let exact = MockAnnotator::exact();
    let a = Annotator::new(&exact, &cache, AnnotatorConfig::default());
    let (rows, report) = augment_with_disambiguations(examples.clone(), &bank, &a, 0).unwrap();
    assert_eq!(report.clarified + report.failed, examples.len());
    assert_eq!(rows.len(), examples.len() + report.added);
    for r in &rows {
        if r.flags.disambiguation_failed {
            assert_eq!(r.instruction.ambiguity, Ambiguity::ReferentOmitted);
        } else {
            assert_eq!(r.instruction.ambiguity, Ambiguity::Disambiguated);
            let source = &examples[r.demo_id].instruction.text;
            assert_eq!(r.flags.source_text.as_ref(), Some(source));
        }
        assert!(r.mask.is_some());
    }
    // Single-candidate rows keep the row count; multi-candidate rows add one each.
    let multi = rows
        .iter()
        .filter(|r| rows.iter().filter(|o| o.demo_id == r.demo_id).count() == 2)
        .count();
    assert_eq!(multi, 2 * report.added);

    let never = MockAnnotator::new(0.0, 1.0, 0);
    let a = Annotator::new(
        &never,
        &cache,
        AnnotatorConfig {
            mask_model: "m2".into(),
            disambiguation_model: "d2".into(),
            ..AnnotatorConfig::default()
        },
    );
    let single = find_single_candidate(&bank, &examples);
    let (rows, report) = augment_with_disambiguations(single.clone(), &bank, &a, 0).unwrap();
    assert_eq!(rows.len(), single.len());
    assert_eq!(report.failed, single.len());
    assert!(rows
        .iter()
        .zip(&single)
        .all(|(r, e)| r.instruction == e.instruction && r.flags.disambiguation_failed));
}

/// Examples whose exact-mock disambiguation has exactly one candidate, so a
/// miss empties the list.
fn find_single_candidate(
    bank: &TrajectoryBank,
    examples: &[mirl_core::AnnotatedExample],
) -> Vec<mirl_core::AnnotatedExample> {
    let cache = AnnotationCache::in_memory();
    let exact = MockAnnotator::exact();
    let a = Annotator::new(&exact, &cache, AnnotatorConfig::default());
    let out: Vec<_> = examples
        .iter()
        .filter(|e| {
            let r = bank.pair(e.config_id, e.pair_id).unwrap().reference();
            matches!(a.disambiguate(&e.instruction.text, &e.trajectory, r, 0), Ok(l) if l.len() == 1)
        })
        .cloned()
        .collect();
    assert!(!out.is_empty());
    out
}

#[test]
fn best_round_is_at_least_round_zero() {
    let bank = bank();
    let spec = DemoSpec {
        demos_per_preference: 6,
        style: InstructionStyle::ExpressionOmitted,
        ..DemoSpec::default()
    };
    let examples = build_examples(&PreferencePool::SingleObject.members(), &bank, &spec, 8).unwrap();
    let cache = AnnotationCache::in_memory();
    let mock = MockAnnotator::new(0.0, 0.5, 3);
    let a = Annotator::new(&mock, &cache, AnnotatorConfig::default());
    let (_, first) = augment_with_disambiguations(examples.clone(), &bank, &a, 0).unwrap();
    let (_, best, round) = augment_best_of_rounds(&examples, &bank, &a, 5).unwrap();
    assert!(best.accuracy >= first.accuracy);
    assert!(round < 5);
}
