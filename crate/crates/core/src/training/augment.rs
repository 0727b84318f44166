//! Mask annotation and disambiguation-based augmentation of a dataset.

use serde::{Deserialize, Serialize};

use crate::llm::{Annotator, LlmError};
use crate::types::AnnotatedExample;
use crate::world::TrajectoryBank;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    /// Ambiguous examples that received at least one clarification.
    pub clarified: usize,
    /// Ambiguous examples kept as-is because disambiguation failed.
    pub failed: usize,
    /// Extra rows created by multi-candidate clarifications.
    pub added: usize,
    /// Fraction of ambiguous examples whose candidates include the hidden
    /// preference's clear instruction.
    pub accuracy: f64,
}

/// Predicts a mask for every example from its current instruction text.
pub fn annotate_masks(examples: &mut [AnnotatedExample], annotator: &Annotator) -> Result<(), LlmError> {
    for e in examples {
        let mask = annotator.predict_mask(&e.instruction.text)?;
        e.flags.degenerate_mask = mask.is_degenerate();
        e.mask = Some(mask);
    }
    Ok(())
}

fn error_is_example_local(e: &LlmError) -> bool {
    matches!(
        e,
        LlmError::Parse { .. } | LlmError::MismatchedReference | LlmError::BadInstruction(_)
    )
}

/// Replaces each ambiguous example with one example per clarified reading,
/// each masked from its clarified text.
///
/// An example whose disambiguation fails is kept with its ambiguous text,
/// masked from that text and flagged. Clear examples pass through untouched.
/// Transport failures abort the whole pass.
pub fn augment_with_disambiguations(
    examples: Vec<AnnotatedExample>,
    bank: &TrajectoryBank,
    annotator: &Annotator,
    round: u32,
) -> Result<(Vec<AnnotatedExample>, AugmentReport), LlmError> {
    let mut report = AugmentReport::default();
    let mut hits = 0usize;
    let mut ambiguous = 0usize;
    let mut out = Vec::with_capacity(examples.len());
    for e in examples {
        if !e.instruction.ambiguity.is_ambiguous() {
            out.push(e);
            continue;
        }
        ambiguous += 1;
        let candidates = match bank.pair(e.config_id, e.pair_id) {
            Some(group) => annotator.disambiguate(&e.instruction.text, &e.trajectory, group.reference(), round),
            None => Err(LlmError::MismatchedReference),
        };
        match candidates {
            Ok(list) => {
                report.clarified += 1;
                report.added += list.len() - 1;
                let truth = e.preference.canonical();
                hits += list.iter().any(|c| c.canonical.as_ref() == Some(&truth)) as usize;
                for instruction in list {
                    let mask = annotator.predict_mask(&instruction.text)?;
                    let mut row = e.clone();
                    row.flags.source_text = Some(e.instruction.text.clone());
                    row.flags.disambiguation_failed = false;
                    row.flags.degenerate_mask = mask.is_degenerate();
                    row.mask = Some(mask);
                    row.instruction = instruction;
                    out.push(row);
                }
            }
            Err(err) if error_is_example_local(&err) => {
                log::warn!("demo {}: keeping ambiguous instruction: {err}", e.demo_id);
                report.failed += 1;
                let mask = annotator.predict_mask(&e.instruction.text)?;
                let mut row = e;
                row.flags.disambiguation_failed = true;
                row.flags.degenerate_mask = mask.is_degenerate();
                row.mask = Some(mask);
                out.push(row);
            }
            Err(err) => return Err(err),
        }
    }
    report.accuracy = if ambiguous == 0 {
        1.0
    } else {
        hits as f64 / ambiguous as f64
    };
    Ok((out, report))
}

/// Runs `rounds` independent disambiguation rounds and keeps the one with
/// the highest accuracy against the hidden preferences. Ties go to the
/// earliest round.
pub fn augment_best_of_rounds(
    examples: &[AnnotatedExample],
    bank: &TrajectoryBank,
    annotator: &Annotator,
    rounds: u32,
) -> Result<(Vec<AnnotatedExample>, AugmentReport, u32), LlmError> {
    let mut best: Option<(Vec<AnnotatedExample>, AugmentReport, u32)> = None;
    for round in 0..rounds.max(1) {
        let (rows, report) = augment_with_disambiguations(examples.to_vec(), bank, annotator, round)?;
        if best.as_ref().is_none_or(|(_, b, _)| report.accuracy > b.accuracy) {
            best = Some((rows, report, round));
        }
    }
    Ok(best.expect("at least one round"))
}
