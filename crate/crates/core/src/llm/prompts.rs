//! The two prompt families and the textual trajectory format.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::state::{DIM_NAMES, STATE_DIM, TRAJECTORY_LEN};
use crate::types::Trajectory;

pub const MASK_SYSTEM: &str = include_str!("../../prompts/mask_system.txt");
pub const MASK_USER: &str = include_str!("../../prompts/mask_user.txt");
pub const DISAMBIGUATION_SYSTEM: &str = include_str!("../../prompts/disambiguation_system.txt");
pub const DISAMBIGUATION_USER: &str = include_str!("../../prompts/disambiguation_user.txt");

/// Prefix of the line carrying the instruction in a mask prompt.
pub(crate) const MASK_INSTRUCTION_PREFIX: &str = "Language Instruction: ";
/// Delimiters around the instruction in a disambiguation prompt.
pub(crate) const COMMAND_PREFIX: &str = "- Language Command: ";
pub(crate) const COMMAND_SUFFIX: &str = " — user's explanation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFamily {
    Mask,
    Disambiguation,
}

impl PromptFamily {
    pub fn name(self) -> &'static str {
        match self {
            PromptFamily::Mask => "mask",
            PromptFamily::Disambiguation => "disambiguation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub family: PromptFamily,
    pub system: String,
    pub user: String,
}

/// Replaces `[key]` tokens in one left-to-right pass. Substituted text is
/// never rescanned, so values may contain bracketed words.
pub fn substitute(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(open) = rest.find('[') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (key, value) in values {
            let token_len = key.len() + 2;
            if tail.len() >= token_len && tail.as_bytes()[token_len - 1] == b']' && &tail[1..token_len - 1] == *key {
                out.push_str(value);
                rest = &tail[token_len..];
                continue 'scan;
            }
        }
        out.push('[');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

fn fmt3(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".to_string()
    } else {
        s
    }
}

/// Header of column names followed by one line per timestep, values at
/// three decimals separated by single spaces.
pub fn render_trajectory_text(trajectory: &Trajectory) -> String {
    let mut out = DIM_NAMES.join(" ");
    for s in trajectory.states() {
        out.push('\n');
        let row: Vec<String> = s.0.iter().map(|&v| fmt3(v)).collect();
        let _ = write!(out, "{}", row.join(" "));
    }
    out
}

/// Reads the first trajectory matrix embedded in `text`.
pub fn parse_trajectory_text(text: &str) -> Option<Vec<[f64; STATE_DIM]>> {
    let header = DIM_NAMES.join(" ");
    let mut lines = text.lines().skip_while(|l| l.trim() != header);
    lines.next()?;
    let mut rows = Vec::with_capacity(TRAJECTORY_LEN);
    for line in lines.take(TRAJECTORY_LEN) {
        let values: Vec<f64> = line.split_whitespace().map(str::parse).collect::<Result<_, _>>().ok()?;
        rows.push(values.try_into().ok()?);
    }
    (rows.len() == TRAJECTORY_LEN).then_some(rows)
}

pub fn build_mask_prompt(instruction: &str) -> Result<Prompt, LlmError> {
    check_instruction(instruction)?;
    Ok(Prompt {
        family: PromptFamily::Mask,
        system: MASK_SYSTEM.to_string(),
        user: substitute(MASK_USER, &[("instruction", instruction)]),
    })
}

pub fn build_disambiguation_prompt(
    instruction: &str,
    demo: &Trajectory,
    reference: &Trajectory,
) -> Result<Prompt, LlmError> {
    check_instruction(instruction)?;
    if demo.start() != reference.start() || demo.goal() != reference.goal() || demo.config() != reference.config() {
        return Err(LlmError::MismatchedReference);
    }
    let block = |t: &Trajectory| format!("\n{}\n", render_trajectory_text(t));
    Ok(Prompt {
        family: PromptFamily::Disambiguation,
        system: substitute(DISAMBIGUATION_SYSTEM, &[("ref_desc", &block(reference))]),
        user: substitute(
            DISAMBIGUATION_USER,
            &[("demo_desc", &block(demo)), ("instruction", instruction)],
        ),
    })
}

fn check_instruction(instruction: &str) -> Result<(), LlmError> {
    if instruction.trim().is_empty() || instruction.contains('\n') {
        return Err(LlmError::BadInstruction(instruction.to_string()));
    }
    Ok(())
}

/// Instruction text from a rendered mask prompt.
pub(crate) fn mask_prompt_instruction(user: &str) -> Option<&str> {
    user.lines().find_map(|l| l.strip_prefix(MASK_INSTRUCTION_PREFIX))
}

/// Instruction text from a rendered disambiguation prompt.
pub(crate) fn disambiguation_prompt_instruction(user: &str) -> Option<&str> {
    user.lines()
        .find_map(|l| l.strip_prefix(COMMAND_PREFIX))
        .and_then(|l| l.rsplit_once(COMMAND_SUFFIX).map(|(ins, _)| ins))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{build_bank, PerturbationSpec, SceneLayout, Split};

    #[test]
    fn substitution_is_single_pass() {
        let out = substitute("a [x] b [y] [z]", &[("x", "[y]"), ("y", "Y")]);
        assert_eq!(out, "a [y] b Y [z]");
        assert_eq!(substitute("[", &[("x", "1")]), "[");
        assert_eq!(substitute("[x", &[("x", "1")]), "[x");
    }

    #[test]
    fn mask_prompt_substitutes_instruction() {
        let p = build_mask_prompt("Stay away from the laptop").unwrap();
        assert!(!p.user.contains("[instruction]"));
        assert!(p.user.contains("Stay away from the laptop"));
        for key in ["eef_pos", "eef_rot", "human", "laptop", "table"] {
            assert!(p.user.contains(&format!("\"{key}\"")), "{key}");
        }
        assert_eq!(mask_prompt_instruction(&p.user), Some("Stay away from the laptop"));
        let q = build_mask_prompt("Keep the mug upright").unwrap();
        assert_eq!(p.system, q.system);
        let diff: Vec<_> = p.user.lines().zip(q.user.lines()).filter(|(a, b)| a != b).collect();
        assert_eq!(diff.len(), 1);
        assert!(build_mask_prompt("  ").is_err());
    }

    #[test]
    fn trajectory_text_round_trips_at_three_decimals() {
        let bank = build_bank(
            1,
            1,
            1,
            &PerturbationSpec::default(),
            &SceneLayout::default(),
            2,
            Split::Train,
        )
        .unwrap();
        let t = &bank.groups[0].pairs[0].trajectories[1];
        let text = render_trajectory_text(t);
        assert_eq!(text.lines().count(), TRAJECTORY_LEN + 1);
        assert!(!text.contains("-0.000"));
        let rows = parse_trajectory_text(&text).unwrap();
        for (row, s) in rows.iter().zip(t.states()) {
            for (a, b) in row.iter().zip(&s.0) {
                assert!((a - b).abs() <= 5e-4 + 1e-12);
            }
        }
    }

    #[test]
    fn disambiguation_prompt_fills_every_placeholder() {
        let bank = build_bank(
            1,
            2,
            1,
            &PerturbationSpec::default(),
            &SceneLayout::default(),
            2,
            Split::Train,
        )
        .unwrap();
        let g = &bank.groups[0].pairs[0];
        let p = build_disambiguation_prompt("Stay away", &g.trajectories[1], g.reference()).unwrap();
        for ph in ["[ref_desc]", "[demo_desc]", "[instruction]"] {
            assert!(!p.system.contains(ph) && !p.user.contains(ph), "{ph}");
        }
        assert!(p.user.contains("AT MOST ONE"));
        assert!(p.user.contains("JSON list of 1–2 disambiguated commands"));
        assert_eq!(disambiguation_prompt_instruction(&p.user), Some("Stay away"));
        assert!(parse_trajectory_text(&p.system).is_some());
        let other = &bank.groups[0].pairs[1];
        assert!(matches!(
            build_disambiguation_prompt("Stay away", &g.trajectories[1], other.reference()),
            Err(LlmError::MismatchedReference)
        ));
    }
}
