//! Structured-output extraction from free-form model responses.

use serde_json::Value;
use thiserror::Error;

use crate::preferences::parse_instruction;
use crate::state::{StateBlock, STATE_DIM};
use crate::types::{Ambiguity, Instruction, MaskProvenance, StateMask};

/// Largest number of disambiguations kept from one response.
pub const MAX_DISAMBIGUATIONS: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseErrorKind {
    #[error("no JSON {0} found")]
    NoJson(&'static str),
    #[error("missing key {0:?}")]
    MissingKey(String),
    #[error("unexpected key {0:?}")]
    ExtraKey(String),
    #[error("{key:?} must have {expected} entries, got {got}")]
    Arity { key: String, expected: usize, got: usize },
    #[error("{key:?} entry {index} is not 0 or 1")]
    NonBinary { key: String, index: usize },
    #[error("entry {0} is not a string")]
    NonString(usize),
    #[error("empty disambiguation list")]
    Empty,
    #[error("no entry parses as a known instruction")]
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub raw: String,
}

fn fail<T>(kind: ParseErrorKind, raw: &str) -> Result<T, ParseError> {
    Err(ParseError {
        kind,
        raw: raw.to_string(),
    })
}

/// The last complete top-level JSON value opening with `open` (`{` or `[`).
pub fn last_json(text: &str, open: char) -> Option<Value> {
    let mut last = None;
    let mut from = 0;
    while let Some(rel) = text[from..].find(open) {
        let start = from + rel;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v)) => {
                last = Some(v);
                from = start + stream.byte_offset();
            }
            _ => from = start + open.len_utf8(),
        }
    }
    last
}

/// Concatenates the five binary arrays of the last JSON object into a mask.
pub fn parse_mask_response(text: &str) -> Result<StateMask, ParseError> {
    let Some(Value::Object(obj)) = last_json(text, '{') else {
        return fail(ParseErrorKind::NoJson("object"), text);
    };
    if let Some(extra) = obj
        .keys()
        .find(|k| !StateBlock::ALL.iter().any(|b| b.key() == k.as_str()))
    {
        return fail(ParseErrorKind::ExtraKey(extra.clone()), text);
    }
    let mut bits = [0u8; STATE_DIM];
    for block in StateBlock::ALL {
        let key = block.key();
        let range = block.range();
        let Some(value) = obj.get(key) else {
            return fail(ParseErrorKind::MissingKey(key.into()), text);
        };
        let entries = value.as_array().map(Vec::as_slice).unwrap_or_default();
        if !value.is_array() || entries.len() != range.len() {
            return fail(
                ParseErrorKind::Arity {
                    key: key.into(),
                    expected: range.len(),
                    got: entries.len(),
                },
                text,
            );
        }
        for (index, (e, dst)) in entries.iter().zip(&mut bits[range]).enumerate() {
            *dst = match e.as_f64() {
                Some(0.0) => 0,
                Some(1.0) => 1,
                _ => return fail(ParseErrorKind::NonBinary { key: key.into(), index }, text),
            };
        }
    }
    Ok(StateMask::new(bits, MaskProvenance::Llm).expect("bits are binary"))
}

/// Reads the last JSON array of strings as disambiguated instructions.
///
/// Entries outside the instruction grammar are dropped; more than
/// [`MAX_DISAMBIGUATIONS`] entries are truncated with a warning.
pub fn parse_disambiguation_response(text: &str) -> Result<Vec<Instruction>, ParseError> {
    let Some(Value::Array(items)) = last_json(text, '[') else {
        return fail(ParseErrorKind::NoJson("array"), text);
    };
    if items.is_empty() {
        return fail(ParseErrorKind::Empty, text);
    }
    let mut strings = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        match item.as_str() {
            Some(s) => strings.push(s),
            None => return fail(ParseErrorKind::NonString(i), text),
        }
    }
    if strings.len() > MAX_DISAMBIGUATIONS {
        log::warn!(
            "disambiguation returned {} commands; keeping the first {MAX_DISAMBIGUATIONS}",
            strings.len()
        );
        strings.truncate(MAX_DISAMBIGUATIONS);
    }
    let out: Vec<Instruction> = strings
        .into_iter()
        .filter_map(|s| {
            let canonical = parse_instruction(s);
            if canonical.is_empty() {
                log::warn!("dropping unparseable disambiguation {s:?}");
                return None;
            }
            Instruction::new(s, Ambiguity::Disambiguated, Some(canonical)).ok()
        })
        .collect();
    if out.is_empty() {
        return fail(ParseErrorKind::Unparseable, text);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{FeatureId, Sign};
    use proptest::prelude::*;

    const LAPTOP_JSON: &str =
        r#"{"eef_pos":[1,1,0],"eef_rot":[0,0,0,0,0,0,0,0,0],"human":[0,0,0],"laptop":[1,1,0],"table":[0]}"#;

    #[test]
    fn mask_concatenates_blocks() {
        let m = parse_mask_response(LAPTOP_JSON).unwrap();
        assert_eq!(m.relevant().collect::<Vec<_>>(), vec![0, 1, 15, 16]);
        assert_eq!(m.provenance, MaskProvenance::Llm);
    }

    #[test]
    fn mask_takes_last_object_after_prose() {
        let text = format!("The laptop matters {{not json}}.\n{{\"a\": 1}}\nFinal:\n{LAPTOP_JSON}\n");
        assert_eq!(parse_mask_response(&text).unwrap().count_ones(), 4);
    }

    #[test]
    fn all_zero_mask_is_accepted() {
        let text = r#"{"eef_pos":[0,0,0],"eef_rot":[0,0,0,0,0,0,0,0,0],"human":[0,0,0],"laptop":[0,0,0],"table":[0]}"#;
        assert!(parse_mask_response(text).unwrap().is_degenerate());
    }

    #[test]
    fn mask_errors() {
        let cases = [
            ("no json here", "NoJson"),
            (r#"{"eef_pos":[1,1,0]}"#, "MissingKey"),
            (
                &LAPTOP_JSON.replace("\"table\":[0]", "\"table\":[0],\"mug\":[1]"),
                "ExtraKey",
            ),
            (&LAPTOP_JSON.replace("\"table\":[0]", "\"table\":[0,1]"), "Arity"),
            (&LAPTOP_JSON.replace("\"table\":[0]", "\"table\":[2]"), "NonBinary"),
        ];
        for (text, kind) in cases {
            let err = parse_mask_response(text).unwrap_err();
            assert!(format!("{:?}", err.kind).starts_with(kind), "{text}: {err:?}");
            assert_eq!(err.raw, text);
        }
    }

    #[test]
    fn disambiguation_lists() {
        let one = parse_disambiguation_response(r#"["Stay away from the laptop"]"#).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].ambiguity, Ambiguity::Disambiguated);
        let c = one[0].canonical.as_ref().unwrap();
        assert!(c.0.contains(&(FeatureId::Laptop, Sign::Negative)));
        let two =
            parse_disambiguation_response(r#"Reasoning... ["Stay away from the table", "Stay away from the laptop"]"#)
                .unwrap();
        assert_eq!(two.len(), 2);
        let three = parse_disambiguation_response(
            r#"["Stay away from the table", "Stay away from the laptop", "Stay away from the human"]"#,
        )
        .unwrap();
        assert_eq!(three.len(), 2);
        assert_eq!(
            parse_disambiguation_response("[]").unwrap_err().kind,
            ParseErrorKind::Empty
        );
        assert!(parse_disambiguation_response("nothing").is_err());
        assert!(parse_disambiguation_response("[1]").is_err());
        assert_eq!(
            parse_disambiguation_response(r#"["do a barrel roll"]"#)
                .unwrap_err()
                .kind,
            ParseErrorKind::Unparseable
        );
    }

    proptest! {
        #[test]
        fn parsers_are_total(s in ".{0,200}") {
            let _ = parse_mask_response(&s);
            let _ = parse_disambiguation_response(&s);
        }

        #[test]
        fn parsers_are_total_on_jsonish(s in r#"[\[\]{}",:01a-z ]{0,80}"#) {
            let _ = parse_mask_response(&s);
            let _ = parse_disambiguation_response(&s);
        }
    }
}
