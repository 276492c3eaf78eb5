use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InvalidReason {
    Empty,
    UnbalancedParentheses,
    /// Ring-closure labels left open at the end of the string, ascending.
    UnpairedRingClosure { labels: Vec<u32> },
    MalformedBracketAtom { position: usize },
    UnknownCharacter { position: usize, character: char },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub valid: bool,
    pub reason: Option<InvalidReason>,
}

impl ValidityReport {
    fn ok() -> Self {
        Self { valid: true, reason: None }
    }

    fn fail(reason: InvalidReason) -> Self {
        Self { valid: false, reason: Some(reason) }
    }
}

fn bracket_atom() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^\[[0-9]*([A-Z][a-z]?|[a-z][a-z]?|\*)(@@?|@(TH|AL|SP|TB|OH)[0-9]+)?(H[0-9]*)?(\++[0-9]*|-+[0-9]*)?(:[0-9]+)?\]$",
        )
        .expect("bracket atom pattern compiles")
    })
}

/// Syntactic SMILES check: no valence or aromaticity perception.
pub fn validate_syntactic(s: &str) -> ValidityReport {
    if s.is_empty() {
        return ValidityReport::fail(InvalidReason::Empty);
    }
    let tokens = match tokenize(s) {
        Ok(t) => t,
        Err(e) if e.character == '[' => {
            return ValidityReport::fail(InvalidReason::MalformedBracketAtom { position: e.position })
        }
        Err(e) => {
            return ValidityReport::fail(InvalidReason::UnknownCharacter {
                position: e.position,
                character: e.character,
            })
        }
    };

    let mut depth = 0i64;
    let mut open_rings = BTreeSet::new();
    let mut pos = 0;
    for tok in tokens {
        match tok {
            "(" => depth += 1,
            ")" => {
                depth -= 1;
                if depth < 0 {
                    return ValidityReport::fail(InvalidReason::UnbalancedParentheses);
                }
            }
            t if t.starts_with('[') => {
                if !bracket_atom().is_match(t) {
                    return ValidityReport::fail(InvalidReason::MalformedBracketAtom { position: pos });
                }
            }
            t => {
                if let Some(label) = ring_label(t) {
                    if !open_rings.remove(&label) {
                        open_rings.insert(label);
                    }
                }
            }
        }
        pos += tok.len();
    }
    if depth != 0 {
        return ValidityReport::fail(InvalidReason::UnbalancedParentheses);
    }
    if !open_rings.is_empty() {
        return ValidityReport::fail(InvalidReason::UnpairedRingClosure {
            labels: open_rings.into_iter().collect(),
        });
    }
    ValidityReport::ok()
}

fn ring_label(tok: &str) -> Option<u32> {
    let digits = tok.strip_prefix('%').unwrap_or(tok);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}
