use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

/// Atomwise SMILES pattern from the Molecular Transformer line of work.
///
/// Bracket atoms are one token, `Br`/`Cl` are one token, `%NN` ring closures
/// are one token, and everything else is a single character.
pub const ATOMWISE_PATTERN: &str =
    r"(\[[^\]]+\]|Br?|Cl?|N|O|S|P|F|I|b|c|n|o|s|p|\(|\)|\.|=|#|-|\+|\\|/|:|~|@|\?|>|\*|\$|%[0-9]{2}|[0-9])";

fn pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(ATOMWISE_PATTERN).expect("atomwise pattern compiles"))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot tokenize {character:?} at byte {position}")]
pub struct TokenizeError {
    pub position: usize,
    pub character: char,
}

/// Split a SMILES string into atomwise tokens.
///
/// The concatenation of the returned tokens is always `s`.
pub fn tokenize(s: &str) -> Result<Vec<&str>, TokenizeError> {
    let mut tokens = Vec::with_capacity(s.len());
    let mut pos = 0;
    for m in pattern().find_iter(s) {
        if m.start() != pos {
            return Err(unmatched(s, pos));
        }
        tokens.push(m.as_str());
        pos = m.end();
    }
    if pos != s.len() {
        return Err(unmatched(s, pos));
    }
    Ok(tokens)
}

fn unmatched(s: &str, pos: usize) -> TokenizeError {
    TokenizeError {
        position: pos,
        character: s[pos..].chars().next().unwrap_or('\0'),
    }
}

/// Owned variant of [`tokenize`].
pub fn tokenize_owned(s: &str) -> Result<Vec<String>, TokenizeError> {
    Ok(tokenize(s)?.into_iter().map(str::to_owned).collect())
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect()
}
