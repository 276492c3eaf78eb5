use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::tokenize::{tokenize, TokenizeError};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary file: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary file line {line}: expected special token {expected:?}, found {found:?}")]
    MissingSpecial {
        line: usize,
        expected: &'static str,
        found: String,
    },
    #[error("vocabulary file line {line}: duplicate token {token:?}")]
    Duplicate { line: usize, token: String },
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
}

/// Bijective token/id map. Ids 0..4 are the specials; the remaining tokens
/// are in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build<I, S>(corpus: I) -> Result<Self, TokenizeError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens = BTreeSet::new();
        for s in corpus {
            for t in tokenize(s.as_ref())? {
                tokens.insert(t.to_owned());
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: BTreeSet<String>) -> Self {
        let id_to_token: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().filter(|t| !SPECIAL_TOKENS.contains(&t.as_str())))
            .collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { id_to_token, token_to_id }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn is_special(id: u32) -> bool {
        id <= UNK
    }

    /// Tokenize and map to ids. Tokens missing from the vocabulary map to `<unk>`.
    pub fn encode(&self, smiles: &str) -> Result<Vec<u32>, TokenizeError> {
        Ok(tokenize(smiles)?
            .into_iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect())
    }

    /// Concatenate the non-special tokens of `ids`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .filter_map(|&id| self.token(id))
            .collect()
    }

    /// One token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut id_to_token = Vec::new();
        let mut token_to_id = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if i < SPECIAL_TOKENS.len() && line != SPECIAL_TOKENS[i] {
                return Err(VocabError::MissingSpecial {
                    line: i + 1,
                    expected: SPECIAL_TOKENS[i],
                    found: line.to_owned(),
                });
            }
            if token_to_id.insert(line.to_owned(), i as u32).is_some() {
                return Err(VocabError::Duplicate {
                    line: i + 1,
                    token: line.to_owned(),
                });
            }
            id_to_token.push(line.to_owned());
        }
        if id_to_token.len() < SPECIAL_TOKENS.len() {
            return Err(VocabError::MissingSpecial {
                line: id_to_token.len() + 1,
                expected: SPECIAL_TOKENS[id_to_token.len()],
                found: String::new(),
            });
        }
        Ok(Self { id_to_token, token_to_id })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the file representation, hex encoded. Checkpoints record it.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}
