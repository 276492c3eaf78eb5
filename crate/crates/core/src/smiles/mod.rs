//! Atomwise SMILES tokenization, vocabularies, and a syntactic validity check.

mod tokenize;
mod validate;
mod vocab;

pub use tokenize::{detokenize, tokenize, tokenize_owned, TokenizeError, ATOMWISE_PATTERN};
pub use validate::{validate_syntactic, InvalidReason, ValidityReport};
pub use vocab::{VocabError, Vocabulary, BOS, EOS, PAD, SPECIAL_TOKENS, UNK};
