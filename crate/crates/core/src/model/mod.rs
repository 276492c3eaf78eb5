//! Encoder-decoder transformer with Medusa heads: parameters, inference with
//! a decoder cache, the combined multi-head loss, training, and checkpoints.

mod checkpoint;
mod config;
mod infer;
mod loss;
mod ops;
mod params;
mod train;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{ModelConfig, PAPER_MEDUSA_HIDDEN};
pub use infer::{forward, DecoderCache, DecoderRow, EncoderMemory, Heads, LogitsBlock, RowLogits, Transformer};
pub use loss::{head_weight, medusa_loss, MedusaLoss, ShiftedTargets, TrainBatch};
pub use ops::log_softmax;
pub use params::{
    count_params, Attention, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, MedusaHead,
    ModelParameters, NamedTensor, ParamCount, ParamMeta,
};
pub use train::{evaluate_loss, loss_and_grads, train, EncodedPair, EvalRecord, StepRecord, TrainLog, TrainSchedule};

use crate::smiles::{TokenizeError, Vocabulary, EOS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("source sequence is empty")]
    EmptySource,
    #[error("decoder input is empty")]
    EmptyDecoderInput,
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    LengthOverflow { len: usize, max_len: usize },
    #[error("batch has {sources} sources but {targets} targets")]
    BatchMismatch { sources: usize, targets: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint was trained with vocabulary {checkpoint} but {given} was supplied")]
    VocabMismatch { checkpoint: String, given: String },
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Source ids for a product SMILES: its tokens followed by eos.
pub fn encode_source(vocab: &Vocabulary, smiles: &str) -> Result<Vec<u32>, ModelError> {
    let mut ids = vocab.encode(smiles)?;
    ids.push(EOS);
    Ok(ids)
}
