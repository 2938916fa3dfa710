//! Toy vision-language policy.
//!
//! A fixed patch stem feeds a small trainable attention encoder whose [CLS]
//! output conditions a one-layer autoregressive token head. The head's base
//! weights are frozen; it is adapted through low-rank factors on its input
//! and output projections. A frozen bigram prior over the output vocabulary
//! plays the part of the pretrained language model's grasp of the
//! `<think>…</think><answer>…</answer>` layout, and a frozen recurrent
//! reader turns the prompt tokens into a single conditioning vector.

mod checkpoint;
mod model;
mod stem;
mod vocab;

#[cfg(test)]
mod tests;

use thiserror::Error;

use crate::numerics::NumericsError;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{
    Bound, Conditioning, Encoding, Policy, PolicyConfig, PolicySample, Snapshot, SnapshotTag,
};
pub use stem::{patch_features, STEM_CHANNELS, STEM_FEATURES};
pub use vocab::{
    Lexicon, Vocabulary, ANSWER_CLOSE_ID, ANSWER_OPEN_ID, EOS_ID, FAKE_ID, INSTRUCTION,
    MAX_PROMPT_NUMBER, REAL_ID, REASONING_WORDS, THINK_CLOSE_ID, THINK_OPEN_ID,
};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown token: {0}")]
    Token(String),
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
