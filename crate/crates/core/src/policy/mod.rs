//! The policy: byte-level tokenizer, a small decoder-only transformer with
//! exact log-probabilities and analytic gradients, and checkpoint I/O.

pub mod checkpoint;
mod model;
pub mod tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{ArchConfig, LogProbResult, PolicyModel};
pub use tokenizer::{Token, Tokenizer, BOS, EOS, TOKENIZER_ID, VOCAB_SIZE};

#[cfg(test)]
pub(crate) use model::grad_test_support;
