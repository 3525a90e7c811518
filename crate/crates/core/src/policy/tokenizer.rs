//! Byte-level tokenizer: 256 byte values plus BOS and EOS markers.
//!
//! Zero external vocabulary assets and exact reversibility: decode(encode(s))
//! is the identity on arbitrary byte strings.

use crate::error::{Error, Result};

pub type Token = u16;

pub const VOCAB_SIZE: usize = 258;
pub const BOS: Token = 256;
pub const EOS: Token = 257;

/// Identifier stored in checkpoints; loading rejects a mismatch.
pub const TOKENIZER_ID: &str = "byte-258-v1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn new() -> Self {
        Tokenizer
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// One token per byte; no BOS/EOS added.
    pub fn encode(&self, bytes: &[u8]) -> Vec<Token> {
        bytes.iter().map(|&b| b as Token).collect()
    }

    /// Strict inverse of [`encode`]: rejects BOS/EOS and out-of-range tokens.
    pub fn decode(&self, tokens: &[Token]) -> Result<Vec<u8>> {
        tokens
            .iter()
            .map(|&t| {
                u8::try_from(t).map_err(|_| {
                    Error::Argument(format!("token {t} is not a byte token"))
                })
            })
            .collect()
    }

    /// Decode a sampled completion: keeps byte tokens, drops any marker
    /// tokens (a freshly initialized model can emit them anywhere).
    pub fn decode_lossy(&self, tokens: &[Token]) -> Vec<u8> {
        tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect()
    }

    /// Token count of a solution body under this tokenizer (no markers).
    pub fn token_length(&self, source: &str) -> usize {
        source.len()
    }
}
