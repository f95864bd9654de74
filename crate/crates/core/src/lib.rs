//! Tree search over reasoning thoughts with execution-feedback rewards,
//! followed by trajectory clustering and rank-wise gated LoRA expert
//! composition on a toy frozen base model.

pub mod cluster;
pub mod evaluator;
pub mod fixtures;
pub mod lora;
pub mod mcts;
pub mod pipeline;
pub mod policy;
pub mod trajectory;
pub mod tree;

use sha2::{Digest, Sha256};

/// Hex SHA-256 of a text; the content address used by caches and scripts.
pub fn digest_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
pub(crate) mod testutil;
