//! Tiny vision-language-action policy with hindsight abstraction targets and
//! connectivity-score visual token pruning, trained on a synthetic gridworld.

pub mod error;
pub mod harness;
pub mod gridworld;
pub mod intention;
pub mod nanomodel;
pub mod pruning;
pub mod semantic_grid;
pub mod sequence;

pub use error::{Error, Result};

/// Hex SHA-256 of a string; used to pin configs and vocabularies.
pub fn digest_str(s: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(s.as_bytes()))
}
