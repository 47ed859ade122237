//! Counter-based random streams.
//!
//! Every random draw in a chain comes from a generator keyed on
//! `(seed, purpose, iteration, index)`. Results therefore do not depend on
//! thread scheduling, and a chain resumed from a checkpoint continues with
//! exactly the draws it would have used without interruption.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ChainRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    PriorParams = 1,
    Latent = 2,
    Precision = 3,
    BirthDeath = 4,
    Synthesis = 5,
    Test = 6,
    Init = 7,
    Diagnostics = 8,
}

pub fn stream(seed: u64, purpose: Purpose, iteration: u64, index: u64) -> ChainRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&iteration.to_le_bytes());
    key[24..32].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
