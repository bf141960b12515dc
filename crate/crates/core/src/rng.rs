//! Named, seeded random streams.
//!
//! Each consumer of randomness draws from its own stream keyed by
//! `(seed, stream, epoch)`, so reordering or resuming work never perturbs
//! the draws another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    DataOrder = 1,
    MasksBranch1 = 2,
    MasksBranch2 = 3,
    InitBranch1 = 4,
    InitBranch2 = 5,
    Priors = 6,
    Flips = 7,
    Phantom = 8,
    Split = 9,
}

pub type StreamRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"smml-rng");
    ChaCha8Rng::from_seed(key)
}
