//! Named random streams. Each purpose (init, dropout, masking, data order,
//! generation) draws from its own generator derived from the run seed, so
//! changing how often one consumer draws never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const INIT: &str = "init";
pub const DROPOUT: &str = "dropout";
pub const MASKING: &str = "masking";
pub const ORDER: &str = "order";

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// Sub-stream for a step or epoch index within a named stream.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    stream(seed, &format!("{name}/{index}"))
}
