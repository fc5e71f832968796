//! Deterministic named substreams derived from one root seed.
//!
//! Every random decision in a run (straggler draws, network resampling, SJF
//! tie shuffles, aggregator pre-assignment, ...) pulls from its own stream so
//! adding draws to one concern never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG for `(root_seed, name)`. The name is folded into the 32-byte ChaCha
/// seed with FNV-1a so distinct names give unrelated streams.
pub fn substream(root_seed: u64, name: &str) -> ChaCha8Rng {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&root_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&hash.to_le_bytes());
    seed[16..24].copy_from_slice(&root_seed.rotate_left(17).to_le_bytes());
    seed[24..32].copy_from_slice(&hash.rotate_left(31).to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_stable_and_distinct() {
        let a: u64 = substream(7, "straggler").gen();
        let b: u64 = substream(7, "straggler").gen();
        let c: u64 = substream(7, "network").gen();
        let d: u64 = substream(8, "straggler").gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
