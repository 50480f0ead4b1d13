//! Seed derivation. Every random draw in the crate goes through a ChaCha8
//! generator keyed by a user seed and a fixed stream id, so output is
//! bit-identical across platforms and independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Packing = 1,
    Render = 2,
    Pulses = 3,
    Oracle = 4,
    Campaign = 5,
    Field = 6,
}

pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// SplitMix64 finaliser; derives independent child seeds from `(seed, index)`.
pub fn derive(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, Stream::Packing).random();
        assert_eq!(a, stream(7, Stream::Packing).random::<u64>());
        assert_ne!(a, stream(7, Stream::Render).random::<u64>());
        assert_ne!(a, stream(8, Stream::Packing).random::<u64>());
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(derive(42, 3), derive(42, 3));
    }
}
