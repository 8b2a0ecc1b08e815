//! Seed derivation. Every random stream in a run is a named child of the run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Child seed of `seed` for the named stream and index.
pub fn derive(seed: u64, stream: &str, index: u64) -> u64 {
    let s = splitmix64(seed ^ fnv1a(stream.as_bytes()));
    splitmix64(s ^ splitmix64(index))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn child_rng(seed: u64, stream: &str, index: u64) -> Rng {
    rng_from(derive(seed, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn streams_differ() {
        assert_ne!(derive(1, "scene", 0), derive(1, "policy", 0));
        assert_ne!(derive(1, "scene", 0), derive(1, "scene", 1));
        assert_eq!(derive(7, "scene", 3), derive(7, "scene", 3));
    }
}
