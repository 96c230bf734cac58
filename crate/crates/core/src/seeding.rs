//! Seed derivation for independent random substreams.
//!
//! Every random object in a run is drawn from a ChaCha stream keyed by the
//! root seed plus a path of tags, so adding a consumer never shifts the
//! draws seen by another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const WORLD: u64 = 1;
pub const SUITE: u64 = 2;
pub const TRAIN_SHARD: u64 = 3;
pub const TEST_SET: u64 = 4;
pub const BASE_POOL: u64 = 5;
pub const ENCODER: u64 = 6;
pub const DENOISER_INIT: u64 = 7;
pub const PRETRAIN: u64 = 8;
pub const SYNTHESIS: u64 = 9;
pub const SERVER_TRAIN: u64 = 10;
pub const CLIENT_TRAIN: u64 = 11;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `path` into `root`; distinct paths give unrelated seeds.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

pub fn stream(root: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, path))
}

/// FNV-1a over the bit patterns of `values`.
pub fn checksum(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_separate_streams() {
        assert_ne!(derive_seed(42, &[TRAIN_SHARD, 0]), derive_seed(42, &[TRAIN_SHARD, 1]));
        assert_ne!(derive_seed(42, &[TRAIN_SHARD, 0]), derive_seed(42, &[TEST_SET, 0]));
        assert_eq!(derive_seed(42, &[1, 2, 3]), derive_seed(42, &[1, 2, 3]));
    }
}
