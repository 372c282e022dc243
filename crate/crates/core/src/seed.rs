//! Seed derivation. Every random stream in a run descends from one root seed.
//!
//! `derive(root, stream)` mixes the root with a per-module stream constant
//! through splitmix64, so streams are independent and reproducible.

pub const DISTANT_SUPERVISION: u64 = 0x01;
pub const SYNONYM_MODEL: u64 = 0x02;
pub const EXPANSION: u64 = 0x03;
pub const PSEUDO_LABELS: u64 = 0x04;
pub const LOUVAIN: u64 = 0x05;
pub const HOLDOUT_SPLIT: u64 = 0x06;
pub const FINE_TUNE: u64 = 0x07;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(root: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(root) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(derive(7, EXPANSION), derive(7, LOUVAIN));
        assert_ne!(derive(7, EXPANSION), derive(8, EXPANSION));
        assert_eq!(derive(7, EXPANSION), derive(7, EXPANSION));
    }
}
