//! Deterministic seed derivation so that parallel work is schedule-independent.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes `base` together with a path of indices (cell, replicate, ...).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base.wrapping_add(GOLDEN)), |acc, &part| {
        mix(acc ^ mix(part.wrapping_add(GOLDEN)))
    })
}
