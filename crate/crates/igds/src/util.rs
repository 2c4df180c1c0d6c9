//! Small shared helpers: seed derivation and half-away-from-zero rounding.

/// Derive a child seed from a base seed and a salt (splitmix64 finalizer).
/// Used to give every stage, split, and draw its own independent stream.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// round(ratio * n) with ties away from zero, as a count.
pub fn round_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).round() as usize
}
