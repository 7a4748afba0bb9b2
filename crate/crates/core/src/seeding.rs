//! Deterministic seed derivation.
//!
//! Sweeps and multi-stream operations derive per-cell seeds by folding the
//! cell key into a master seed with the SplitMix64 avalanche function. The
//! derivation depends only on the key components, never on execution order,
//! so parallel runs stay reproducible.

/// SplitMix64 finalizer (Steele, Lea, Flood 2014).
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `master`, one avalanche round per component.
pub fn mix(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |h, &p| splitmix64(h ^ p))
}
