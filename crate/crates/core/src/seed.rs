//! Seed derivation for independent random streams.
//!
//! Every random draw in an experiment comes from a ChaCha8 generator seeded
//! with a 64-bit value derived here from the experiment's base seed and the
//! coordinates of the draw (fan-out, trial, member, purpose). Streams are
//! therefore independent of execution order.

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `coords` into `base`, one mixing round per coordinate.
pub fn derive_seed(base: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(mix64(base), |h, &c| mix64(h ^ mix64(c)))
}

/// What a derived stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    HiddenWeights = 1,
    EnsembleMember = 2,
    Synthetic = 3,
}
