//! Toolkit for contactless-fingerprint presentation-attack detection.
//!
//! The pieces fit together in one pipeline: [`tensor`] provides dense f64
//! tensors with reverse-mode autodiff, [`network`] builds a compact residual
//! CNN on top of it, [`losses`] supplies the angular-margin classification
//! loss plus a center-compactness penalty, [`training`] runs Adam over the
//! joint objective (including a sweep over the center-loss weight), and
//! [`metrics`] scores the result with the standard PAD error rates (APCER,
//! BPCER, ACER, ROC/AUC). [`dataio`] handles manifests, subject-disjoint
//! splits, and a procedural ridge-texture generator for desk-scale runs.
//!
//! Everything is deterministic given a seed: same inputs, same bytes out.

pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Mixes a salt into a master seed, giving independent per-item RNG streams.
///
/// SplitMix64 finalizer; small changes in either input decorrelate the output.
pub fn derive_seed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a string, used to turn record ids into seed salts.
pub fn hash_id(id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Standard normal draw via Box-Muller. `u` is bounded away from zero so the
/// logarithm stays finite.
pub(crate) fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u.ln()).sqrt() * v.cos()
}
