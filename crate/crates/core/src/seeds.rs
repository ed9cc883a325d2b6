//! Deterministic seed derivation.
//!
//! Every random decision in the engine draws from a ChaCha stream keyed by
//! (master seed, stream id, index). Keying by index rather than chaining one
//! stream is what makes interrupted runs resume bit-identically: trial `i`
//! sees the same randomness whether or not trials `0..i` ran in this process.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids for the independent random streams of a run.
pub mod stream {
    /// Dataset generation.
    pub const DATASET: u64 = 1;
    /// Random-stage point sampling (indexed by trial id).
    pub const SAMPLE: u64 = 2;
    /// Trial training: init, shuffles, augmentation (indexed by trial id).
    pub const TRAIN: u64 = 3;
    /// GP length-scale search restarts (indexed by trial id).
    pub const GP_FIT: u64 = 4;
    /// Candidate subsampling for large spaces (indexed by trial id).
    pub const CANDIDATES: u64 = 5;
    /// Baseline comparison training in reports.
    pub const BASELINE: u64 = 6;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes (master, stream, index) into a single 64-bit seed.
pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    let mut state = master;
    let a = splitmix64(&mut state);
    let mut state = a ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let b = splitmix64(&mut state);
    let mut state = b ^ index.wrapping_mul(0xA5A3_564E_1FB8_92D1);
    splitmix64(&mut state)
}

/// A ChaCha8 stream for the given (master, stream, index) key.
pub fn rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, index))
}

/// Standard normal draw via Box-Muller; two uniform draws per call so the
/// consumption pattern stays fixed across platforms.
pub fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
