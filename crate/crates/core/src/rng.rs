//! Counter-derived RNG streams for reproducible, schedule-independent trials.
//!
//! Every Monte Carlo trial draws from its own ChaCha stream addressed by
//! `(base_seed, stream_index)`. Trials can then run in any order, on any
//! number of threads, and still consume bit-identical randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG type used throughout the crate.
pub type TrialRng = ChaCha8Rng;

/// Returns the RNG stream for one trial of one experiment.
pub fn trial_rng(base_seed: u64, stream: u64) -> TrialRng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(stream);
    rng
}

/// Derives a sub-seed for an independent phase of a larger experiment
/// (splitmix64 finalizer), so phases never share trial streams.
pub fn derive_seed(base_seed: u64, label: u64) -> u64 {
    let mut z = base_seed ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
