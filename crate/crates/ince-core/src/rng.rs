//! Deterministic, portable RNG helpers.
//!
//! Every stochastic choice in the engine (init, shuffles, fold assignment,
//! synthetic data) derives from a `u64` seed through these helpers so runs
//! are reproducible bit-for-bit across platforms and thread schedules.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The engine's RNG. ChaCha8 is portable and fast enough for our volumes.
pub type EngineRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> EngineRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from (seed, stream tag) via splitmix64 mixing.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for_stream(seed: u64, stream: u64) -> EngineRng {
    rng_from_seed(derive_seed(seed, stream))
}

/// Uniform sample in (-bound, bound).
pub fn uniform_symmetric(rng: &mut EngineRng, bound: f64) -> f64 {
    rng.gen_range(-bound..bound)
}

/// Standard normal via Box-Muller (portable, no rand_distr dependency).
pub fn standard_normal(rng: &mut EngineRng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

/// Fisher-Yates shuffle of indices 0..n.
pub fn shuffled_indices(rng: &mut EngineRng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
