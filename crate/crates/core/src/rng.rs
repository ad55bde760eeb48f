//! Reproducible random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from
//! `(seed, domain, index)`. ChaCha is a counter-mode generator, so a stream is
//! fully determined by its key and stream id and does not depend on how many
//! other streams were drawn before it or on which worker draws it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Domains separate unrelated uses of the same user seed.
pub mod domain {
    pub const INIT_DRIFT: u64 = 1;
    pub const INIT_SCORE: u64 = 2;
    pub const GRID: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const FORWARD_NOISE: u64 = 5;
    pub const SAMPLER: u64 = 6;
    pub const ELBO: u64 = 7;
    pub const DATASET: u64 = 8;
    pub const SPLIT: u64 = 9;
    pub const HUTCHINSON: u64 = 10;
    pub const GRADCHECK: u64 = 11;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key for a family of streams; `round` lets callers advance e.g. per iteration.
pub fn key(seed: u64, domain: u64, round: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(domain)) ^ round)
}

/// Stream `index` of the family `(seed, domain, round)`.
pub fn stream(seed: u64, domain: u64, round: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(key(seed, domain, round));
    rng.set_stream(index);
    rng
}

pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

pub fn rademacher<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}
