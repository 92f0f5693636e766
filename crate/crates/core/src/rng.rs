//! Seeded, splittable random streams for Bernoulli sampling.
//!
//! A stream is identified by `(seed, stream)`. The same pair always yields
//! the same draw sequence, and substreams are derived by hashing rather than
//! counting, so per-row / per-sample streams are independent of iteration
//! order. Backed by ChaCha8, which keys the 64-bit stream word directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    stream: u64,
}

/// SplitMix64 finalizer: a cheap 64-bit bijective mixer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Derive the `k`-th child stream. Children of distinct parents or
    /// distinct `k` land on distinct ChaCha streams (up to 64-bit hash
    /// collisions, which at desk scale are negligible).
    pub fn substream(&self, k: u64) -> Self {
        Self {
            seed: self.seed,
            stream: mix64(self.stream ^ mix64(k)),
        }
    }

    /// Instantiate the generator for this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }
}

/// Independent 0/1 draws: entry i is 1 with probability `p[i]`.
/// Probabilities may stray outside [0, 1] by at most 1e-12 (rounding slack);
/// anything worse is rejected.
pub fn sample_bernoulli(p: &Matrix, stream: RngStream) -> Result<Matrix> {
    const TOL: f64 = 1e-12;
    for &v in p.data() {
        if !(-TOL..=1.0 + TOL).contains(&v) {
            return Err(Error::InvalidProbability(v));
        }
    }
    let mut rng = stream.rng();
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for (o, &prob) in out.data_mut().iter_mut().zip(p.data().iter()) {
        let prob = prob.clamp(0.0, 1.0);
        let u: f64 = rng.gen();
        *o = if u < prob { 1.0 } else { 0.0 };
    }
    Ok(out)
}
