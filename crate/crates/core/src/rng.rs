//! Seeded randomness with explicit stream addressing.
//!
//! Every consumer of randomness (a corpus sample, a weight matrix, a test
//! trial) draws from its own [`Stream`], identified by `(seed, stream id)`.
//! The generator is ChaCha8; distributions are derived here by hand
//! (53-bit uniform, Box-Muller normal, rejection-sampled integers) so the
//! exact byte sequence is documented and stable across platforms.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// One independent random sequence.
pub struct Stream {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Stream {
    /// Open the stream `stream` of the generator seeded with `seed`.
    /// Distinct `(seed, stream)` pairs yield statistically independent
    /// sequences; equal pairs yield identical sequences.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Stream { rng, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; scaled by `std`.
    pub fn normal(&mut self, std: f64) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z * std;
        }
        // 1 - u maps [0,1) onto (0,1], keeping the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos() * std
    }

    /// Uniform integer in `[0, n)`, unbiased (rejection sampling).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "Stream::index requires n > 0");
        let n = n as u64;
        let zone = (u64::MAX / n) * n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Integer in `[lo, hi]` (inclusive).
    pub fn index_in(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.index(hi - lo + 1)
    }

    /// Weighted choice: returns `i` with probability `weights[i] / sum`.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut x = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            x -= w;
            if x < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}
