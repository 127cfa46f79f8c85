//! Keyed counter-based random streams.
//!
//! Every consumer of randomness asks for its own stream identified by
//! `(seed, purpose, index)`. The purpose label and seed are hashed into a
//! ChaCha20 key and the index selects the ChaCha stream, so adding or removing
//! one consumer never shifts the draws seen by another.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub mod purpose {
    pub const CONTEXT_INIT: &str = "context-init";
    pub const ENCODER_PROJECTION: &str = "encoder-projection";
    pub const ENCODER_POSITIONAL: &str = "encoder-positional";
    pub const ENCODER_BIAS: &str = "encoder-bias";
    pub const CLASS_TOKENS: &str = "token-class";
    pub const DOMAIN_TOKENS: &str = "token-domain";
    pub const SYNTH_PROTOTYPES: &str = "synth-prototype";
    pub const SYNTH_SHIFTS: &str = "synth-shift";
    pub const SYNTH_NOISE: &str = "synth-noise";
    pub const FEW_SHOT: &str = "few-shot";
    pub const EPOCH_SHUFFLE: &str = "epoch-shuffle";
}

#[derive(Clone, Debug)]
pub struct KeyedStream {
    inner: ChaCha20Rng,
}

impl KeyedStream {
    pub fn new(seed: u64, purpose: &str, index: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"dicoop/v1\0");
        hasher.update(seed.to_le_bytes());
        hasher.update(purpose.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(index);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw via Box-Muller (one value per pair of uniforms).
    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize, std_dev: f64) -> Vec<f64> {
        (0..n).map(|_| std_dev * self.normal()).collect()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_stream() {
        let mut a = KeyedStream::new(9, "x", 3);
        let mut b = KeyedStream::new(9, "x", 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn purpose_and_index_separate_streams() {
        let a = KeyedStream::new(9, "x", 3).next_u64();
        assert_ne!(a, KeyedStream::new(9, "y", 3).next_u64());
        assert_ne!(a, KeyedStream::new(9, "x", 4).next_u64());
        assert_ne!(a, KeyedStream::new(10, "x", 3).next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut s = KeyedStream::new(1, "moments", 0);
        let n = 200_000;
        let xs = s.normal_vec(n, 1.0);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut s = KeyedStream::new(2, "u", 0);
        for _ in 0..10_000 {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
