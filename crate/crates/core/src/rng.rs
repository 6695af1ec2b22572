//! Counter-based, splittable random streams.
//!
//! Every consumer (dataset generation, latent sampling, noise) draws from its
//! own child stream derived from `(seed, label)`, so adding a draw in one
//! place never shifts the samples seen anywhere else.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::Scalar;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn mix_label(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, folded into the parent seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(seed ^ splitmix64(h))
}

fn chacha_from(seed: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut s = seed;
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Serializable position of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, split into two halves for JSON.
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

/// Deterministic random stream identified by a 64-bit seed.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: chacha_from(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `label`. Depends only on this stream's seed,
    /// never on how many samples have been drawn from it.
    pub fn fork(&self, label: &str) -> Rng {
        Rng::new(mix_label(self.seed, label))
    }

    /// Child stream keyed by `(label, index)`.
    pub fn fork_idx(&self, label: &str, index: u64) -> Rng {
        Rng::new(splitmix64(mix_label(self.seed, label) ^ splitmix64(index.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        if hi <= lo {
            lo
        } else {
            self.inner.random_range(lo..=hi)
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        if n <= 1 {
            0
        } else {
            self.inner.random_range(0..n)
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec<S: Scalar>(&mut self, n: usize, std: f64) -> Vec<S> {
        (0..n).map(|_| S::c(self.normal() * std)).collect()
    }

    pub fn state(&self) -> RngState {
        let pos = self.inner.get_word_pos();
        RngState { seed: self.seed, word_pos_hi: (pos >> 64) as u64, word_pos_lo: pos as u64 }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = chacha_from(state.seed);
        inner.set_word_pos(((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128);
        Self { seed: state.seed, inner }
    }
}
