//! Seeded, counter-based random streams.
//!
//! Every consumer of randomness (weight init, reparameterization noise,
//! Gibbs sampling, shuffling) draws from its own [`RngStream`], keyed by a
//! `(seed, stream_id)` pair. The ChaCha block counter is the only mutable
//! state, so a stream can be checkpointed and restored exactly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Well-known stream ids. Component streams are allocated above
/// [`streams::COMPONENT_BASE`].
pub mod streams {
    pub const INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const GIBBS: u64 = 3;
    pub const MONITOR: u64 = 4;
    pub const DATA: u64 = 5;
    pub const LABELS: u64 = 6;
    pub const DISCRIMINATIVE: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const BATCHES: u64 = 1 << 20;
    pub const COMPONENT_BASE: u64 = 1 << 32;
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

/// Serializable position of an [`RngStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream_id: u64,
    /// ChaCha word position, split into high and low halves.
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream with the same seed and a different id.
    pub fn sibling(&self, stream_id: u64) -> RngStream {
        RngStream::new(self.seed, stream_id)
    }

    pub fn snapshot(&self) -> RngSnapshot {
        let pos = self.rng.get_word_pos();
        RngSnapshot {
            seed: self.seed,
            stream_id: self.stream_id,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(snap: &RngSnapshot) -> Self {
        let mut s = RngStream::new(snap.seed, snap.stream_id);
        s.rng
            .set_word_pos(((snap.word_pos_hi as u128) << 64) | snap.word_pos_lo as u128);
        s
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| self.normal()).collect())
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
