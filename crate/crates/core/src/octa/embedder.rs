//! Sentence embedders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ops, Scalar, Tensor};

/// Maps a sentence list to an `N×D` embedding matrix.
///
/// Implementations must be deterministic: identical input lists yield
/// identical matrices, and every entry is finite.
pub trait TextEmbedder<T: Scalar> {
    fn dim(&self) -> usize;
    fn embed(&self, sentences: &[String]) -> Result<Tensor<T>>;
}

/// Seeded hashing embedder.
///
/// Each whitespace token hashes to a fixed pseudo-random unit vector; a
/// sentence embeds as the L2-normalized sum of its token vectors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed.rotate_left(17));
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = ops::norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        v
    }
}

impl<T: Scalar> TextEmbedder<T> for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, sentences: &[String]) -> Result<Tensor<T>> {
        if sentences.is_empty() {
            return Err(Error::invalid("cannot embed an empty sentence list"));
        }
        let mut data = Vec::with_capacity(sentences.len() * self.dim);
        for s in sentences {
            let mut acc = vec![0.0_f64; self.dim];
            let mut tokens = 0;
            for tok in s.split_whitespace() {
                tokens += 1;
                for (a, t) in acc.iter_mut().zip(self.token_vector(tok)) {
                    *a += t;
                }
            }
            if tokens == 0 {
                return Err(Error::invalid("cannot embed a sentence without tokens"));
            }
            let n = ops::norm(&acc).max(ops::COSINE_EPS);
            data.extend(acc.iter().map(|&v| T::of(v / n)));
        }
        Tensor::new(vec![sentences.len(), self.dim], data)
    }
}

/// Embeds each whole sentence as an independent seeded Gaussian vector
/// with per-entry standard deviation `std`.
///
/// Sentences sharing words get unrelated embeddings. Gradient checks use
/// it to keep the attention keys well separated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmbedder {
    pub dim: usize,
    pub seed: u64,
    pub std: f64,
}

impl<T: Scalar> TextEmbedder<T> for GaussianEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, sentences: &[String]) -> Result<Tensor<T>> {
        if sentences.is_empty() {
            return Err(Error::invalid("cannot embed an empty sentence list"));
        }
        let mut data = Vec::with_capacity(sentences.len() * self.dim);
        for s in sentences {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(s.trim().as_bytes()) ^ self.seed.rotate_left(29));
            data.extend((0..self.dim).map(|_| T::of(self.std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))));
        }
        Tensor::new(vec![sentences.len(), self.dim], data)
    }
}
