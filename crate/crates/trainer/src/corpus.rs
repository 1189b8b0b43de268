//! Token sources: a seeded synthetic language and a plain token buffer.
//!
//! The synthetic language mixes a latent per-sequence topic (each with its
//! own sparse bigram table) with occasional long-range copies, so a model
//! gains from both attention and its MLPs.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("token buffer holds {available} tokens of the {split:?} split, {needed} needed")]
    Exhausted { split: Split, needed: usize, available: usize },
    #[error("invalid corpus: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

/// Anything that yields fixed-length token sequences by index.
pub trait TokenSource: Send + Sync {
    fn vocab(&self) -> usize;

    /// `count` consecutive sequences of `len` tokens starting at sequence
    /// `first`, concatenated. `order_seed` selects the data order.
    fn sequences(&self, split: Split, order_seed: u64, first: u64, count: usize, len: usize) -> Result<Vec<u32>, DataError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub vocab: usize,
    pub topics: usize,
    /// Likely successors per (topic, token).
    pub successors: usize,
    /// Probability of a uniformly random token.
    pub noise: f64,
    /// Probability of copying the token `copy_distance` positions back.
    pub copy_prob: f64,
    pub copy_distance: usize,
    /// Seed of the language itself (transition tables).
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            topics: 4,
            successors: 4,
            noise: 0.05,
            copy_prob: 0.2,
            copy_distance: 8,
            seed: 0x5EED,
        }
    }
}

/// Seeded synthetic language; cheap to clone.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    cfg: CorpusConfig,
    /// `next[topic][token]` = (successor, cumulative probability).
    next: Vec<Vec<Vec<(u32, f64)>>>,
}

impl SyntheticCorpus {
    pub fn new(cfg: CorpusConfig) -> Result<Self, DataError> {
        if cfg.vocab < 2 || cfg.topics == 0 || cfg.successors == 0 || cfg.successors > cfg.vocab {
            return Err(DataError::Invalid(format!(
                "vocab {} topics {} successors {}",
                cfg.vocab, cfg.topics, cfg.successors
            )));
        }
        if !(0.0..=1.0).contains(&cfg.noise) || !(0.0..=1.0).contains(&cfg.copy_prob) || cfg.noise + cfg.copy_prob > 1.0 {
            return Err(DataError::Invalid("noise and copy probabilities must be in [0, 1] with sum ≤ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let weights: Vec<f64> = (0..cfg.successors).map(|i| 1.0 / (i + 1) as f64).collect();
        let total: f64 = weights.iter().sum();
        let next = (0..cfg.topics)
            .map(|_| {
                (0..cfg.vocab)
                    .map(|_| {
                        let mut acc = 0.0;
                        sample(&mut rng, cfg.vocab, cfg.successors)
                            .into_iter()
                            .zip(&weights)
                            .map(|(tok, w)| {
                                acc += w / total;
                                (tok as u32, acc)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { cfg, next })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.cfg
    }

    fn split_salt(split: Split) -> u64 {
        match split {
            Split::Train => 0x7261_696E,
            Split::Validation => 0x7661_6C69_6400_0000,
        }
    }

    fn sequence(&self, split: Split, order_seed: u64, index: u64, len: usize, out: &mut Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(order_seed ^ Self::split_salt(split));
        rng.set_stream(index);
        let topic = rng.random_range(0..self.cfg.topics);
        let start = out.len();
        let mut prev = rng.random_range(0..self.cfg.vocab) as u32;
        out.push(prev);
        for t in 1..len {
            let u: f64 = rng.random();
            let tok = if u < self.cfg.noise {
                rng.random_range(0..self.cfg.vocab) as u32
            } else if u < self.cfg.noise + self.cfg.copy_prob && t >= self.cfg.copy_distance {
                out[start + t - self.cfg.copy_distance]
            } else {
                let v: f64 = rng.random();
                let row = &self.next[topic][prev as usize];
                row.iter().find(|(_, c)| v < *c).unwrap_or(row.last().expect("nonempty")).0
            };
            out.push(tok);
            prev = tok;
        }
    }
}

impl TokenSource for SyntheticCorpus {
    fn vocab(&self) -> usize {
        self.cfg.vocab
    }

    fn sequences(&self, split: Split, order_seed: u64, first: u64, count: usize, len: usize) -> Result<Vec<u32>, DataError> {
        let mut out = Vec::with_capacity(count * len);
        for i in 0..count as u64 {
            self.sequence(split, order_seed, first + i, len, &mut out);
        }
        Ok(out)
    }
}

/// A fixed token stream cut into consecutive windows. The last
/// `validation_tokens` tokens form the validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBuffer {
    tokens: Vec<u32>,
    vocab: usize,
    validation_tokens: usize,
}

impl TokenBuffer {
    pub fn new(tokens: Vec<u32>, vocab: usize, validation_tokens: usize) -> Result<Self, DataError> {
        if tokens.iter().any(|t| *t as usize >= vocab) {
            return Err(DataError::Invalid("token id outside vocabulary".into()));
        }
        if validation_tokens > tokens.len() {
            return Err(DataError::Invalid("validation split larger than buffer".into()));
        }
        Ok(Self { tokens, vocab, validation_tokens })
    }
}

impl TokenSource for TokenBuffer {
    fn vocab(&self) -> usize {
        self.vocab
    }

    /// Windows are taken in stream order; `order_seed` is ignored.
    fn sequences(&self, split: Split, _order_seed: u64, first: u64, count: usize, len: usize) -> Result<Vec<u32>, DataError> {
        let boundary = self.tokens.len() - self.validation_tokens;
        let part = match split {
            Split::Train => &self.tokens[..boundary],
            Split::Validation => &self.tokens[boundary..],
        };
        let start = first as usize * len;
        let needed = start + count * len;
        if needed > part.len() {
            return Err(DataError::Exhausted { split, needed, available: part.len() });
        }
        Ok(part[start..needed].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let c = SyntheticCorpus::new(CorpusConfig::default()).unwrap();
        let a = c.sequences(Split::Train, 1, 10, 4, 33).unwrap();
        assert_eq!(a, c.sequences(Split::Train, 1, 10, 4, 33).unwrap());
        assert_eq!(a.len(), 4 * 33);
        assert!(a.iter().all(|t| (*t as usize) < 64));
        assert_ne!(a, c.sequences(Split::Validation, 1, 10, 4, 33).unwrap());
        assert_ne!(a, c.sequences(Split::Train, 2, 10, 4, 33).unwrap());
        // Batches are slices of one indexed stream.
        assert_eq!(&a[33..], &c.sequences(Split::Train, 1, 11, 3, 33).unwrap()[..]);
    }

    #[test]
    fn has_structure() {
        // Bigram entropy is well below log(V).
        let c = SyntheticCorpus::new(CorpusConfig::default()).unwrap();
        let toks = c.sequences(Split::Train, 0, 0, 400, 64).unwrap();
        let mut counts = vec![vec![0f64; 64]; 64];
        for seq in toks.chunks(64) {
            for w in seq.windows(2) {
                counts[w[0] as usize][w[1] as usize] += 1.0;
            }
        }
        let total: f64 = counts.iter().flatten().sum();
        let h: f64 = counts
            .iter()
            .map(|row| {
                let n: f64 = row.iter().sum();
                row.iter().filter(|c| **c > 0.0).map(|c| -c / total * (c / n).ln()).sum::<f64>()
            })
            .sum();
        assert!(h < 0.8 * (64f64).ln(), "{h}");
    }

    #[test]
    fn buffer_bounds() {
        let b = TokenBuffer::new((0..100).map(|i| i % 10).collect(), 10, 20).unwrap();
        assert_eq!(b.sequences(Split::Train, 0, 1, 2, 5).unwrap(), vec![5, 6, 7, 8, 9, 0, 1, 2, 3, 4]);
        assert!(matches!(b.sequences(Split::Train, 0, 15, 2, 5), Err(DataError::Exhausted { .. })));
        assert_eq!(b.sequences(Split::Validation, 0, 0, 1, 3).unwrap(), vec![0, 1, 2]);
        assert!(TokenBuffer::new(vec![10], 10, 0).is_err());
    }
}
