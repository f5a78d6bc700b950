//! Synthetic token corpora and the raw `u16` corpus file.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::write_atomic;
use crate::error::{Error, Result, ResultExt};

/// Order-`n` Markov chain over `vocab` tokens.
///
/// Each context (the last `order` tokens) has `branching` candidate
/// successors with log-normal weights of spread `sharpness`. Transition
/// tables are never stored: they are re-derived from a hash of
/// `(seed, context)`, so high orders cost no memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSpec {
    pub vocab: usize,
    pub order: usize,
    pub branching: usize,
    pub sharpness: f64,
    pub seed: u64,
}

impl MarkovSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.vocab > u16::MAX as usize + 1 {
            return Err(Error::invalid(format!(
                "corpus vocab {} outside 1..=65536",
                self.vocab
            )));
        }
        if self.order == 0 {
            return Err(Error::invalid("Markov order must be at least 1"));
        }
        if self.branching == 0 {
            return Err(Error::invalid("Markov branching must be at least 1"));
        }
        if !(self.sharpness.is_finite() && self.sharpness >= 0.0) {
            return Err(Error::invalid(
                "Markov sharpness must be finite and non-negative",
            ));
        }
        Ok(())
    }

    fn successors(&self, context: &[u16]) -> (Vec<u16>, Vec<f64>) {
        let mut h = self.seed ^ 0x243F_6A88_85A3_08D3;
        for &t in context {
            h = splitmix(h ^ t as u64);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let tokens = (0..self.branching)
            .map(|_| rng.random_range(0..self.vocab) as u16)
            .collect();
        let weights = (0..self.branching)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (self.sharpness * z).exp()
            })
            .collect();
        (tokens, weights)
    }

    pub fn generate(&self, n_tokens: usize) -> Result<Vec<u16>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.seed));
        let mut out: Vec<u16> = Vec::with_capacity(n_tokens);
        let mut context: Vec<u16> = (0..self.order)
            .map(|_| rng.random_range(0..self.vocab) as u16)
            .collect();
        for _ in 0..n_tokens {
            let (tokens, weights) = self.successors(&context);
            let total: f64 = weights.iter().sum();
            let mut pick = rng.random::<f64>() * total;
            let mut next = tokens[tokens.len() - 1];
            for (&t, &w) in tokens.iter().zip(&weights) {
                if pick < w {
                    next = t;
                    break;
                }
                pick -= w;
            }
            out.push(next);
            context.remove(0);
            context.push(next);
        }
        Ok(out)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Splits a flat token list into consecutive sequences of at most `seq_len`.
pub fn split_sequences(tokens: &[u16], seq_len: usize) -> Result<Vec<Vec<u16>>> {
    if seq_len == 0 {
        return Err(Error::invalid("sequence length must be at least 1"));
    }
    Ok(tokens.chunks(seq_len).map(<[u16]>::to_vec).collect())
}

/// Raw little-endian `u16` token ids.
pub fn write_corpus(path: impl AsRef<Path>, tokens: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<u16>> {
    let path = path.as_ref();
    let bytes = fs::read(path).in_file(path)?;
    if bytes.len() % 2 != 0 {
        return Err(Error::format(
            bytes.len() as u64 - 1,
            "corpus length is not a whole number of u16 tokens",
        )
        .in_file(path));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(order: usize) -> MarkovSpec {
        MarkovSpec {
            vocab: 50,
            order,
            branching: 3,
            sharpness: 1.0,
            seed: 4,
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = spec(2).generate(500).unwrap();
        assert_eq!(a, spec(2).generate(500).unwrap());
        assert!(a.iter().all(|&t| (t as usize) < 50));
        let other = MarkovSpec { seed: 5, ..spec(2) }.generate(500).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn successors_are_restricted_to_branching_set() {
        let s = spec(1);
        let toks = s.generate(3000).unwrap();
        for w in toks.windows(2) {
            let (succ, _) = s.successors(&w[..1]);
            assert!(succ.contains(&w[1]));
        }
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.u16");
        let toks = vec![0u16, 1, 65535, 300];
        write_corpus(&path, &toks).unwrap();
        assert_eq!(fs::read(&path).unwrap(), vec![0, 0, 1, 0, 255, 255, 44, 1]);
        assert_eq!(read_corpus(&path).unwrap(), toks);
        fs::write(&path, [1u8, 2, 3]).unwrap();
        assert!(read_corpus(&path).is_err());
    }

    #[test]
    fn sequence_split() {
        let s = split_sequences(&[1, 2, 3, 4, 5], 2).unwrap();
        assert_eq!(s, vec![vec![1, 2], vec![3, 4], vec![5]]);
        assert!(split_sequences(&[1], 0).is_err());
    }
}
