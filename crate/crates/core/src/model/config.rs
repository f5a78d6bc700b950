use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding (residual stream) width.
    pub d_e: usize,
    pub n_layers: usize,
    /// Query heads.
    pub m_h: usize,
    /// Key/value groups; `m_h` must be a multiple of it.
    pub m_g: usize,
    /// Per-head width.
    pub d_h: usize,
    pub vocab: usize,
    /// MLP hidden width.
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_e: 64,
            n_layers: 2,
            m_h: 8,
            m_g: 2,
            d_h: 8,
            vocab: 256,
            d_ff: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_e", self.d_e),
            ("n_layers", self.n_layers),
            ("m_h", self.m_h),
            ("m_g", self.m_g),
            ("d_h", self.d_h),
            ("vocab", self.vocab),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!(
                "model dimension {name} must be at least 1"
            )));
        }
        if !self.m_h.is_multiple_of(self.m_g) {
            return Err(Error::invalid(format!(
                "m_h = {} is not a multiple of m_g = {}",
                self.m_h, self.m_g
            )));
        }
        if self.vocab > u16::MAX as usize + 1 {
            return Err(Error::invalid(format!(
                "vocab {} exceeds u16 token ids",
                self.vocab
            )));
        }
        Ok(())
    }

    /// Query width `m_h · d_h`.
    pub fn q_dim(&self) -> usize {
        self.m_h * self.d_h
    }

    /// Key/value cache width `m_g · d_h`.
    pub fn kv_dim(&self) -> usize {
        self.m_g * self.d_h
    }

    pub fn heads_per_group(&self) -> usize {
        self.m_h / self.m_g
    }

    /// 0-based group of 0-based head `i`.
    pub(crate) fn group_of(&self, head: usize) -> usize {
        head / self.heads_per_group()
    }
}

/// Head-to-group map `g(i) = ⌈i / (m_h / m_g)⌉`, 1-based on both sides.
pub fn group_map(i: usize, m_h: usize, m_g: usize) -> Result<usize> {
    if m_g == 0 || !m_h.is_multiple_of(m_g) {
        return Err(Error::invalid(format!(
            "m_h = {m_h} is not a multiple of m_g = {m_g}"
        )));
    }
    if !(1..=m_h).contains(&i) {
        return Err(Error::invalid(format!("head index {i} outside 1..={m_h}")));
    }
    Ok(i.div_ceil(m_h / m_g))
}
