//! Streaming spectral analysis and optimal low-rank compression of
//! transformer KV caches.
//!
//! Key/value activations are streamed from disk into a mergeable Gram-matrix
//! accumulator, whose eigendecomposition yields the exact singular spectrum
//! and right singular vectors of the full activation matrix without ever
//! holding it in memory. From the spectrum the crate derives data-dependent
//! rank-k down/up projection pairs, their Eckart–Young error, normalized
//! effective rank, and perplexity-based degradation scores on a built-in toy
//! grouped-query-attention model.

pub mod analysis;
pub mod compression;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod stream;

pub use error::{Error, Result};
pub use scalar::Real;

/// Which half of the KV cache a stream, spectrum or factor pair describes.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Key,
    Value,
}

impl Kind {
    pub const ALL: [Kind; 2] = [Kind::Key, Kind::Value];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Key => "key",
            Kind::Value => "value",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Kind::Key => 0,
            Kind::Value => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Kind::Key),
            1 => Some(Kind::Value),
            _ => None,
        }
    }
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key" | "k" => Ok(Kind::Key),
            "value" | "v" => Ok(Kind::Value),
            other => Err(Error::InvalidArgument(format!("unknown kind {other:?}"))),
        }
    }
}

pub type Matrix = linalg::DenseMatrix<f64>;
pub type MatrixF32 = linalg::DenseMatrix<f32>;
pub type Eigen = linalg::EigenResult<f64>;
pub type Svd = linalg::SvdResult<f64>;
pub type Accumulator = analysis::CovarianceAccumulator<f64>;
pub type Spectrum = analysis::SpectralResult<f64>;
pub type Factors = compression::CompressionFactors<f64>;
pub type Chunk = stream::BatchChunk<f64>;
