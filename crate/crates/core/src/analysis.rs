//! Dataset-level singular spectra from a streaming Gram-matrix accumulator.
//!
//! For activations `K` (tokens × d), `KᵀK = V Σ² Vᵀ`, so the right singular
//! vectors and singular values of `K` are recovered exactly from the
//! eigendecomposition of the d×d Gram matrix. The accumulator only ever holds
//! that d×d matrix, however many tokens flow through it, and two
//! accumulators over disjoint token sets merge by addition.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result, ResultExt};
use crate::linalg::{sym_eigh, DenseMatrix};
use crate::scalar::Real;
use crate::stream::{batch_iter, read_stream, tmp_path, BatchChunk};
use crate::Kind;

pub const DEFAULT_RANK_TOL: f64 = 1e-10;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KVCK";
pub const SPECTRUM_MAGIC: [u8; 4] = *b"KVCS";
const FORMAT_VERSION: u32 = 1;

/// Running `Σ_t k_tᵀ k_t` over every ingested row.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceAccumulator<T> {
    dim: usize,
    gram: DenseMatrix<T>,
    tokens_seen: u64,
}

impl<T: Real> CovarianceAccumulator<T> {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("accumulator dimension must be at least 1"));
        }
        Ok(Self {
            dim,
            gram: DenseMatrix::zeros(dim, dim),
            tokens_seen: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gram(&self) -> &DenseMatrix<T> {
        &self.gram
    }

    pub fn tokens_seen(&self) -> u64 {
        self.tokens_seen
    }

    /// Adds `rowsᵀ · rows`. Only the upper triangle is summed and then
    /// mirrored, so the Gram matrix stays exactly symmetric.
    pub fn ingest_rows(&mut self, rows: &DenseMatrix<T>) -> Result<()> {
        if rows.cols() != self.dim {
            return Err(Error::shape(
                "ingest_batch",
                rows.shape(),
                (self.dim, self.dim),
            ));
        }
        let n = self.dim;
        let g = self.gram.as_mut_slice();
        for r in 0..rows.rows() {
            let row = rows.row(r);
            for i in 0..n {
                let ri = row[i];
                if ri == T::zero() {
                    continue;
                }
                let gi = &mut g[i * n..(i + 1) * n];
                for j in i..n {
                    gi[j] += ri * row[j];
                }
            }
        }
        self.gram.mirror_upper();
        self.tokens_seen += rows.rows() as u64;
        Ok(())
    }

    pub fn ingest_batch(&mut self, chunk: &BatchChunk<T>) -> Result<()> {
        self.ingest_rows(&chunk.matrix)
    }

    pub fn ingest_row(&mut self, row: &[T]) -> Result<()> {
        self.ingest_rows(&DenseMatrix::from_vec(1, row.len(), row.to_vec())?)
    }

    /// Sum of two accumulators over disjoint token sets.
    pub fn merge(mut self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::shape(
                "merge",
                (self.dim, self.dim),
                (other.dim, other.dim),
            ));
        }
        for (a, &b) in self
            .gram
            .as_mut_slice()
            .iter_mut()
            .zip(other.gram.as_slice())
        {
            *a += b;
        }
        self.tokens_seen += other.tokens_seen;
        Ok(self)
    }

    /// Eigendecomposes the Gram matrix into singular values and right
    /// singular vectors. `rank_tol` is relative to `σ_max`.
    pub fn finalize(
        &self,
        layer_index: u32,
        kind: Kind,
        rank_tol: f64,
    ) -> Result<SpectralResult<T>> {
        if !(rank_tol > 0.0 && rank_tol < 1.0) {
            return Err(Error::invalid(format!(
                "rank_tol must lie in (0, 1), got {rank_tol}"
            )));
        }
        let eig = sym_eigh(&self.gram)?;
        let floor = gram_noise_floor::<T>(self.dim(), self.tokens_seen)
            * eig.eigenvalues.first().copied().unwrap_or_else(T::zero);
        let sigma: Vec<T> = eig
            .eigenvalues
            .iter()
            .map(|&l| if l > floor { l.sqrt() } else { T::zero() })
            .collect();
        let numerical_rank = numerical_rank(&sigma, rank_tol);
        Ok(SpectralResult {
            layer_index,
            kind,
            sigma,
            v: eig.eigenvectors,
            tokens_seen: self.tokens_seen,
            numerical_rank,
            rank_tol,
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(20 + self.dim * self.dim * 8);
        bytes.extend_from_slice(&CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
        bytes.extend_from_slice(&self.tokens_seen.to_le_bytes());
        for &x in self.gram.as_slice() {
            bytes.extend_from_slice(&x.as_f64().to_le_bytes());
        }
        write_atomic(path, &bytes)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).in_file(path)?;
        let mut r = ByteReader::new(&bytes);
        r.magic(&CHECKPOINT_MAGIC).in_file(path)?;
        r.version().in_file(path)?;
        let dim = r.u32().in_file(path)? as usize;
        let tokens_seen = r.u64().in_file(path)?;
        let data = r.f64s::<T>(dim * dim).in_file(path)?;
        r.finish().in_file(path)?;
        let gram = DenseMatrix::from_vec(dim, dim, data).in_file(path)?;
        let mut acc = Self::new(dim).in_file(path)?;
        acc.gram = gram;
        acc.tokens_seen = tokens_seen;
        Ok(acc)
    }
}

/// Relative size, against `λ_max`, below which Gram eigenvalues are rounding
/// noise: summation error grows like `√tokens·ε`, the eigensolver's like
/// `dim·ε`. Such eigenvalues are reported as exact zeros.
pub fn gram_noise_floor<T: Real>(dim: usize, tokens: u64) -> T {
    T::of(dim as f64 + (tokens as f64).sqrt()) * T::epsilon()
}

/// Number of singular values above `rank_tol · σ_max`; zero for a zero spectrum.
pub fn numerical_rank<T: Real>(sigma: &[T], rank_tol: f64) -> usize {
    match sigma.first() {
        Some(&top) if top > T::zero() => {
            let cut = T::of(rank_tol) * top;
            sigma.iter().filter(|&&s| s > cut).count()
        }
        _ => 0,
    }
}

/// Singular spectrum and right singular vectors for one (layer, kind).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResult<T> {
    pub layer_index: u32,
    pub kind: Kind,
    /// Descending, non-negative, one per feature dimension.
    pub sigma: Vec<T>,
    /// `dim × dim`, orthonormal columns paired with `sigma`.
    pub v: DenseMatrix<T>,
    pub tokens_seen: u64,
    pub numerical_rank: usize,
    pub rank_tol: f64,
}

impl<T: Real> SpectralResult<T> {
    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    /// The leading `k` right singular vectors as a `dim × k` matrix.
    pub fn leading_vectors(&self, k: usize) -> DenseMatrix<T> {
        self.v.leading_columns(k)
    }

    /// Binary `KVCS` file: magic, version u32, layer u32, kind u8, pad u8×3,
    /// dim u32, numerical_rank u32, tokens_seen u64, rank_tol f64, then sigma
    /// (dim f64) and v (dim² f64 row-major), all little-endian.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let dim = self.dim();
        let mut bytes = Vec::with_capacity(40 + (dim + dim * dim) * 8);
        bytes.extend_from_slice(&SPECTRUM_MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&self.layer_index.to_le_bytes());
        bytes.extend_from_slice(&[self.kind.code(), 0, 0, 0]);
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.numerical_rank as u32).to_le_bytes());
        bytes.extend_from_slice(&self.tokens_seen.to_le_bytes());
        bytes.extend_from_slice(&self.rank_tol.to_le_bytes());
        for &s in &self.sigma {
            bytes.extend_from_slice(&s.as_f64().to_le_bytes());
        }
        for &x in self.v.as_slice() {
            bytes.extend_from_slice(&x.as_f64().to_le_bytes());
        }
        write_atomic(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).in_file(path)?;
        Self::decode(&bytes).in_file(path)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(&SPECTRUM_MAGIC)?;
        r.version()?;
        let layer_index = r.u32()?;
        let at = r.pos;
        let kind_code = r.bytes(4)?[0];
        let kind = Kind::from_code(kind_code)
            .ok_or_else(|| Error::format(at as u64, format!("unknown kind code {kind_code}")))?;
        let dim = r.u32()? as usize;
        let numerical_rank = r.u32()? as usize;
        let tokens_seen = r.u64()?;
        let rank_tol = r.f64s::<f64>(1)?[0];
        let sigma = r.f64s::<T>(dim)?;
        let v = r.f64s::<T>(dim * dim)?;
        r.finish()?;
        Ok(Self {
            layer_index,
            kind,
            sigma,
            v: DenseMatrix::from_vec(dim, dim, v)?,
            tokens_seen,
            numerical_rank,
            rank_tol,
        })
    }
}

/// `layer{L}_{key|value}.kvcs`
pub fn spectrum_file_name(layer: u32, kind: Kind) -> String {
    format!("layer{layer}_{kind}.kvcs")
}

/// Streams a `KVCR` file through a fresh accumulator and finalizes it.
pub fn analyze_stream<T: Real>(
    path: impl AsRef<Path>,
    batch_size: usize,
    rank_tol: f64,
) -> Result<SpectralResult<T>> {
    let stream = read_stream(path)?;
    let header = *stream.header();
    let mut acc = CovarianceAccumulator::<T>::new(header.feature_dim as usize)?;
    for chunk in batch_iter::<T>(stream, batch_size)? {
        acc.ingest_batch(&chunk?)?;
    }
    acc.finalize(header.layer_index, header.kind, rank_tol)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    let result = (|| -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(bytes)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.in_file(path)
}

/// Little-endian cursor with offset-tagged errors.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                expected: (self.pos as u64).saturating_add(n as u64),
                actual: self.bytes.len() as u64,
            }),
        }
    }

    pub(crate) fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.bytes(4)?;
        if got != want {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    got,
                    String::from_utf8_lossy(want)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self) -> Result<()> {
        let at = self.pos as u64;
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let start = self.pos as u64;
        let raw = self.bytes(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(start, "length overflow"))?,
        )?;
        raw.chunks_exact(8)
            .enumerate()
            .map(|(i, w)| {
                let x = f64::from_le_bytes(w.try_into().unwrap());
                if x.is_finite() {
                    Ok(T::of(x))
                } else {
                    Err(Error::format(start + 8 * i as u64, "non-finite value"))
                }
            })
            .collect()
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let start = self.pos as u64;
        let raw = self.bytes(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(start, "length overflow"))?,
        )?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(i, w)| {
                let x = f32::from_le_bytes(w.try_into().unwrap());
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(Error::format(start + 4 * i as u64, "non-finite value"))
                }
            })
            .collect()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if !self.is_empty() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
