//! Data-dependent optimal low-rank projections.
//!
//! Given the right singular vectors `V` of `K = X·W`, the rank-k matrix
//! `W·V_k·V_kᵀ` minimizes `‖X·W − X·W̃‖` over all rank-k `W̃`, because
//! `X·W·V_k·V_kᵀ = U_k·Σ_k·V_kᵀ` is the truncated SVD of `K`. It is shipped
//! as a down-projection `W·V_k` (whose k-dim outputs are what gets cached)
//! and an up-projection `V_kᵀ`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::analysis::{write_atomic, ByteReader, SpectralResult};
use crate::error::{Error, Result, ResultExt};
use crate::linalg::{svd_direct, sym_eigh, DenseMatrix};
use crate::scalar::Real;
use crate::Kind;

pub const FACTOR_MAGIC: [u8; 4] = *b"KVCF";
const FACTOR_VERSION: u32 = 1;

/// Largest instance [`verify_optimality`] accepts.
pub const MAX_AUDIT_ROWS: usize = 1024;

/// How much of the feature width to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankSpec {
    /// Absolute rank in `1..=dim`.
    Rank(usize),
    /// Fraction in `(0, 1]`; `k = ceil(ratio · dim)`.
    Ratio(f64),
}

impl RankSpec {
    pub fn resolve(self, dim: usize) -> Result<usize> {
        match self {
            RankSpec::Rank(k) if (1..=dim).contains(&k) => Ok(k),
            RankSpec::Rank(k) => Err(Error::invalid(format!("rank {k} outside 1..={dim}"))),
            RankSpec::Ratio(r) if r > 0.0 && r <= 1.0 => {
                let x = r * dim as f64;
                // 0.3·10 is 3.0000000000000004 in binary; snap near-integers
                // before taking the ceiling.
                let k = if (x - x.round()).abs() <= 1e-9 * dim as f64 {
                    x.round()
                } else {
                    x.ceil()
                };
                Ok((k as usize).clamp(1, dim))
            }
            RankSpec::Ratio(r) => Err(Error::invalid(format!("retain ratio {r} outside (0, 1]"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Frobenius,
    Spectral,
}

/// Down/up projection pair replacing one projection weight `W` (`d_e × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionFactors<T> {
    pub layer_index: u32,
    pub kind: Kind,
    pub rank: usize,
    /// `d_e × k`, equal to `W·V_k`.
    pub down: DenseMatrix<T>,
    /// `k × d`, equal to `V_kᵀ`; rows are orthonormal.
    pub up: DenseMatrix<T>,
    pub retain_ratio: f64,
}

impl<T: Real> CompressionFactors<T> {
    pub fn input_dim(&self) -> usize {
        self.down.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.up.cols()
    }

    /// `down · up`, the rank-k replacement for `W`.
    pub fn reconstruct(&self) -> DenseMatrix<T> {
        self.down.matmul(&self.up).expect("factor shapes agree")
    }

    /// `x · down`, the k-dim vectors a compressed cache stores.
    pub fn latent(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        x.matmul(&self.down)
    }

    /// `x · down · up`.
    pub fn apply(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        self.latent(x)?.matmul(&self.up)
    }

    /// Binary `KVCF` file; factors are stored as `f32`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (de, d, k) = (self.input_dim(), self.output_dim(), self.rank);
        let mut bytes = Vec::with_capacity(32 + (de * k + k * d) * 4);
        bytes.extend_from_slice(&FACTOR_MAGIC);
        bytes.extend_from_slice(&FACTOR_VERSION.to_le_bytes());
        bytes.extend_from_slice(&self.layer_index.to_le_bytes());
        bytes.extend_from_slice(&[self.kind.code(), 0, 0, 0]);
        for n in [de, d, k] {
            bytes.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for m in [&self.down, &self.up] {
            for &x in m.as_slice() {
                let v = x.as_f32();
                if !v.is_finite() {
                    return Err(
                        Error::invalid("factor value does not fit in f32").in_file(path.as_ref())
                    );
                }
                bytes.extend_from_slice(&v.to_le_bytes());
            }
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
        r.magic(&FACTOR_MAGIC)?;
        let at = r.pos as u64;
        let version = r.u32()?;
        if version != FACTOR_VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let layer_index = r.u32()?;
        let at = r.pos as u64;
        let code = r.u8()?;
        let kind = Kind::from_code(code)
            .ok_or_else(|| Error::format(at, format!("unknown kind code {code}")))?;
        r.bytes(3)?;
        let de = r.u32()? as usize;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        if k == 0 || k > d {
            return Err(Error::format(24, format!("rank {k} outside 1..={d}")));
        }
        let lift = |v: Vec<f32>| v.into_iter().map(T::of_f32).collect::<Vec<_>>();
        let down = DenseMatrix::from_vec(de, k, lift(r.f32s(de * k)?))?;
        let up = DenseMatrix::from_vec(k, d, lift(r.f32s(k * d)?))?;
        r.finish()?;
        Ok(Self {
            layer_index,
            kind,
            rank: k,
            down,
            up,
            retain_ratio: k as f64 / d as f64,
        })
    }
}

/// `layer{L}_{key|value}_k{K}.kvcf`
pub fn factor_file_name(layer: u32, kind: Kind, k: usize) -> String {
    format!("layer{layer}_{kind}_k{k}.kvcf")
}

/// Builds `down = W·V_k`, `up = V_kᵀ` from a spectrum of `X·W`.
pub fn build_factors<T: Real>(
    w: &DenseMatrix<T>,
    spectrum: &SpectralResult<T>,
    retain: RankSpec,
) -> Result<CompressionFactors<T>> {
    let dim = spectrum.dim();
    if w.cols() != dim {
        return Err(Error::shape("build_factors", w.shape(), spectrum.v.shape()));
    }
    let k = retain.resolve(dim)?;
    let vk = spectrum.leading_vectors(k);
    Ok(CompressionFactors {
        layer_index: spectrum.layer_index,
        kind: spectrum.kind,
        rank: k,
        down: w.matmul(&vk)?,
        up: vk.transpose(),
        retain_ratio: k as f64 / dim as f64,
    })
}

/// Minimal rank-k approximation error implied by the spectrum alone.
pub fn predicted_error<T: Real>(spectrum: &SpectralResult<T>, k: usize, norm: Norm) -> Result<T> {
    let dim = spectrum.dim();
    if !(1..=dim).contains(&k) {
        return Err(Error::invalid(format!("rank {k} outside 1..={dim}")));
    }
    Ok(match norm {
        Norm::Spectral if k >= spectrum.numerical_rank => T::zero(),
        Norm::Spectral => spectrum.sigma[k],
        // An empty float sum is -0.0; fold from +0.
        Norm::Frobenius => spectrum.sigma[k..]
            .iter()
            .fold(T::zero(), |acc, &s| acc + s * s)
            .sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompressionReport {
    pub frobenius_error: f64,
    pub spectral_error: f64,
    /// `frobenius_error / ‖X·W‖_F`.
    pub relative_error: f64,
    /// Fraction of `‖X·W‖_F²` kept by the rank-k reconstruction.
    pub retained_energy: f64,
}

/// Accumulates reconstruction residuals row by row, so error measurement
/// runs in `O(d²)` memory over arbitrarily long streams.
pub struct ErrorMeter<'a, T> {
    factors: &'a CompressionFactors<T>,
    residual_sq: T,
    original_sq: T,
    residual_gram: DenseMatrix<T>,
    rows: u64,
}

impl<'a, T: Real> ErrorMeter<'a, T> {
    pub fn new(factors: &'a CompressionFactors<T>) -> Self {
        let d = factors.output_dim();
        Self {
            factors,
            residual_sq: T::zero(),
            original_sq: T::zero(),
            residual_gram: DenseMatrix::zeros(d, d),
            rows: 0,
        }
    }

    /// Rows of `X` together with the original weight `W`.
    pub fn ingest_inputs(&mut self, x: &DenseMatrix<T>, w: &DenseMatrix<T>) -> Result<()> {
        if w.shape() != (self.factors.input_dim(), self.factors.output_dim()) {
            return Err(Error::shape(
                "measured_error",
                w.shape(),
                (self.factors.input_dim(), self.factors.output_dim()),
            ));
        }
        let exact = x.matmul(w)?;
        let approx = self.factors.apply(x)?;
        self.ingest_pair(&exact, &approx)
    }

    /// Rows of `K = X·W` directly. Since `X·down·up = K·V_k·V_kᵀ`, the
    /// reconstruction only needs `up`.
    pub fn ingest_projected(&mut self, k: &DenseMatrix<T>) -> Result<()> {
        if k.cols() != self.factors.output_dim() {
            return Err(Error::shape(
                "measured_error",
                k.shape(),
                self.factors.up.shape(),
            ));
        }
        let approx = k
            .matmul(&self.factors.up.transpose())?
            .matmul(&self.factors.up)?;
        self.ingest_pair(k, &approx)
    }

    fn ingest_pair(&mut self, exact: &DenseMatrix<T>, approx: &DenseMatrix<T>) -> Result<()> {
        let resid = exact.sub(approx)?;
        self.residual_sq += resid.as_slice().iter().map(|&r| r * r).sum::<T>();
        self.original_sq += exact.as_slice().iter().map(|&r| r * r).sum::<T>();
        let g = resid.gram();
        for (a, &b) in self
            .residual_gram
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
        {
            *a += b;
        }
        self.rows += exact.rows() as u64;
        Ok(())
    }

    pub fn finish(self, spectrum: Option<&SpectralResult<T>>) -> Result<CompressionReport> {
        if self.rows == 0 {
            return Err(Error::invalid(
                "cannot measure compression error on an empty stream",
            ));
        }
        let frob = self.residual_sq.sqrt().as_f64();
        let norm = self.original_sq.sqrt().as_f64();
        let eig = sym_eigh(&self.residual_gram)?;
        let spectral = eig
            .eigenvalues
            .first()
            .map_or(0.0, |l| l.max(T::zero()).sqrt().as_f64());
        let retained_energy = match spectrum {
            Some(s) => {
                let total: f64 = s.sigma.iter().map(|x| x.as_f64().powi(2)).sum();
                let kept: f64 = s.sigma[..self.factors.rank]
                    .iter()
                    .map(|x| x.as_f64().powi(2))
                    .sum();
                if total > 0.0 {
                    kept / total
                } else {
                    1.0
                }
            }
            None if norm > 0.0 => 1.0 - (frob / norm).powi(2),
            None => 1.0,
        };
        Ok(CompressionReport {
            frobenius_error: frob,
            spectral_error: spectral,
            relative_error: if norm > 0.0 { frob / norm } else { 0.0 },
            retained_energy: retained_energy.clamp(0.0, 1.0),
        })
    }
}

/// `‖X·W − X·down·up‖` for an in-memory `X`.
pub fn measured_error<T: Real>(
    x: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    factors: &CompressionFactors<T>,
    spectrum: Option<&SpectralResult<T>>,
) -> Result<CompressionReport> {
    let mut meter = ErrorMeter::new(factors);
    meter.ingest_inputs(x, w)?;
    meter.finish(spectrum)
}

/// `‖XW − XW·Q·Qᵀ‖_F` for an orthonormal basis `Q` (`d × k`).
pub fn projection_error<T: Real>(
    x: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    basis: &DenseMatrix<T>,
) -> Result<T> {
    let k = x.matmul(w)?;
    let approx = k.matmul(basis)?.matmul(&basis.transpose())?;
    Ok(k.sub(&approx)?.frobenius_norm())
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimalityReport {
    pub rank: usize,
    pub trials: usize,
    pub optimal_error: f64,
    /// Error of the data-independent truncated SVD of `W`.
    pub baseline_error: f64,
    pub baseline_margin: f64,
    pub min_margin: f64,
    pub mean_margin: f64,
    pub max_margin: f64,
}

/// Tolerance on `error(factors) ≤ error(alternative) + tol`.
pub const OPTIMALITY_TOL: f64 = 1e-9;

/// Randomized audit of rank-k optimality.
///
/// Compares the factors' error against `trials` alternative rank-k
/// projections `W·Q·Qᵀ` (odd trials draw `Q` uniformly, even trials perturb
/// the optimal subspace so the audit also probes its neighbourhood) and
/// against the truncated SVD of `W` itself. Alternative `i` is seeded with
/// `seed + i`; the first one that wins by more than [`OPTIMALITY_TOL`] is
/// returned as an error.
pub fn verify_optimality<T: Real>(
    x: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    factors: &CompressionFactors<T>,
    trials: usize,
    seed: u64,
) -> Result<OptimalityReport> {
    if x.rows() > MAX_AUDIT_ROWS {
        return Err(Error::invalid(format!(
            "optimality audit limited to {MAX_AUDIT_ROWS} rows, got {}",
            x.rows()
        )));
    }
    let k = factors.rank;
    let d = factors.output_dim();
    let optimal = projection_error(x, w, &factors.up.transpose())?;

    let mut margins = Vec::with_capacity(trials);
    for i in 0..trials {
        let alt_seed = seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(alt_seed);
        let q = if i % 2 == 1 {
            random_orthonormal::<T>(d, k, &mut rng)
        } else {
            let scale = T::of(10f64.powf(-3.0 + 2.0 * (i as f64 / trials.max(1) as f64)));
            let vk = factors.up.transpose();
            let noise = gaussian::<T>(d, k, &mut rng).scale(scale);
            orthonormalize(&vk.add(&noise)?)
        };
        let err = projection_error(x, w, &q)?;
        let margin = (err - optimal).as_f64();
        if margin < -OPTIMALITY_TOL {
            return Err(Error::OptimalityViolation {
                seed: alt_seed,
                rank: k,
                margin: -margin,
            });
        }
        margins.push(margin);
    }

    let w_svd = svd_direct(w)?;
    let baseline_basis = w_svd.v.leading_columns(k.min(w_svd.v.cols()));
    let baseline = projection_error(x, w, &baseline_basis)?;
    let baseline_margin = (baseline - optimal).as_f64();
    if baseline_margin < -OPTIMALITY_TOL {
        return Err(Error::OptimalityViolation {
            seed,
            rank: k,
            margin: -baseline_margin,
        });
    }

    let (min, max, sum) = margins.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, 0.0),
        |(lo, hi, s), &m| (lo.min(m), hi.max(m), s + m),
    );
    Ok(OptimalityReport {
        rank: k,
        trials,
        optimal_error: optimal.as_f64(),
        baseline_error: baseline.as_f64(),
        baseline_margin,
        min_margin: if trials > 0 { min } else { 0.0 },
        mean_margin: if trials > 0 { sum / trials as f64 } else { 0.0 },
        max_margin: if trials > 0 { max } else { 0.0 },
    })
}

fn gaussian<T: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix<T> {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z)
    })
}

fn random_orthonormal<T: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix<T> {
    orthonormalize(&gaussian(rows, cols, rng))
}

/// Modified Gram–Schmidt with one re-orthogonalization pass.
fn orthonormalize<T: Real>(a: &DenseMatrix<T>) -> DenseMatrix<T> {
    let (n, k) = a.shape();
    let mut cols: Vec<Vec<T>> = (0..k).map(|j| a.column(j)).collect();
    for j in 0..k {
        for _ in 0..2 {
            for i in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let proj: T = done[i].iter().zip(&rest[0]).map(|(&p, &q)| p * q).sum();
                for (c, &p) in rest[0].iter_mut().zip(&done[i]) {
                    *c -= proj * p;
                }
            }
        }
        let norm = cols[j].iter().map(|&x| x * x).sum::<T>().sqrt();
        for c in cols[j].iter_mut() {
            *c /= norm;
        }
    }
    DenseMatrix::from_fn(n, k, |i, j| cols[j][i])
}
