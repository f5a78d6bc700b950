use crate::error::{Error, Result};
use crate::linalg::{canonical_sign_flips, DenseMatrix};
use crate::scalar::Real;

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a real symmetric matrix.
#[derive(Debug, Clone)]
pub struct EigenResult<T> {
    /// Descending.
    pub eigenvalues: Vec<T>,
    /// Orthonormal columns, column `i` paired with `eigenvalues[i]`.
    pub eigenvectors: DenseMatrix<T>,
}

impl<T: Real> EigenResult<T> {
    /// `Q · diag(λ) · Qᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix<T> {
        let q = &self.eigenvectors;
        let n = q.rows();
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = T::zero();
                for (k, &l) in self.eigenvalues.iter().enumerate() {
                    s += q[(i, k)] * l * q[(j, k)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(A + Aᵀ)/2` after checking that its symmetry
/// defect is within `1e-8·‖A‖_max`. Sweeps stop once the largest off-diagonal
/// entry drops below `1e-12·‖A‖_max`. Eigenvalues come back descending and
/// each eigenvector column has its largest-magnitude entry non-negative.
/// Negative eigenvalues within `1e-10·λ_max` of zero are clamped to zero.
pub fn sym_eigh<T: Real>(a: &DenseMatrix<T>) -> Result<EigenResult<T>> {
    if !a.is_square() {
        return Err(Error::shape("sym_eigh", a.shape(), a.shape()));
    }
    let n = a.rows();
    let scale = a.max_abs();
    let defect = a.max_abs_diff(&a.transpose());
    let sym_tol = T::tol(1e-8) * scale;
    if defect > sym_tol {
        return Err(Error::NotSymmetric {
            defect: defect.as_f64(),
            tolerance: sym_tol.as_f64(),
        });
    }

    let half = T::of(0.5);
    let mut m = DenseMatrix::from_fn(n, n, |i, j| (a[(i, j)] + a[(j, i)]) * half);
    let mut q = DenseMatrix::<T>::identity(n);
    let threshold = T::tol(1e-12) * scale;

    let mut converged = scale == T::zero();
    let mut sweeps = 0;
    while !converged {
        if max_off_diagonal(&m) < threshold {
            converged = true;
            break;
        }
        if sweeps == MAX_SWEEPS {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                rotate(&mut m, &mut q, p, r);
            }
        }
        sweeps += 1;
    }
    if !converged {
        return Err(Error::NoConvergence {
            algorithm: "jacobi eigensolver",
            sweeps,
            residual: max_off_diagonal(&m).as_f64(),
        });
    }

    let diag: Vec<T> = (0..n).map(|i| m[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable, so equal eigenvalues keep their diagonal order.
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).expect("finite eigenvalues"));

    let lambda_max = order.first().map_or(T::zero(), |&i| diag[i]);
    let clamp_floor = -T::of(1e-10) * lambda_max.max(T::zero());
    let eigenvalues = order
        .iter()
        .map(|&i| {
            let l = diag[i];
            if l < T::zero() && l >= clamp_floor {
                T::zero()
            } else {
                l
            }
        })
        .collect();
    let mut eigenvectors = DenseMatrix::from_fn(n, n, |i, j| q[(i, order[j])]);
    for (j, flip) in canonical_sign_flips(&eigenvectors).into_iter().enumerate() {
        if flip {
            for i in 0..n {
                eigenvectors[(i, j)] = -eigenvectors[(i, j)];
            }
        }
    }
    Ok(EigenResult {
        eigenvalues,
        eigenvectors,
    })
}

fn max_off_diagonal<T: Real>(m: &DenseMatrix<T>) -> T {
    let n = m.rows();
    let mut best = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            best = best.max(m[(i, j)].abs());
        }
    }
    best
}

/// One Jacobi rotation zeroing `m[p][r]`, accumulated into `q`.
fn rotate<T: Real>(m: &mut DenseMatrix<T>, q: &mut DenseMatrix<T>, p: usize, r: usize) {
    let apr = m[(p, r)];
    if apr == T::zero() {
        return;
    }
    let n = m.rows();
    let app = m[(p, p)];
    let arr = m[(r, r)];
    let theta = (arr - app) / (apr + apr);
    let t = {
        let t = T::one() / (theta.abs() + (theta * theta + T::one()).sqrt());
        if theta < T::zero() {
            -t
        } else {
            t
        }
    };
    let c = T::one() / (t * t + T::one()).sqrt();
    let s = t * c;

    for k in 0..n {
        if k == p || k == r {
            continue;
        }
        let akp = m[(k, p)];
        let akr = m[(k, r)];
        let new_p = c * akp - s * akr;
        let new_r = s * akp + c * akr;
        m[(k, p)] = new_p;
        m[(p, k)] = new_p;
        m[(k, r)] = new_r;
        m[(r, k)] = new_r;
    }
    m[(p, p)] = app - t * apr;
    m[(r, r)] = arr + t * apr;
    m[(p, r)] = T::zero();
    m[(r, p)] = T::zero();

    for k in 0..n {
        let qkp = q[(k, p)];
        let qkr = q[(k, r)];
        q[(k, p)] = c * qkp - s * qkr;
        q[(k, r)] = s * qkp + c * qkr;
    }
}
