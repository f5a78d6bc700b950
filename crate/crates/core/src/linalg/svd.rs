use crate::error::{Error, Result};
use crate::linalg::{canonical_sign_flips, DenseMatrix};
use crate::scalar::Real;

const MAX_SWEEPS: usize = 100;

/// Thin singular value decomposition `A = U · diag(σ) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult<T> {
    /// `rows × r`, orthonormal columns.
    pub u: DenseMatrix<T>,
    /// Non-negative, descending, length `r = min(rows, cols)`.
    pub sigma: Vec<T>,
    /// `cols × r`, orthonormal columns.
    pub v: DenseMatrix<T>,
}

impl<T: Real> SvdResult<T> {
    pub fn reconstruct(&self) -> DenseMatrix<T> {
        let (m, n) = (self.u.rows(), self.v.rows());
        DenseMatrix::from_fn(m, n, |i, j| {
            self.sigma
                .iter()
                .enumerate()
                .map(|(k, &s)| self.u[(i, k)] * s * self.v[(j, k)])
                .sum()
        })
    }
}

/// Direct thin SVD by one-sided (Hestenes) Jacobi orthogonalization.
///
/// Works on the columns of `A` itself rather than on `AᵀA`, so it shares no
/// code path with [`sym_eigh`](crate::linalg::sym_eigh) and serves as an
/// independent reference for the Gram-matrix route. Left singular vectors for
/// `σ ≤ 1e-12·σ_max` are filled by orthogonal completion. `V` columns follow
/// the same sign convention as `sym_eigh`; `U` is flipped to match.
pub fn svd_direct<T: Real>(a: &DenseMatrix<T>) -> Result<SvdResult<T>> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::invalid(format!(
            "svd of an empty {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose())?;
        // Aᵀ = U Σ Vᵀ  ⇒  A = V Σ Uᵀ; re-canonicalize on the new V.
        let mut out = SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
        canonicalize_pair(&mut out.v, &mut out.u);
        return Ok(out);
    }
    svd_tall(a)
}

fn svd_tall<T: Real>(a: &DenseMatrix<T>) -> Result<SvdResult<T>> {
    let (m, n) = a.shape();
    // Column-major working copies: cols[j] is column j of A·V.
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<T>> = (0..n)
        .map(|j| {
            (0..n)
                .map(|i| if i == j { T::one() } else { T::zero() })
                .collect()
        })
        .collect();
    let eps = T::epsilon();
    let tol = eps * T::of(m as f64).sqrt();

    let mut sweeps = 0;
    loop {
        let mut worst = T::zero();
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == T::zero() {
                    continue;
                }
                let denom = (alpha * beta).sqrt();
                let coupling = gamma.abs() / denom;
                worst = worst.max(coupling);
                if coupling <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = {
                    let t = T::one() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                    if zeta < T::zero() {
                        -t
                    } else {
                        t
                    }
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
        sweeps += 1;
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                algorithm: "one-sided jacobi svd",
                sweeps,
                residual: worst.as_f64(),
            });
        }
    }

    let norms: Vec<T> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));
    let sigma: Vec<T> = order.iter().map(|&i| norms[i]).collect();
    let sigma_max = sigma[0];
    let cutoff = T::of(1e-12) * sigma_max;

    let mut ucols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &i) in order.iter().enumerate() {
        if sigma[slot] > cutoff && sigma[slot] > T::zero() {
            let inv = T::one() / sigma[slot];
            ucols.push(cols[i].iter().map(|&x| x * inv).collect());
        } else {
            ucols.push(vec![T::zero(); m]);
            missing.push(slot);
        }
    }
    complete_orthonormal(&mut ucols, &missing);

    let mut u = DenseMatrix::from_fn(m, n, |i, j| ucols[j][i]);
    let mut v = DenseMatrix::from_fn(n, n, |i, j| vcols[order[j]][i]);
    canonicalize_pair(&mut v, &mut u);
    Ok(SvdResult { u, sigma, v })
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn rotate_pair<T: Real>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills `cols[slot]` for each missing slot with a unit vector orthogonal to
/// every other column, drawn from the standard basis by Gram–Schmidt.
fn complete_orthonormal<T: Real>(cols: &mut [Vec<T>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = cols[0].len();
    let mut filled: Vec<bool> = vec![true; cols.len()];
    for &slot in missing {
        filled[slot] = false;
    }
    let mut basis = 0;
    for &slot in missing {
        loop {
            assert!(basis < m, "orthogonal completion ran out of basis vectors");
            let mut cand = vec![T::zero(); m];
            cand[basis] = T::one();
            basis += 1;
            // Two passes of Gram–Schmidt for numerical orthogonality.
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if !filled[j] {
                        continue;
                    }
                    let proj = dot(&cand, col);
                    for (c, &x) in cand.iter_mut().zip(col) {
                        *c -= proj * x;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > T::of(0.5) {
                cols[slot] = cand.into_iter().map(|x| x / norm).collect();
                filled[slot] = true;
                break;
            }
        }
    }
}

fn canonicalize_pair<T: Real>(v: &mut DenseMatrix<T>, u: &mut DenseMatrix<T>) {
    for (j, flip) in canonical_sign_flips(v).into_iter().enumerate() {
        if flip {
            for i in 0..v.rows() {
                v[(i, j)] = -v[(i, j)];
            }
            for i in 0..u.rows() {
                u[(i, j)] = -u[(i, j)];
            }
        }
    }
}
