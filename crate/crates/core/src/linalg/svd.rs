use super::{dot, Matrix};
use crate::error::{Error, Result};
use crate::randsrc::{GaussStream, Seed};

/// Matrices whose smaller side is at most this size go through one-sided
/// Jacobi; larger ones use a randomized range finder first.
pub const JACOBI_MAX_DIM: usize = 64;

const MAX_SWEEPS: usize = 80;
const OVERSAMPLE: usize = 8;
const POWER_ITERS: usize = 2;
const SKETCH_SEED: u64 = 0x5644_5f53_4b45_5443;

/// Truncated singular value decomposition `g ≈ u · diag(s) · vᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdTriple {
    /// m × r, orthonormal columns.
    pub u: Matrix,
    /// r singular values, non-negative and non-increasing.
    pub s: Vec<f64>,
    /// n × r, orthonormal columns.
    pub v: Matrix,
}

impl SvdTriple {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        super::scaled_outer_sum(&self.u, &self.s, &self.v)
            .expect("svd triple frames are conformable by construction")
    }
}

/// Best rank-`r` approximation frames of `g`.
///
/// Exact one-sided Jacobi when `min(rows, cols) <= 64`; otherwise a Gaussian
/// sketch of width `r + 8` with two power iterations, followed by an exact
/// Jacobi SVD of the projected core. Singular values are non-negative with
/// signs carried by `u`.
pub fn truncated_svd(g: &Matrix, r: usize) -> Result<SvdTriple> {
    let (m, n) = g.shape();
    let min_dim = m.min(n);
    if r == 0 || r > min_dim {
        return Err(Error::dim(format!(
            "rank {r} is not in 1..={min_dim} for a {m}x{n} matrix"
        )));
    }
    if !g.is_finite() {
        return Err(Error::Numeric(
            "truncated_svd input has non-finite entries".into(),
        ));
    }
    let full = if min_dim <= JACOBI_MAX_DIM {
        jacobi_svd(g)?
    } else {
        randomized_svd(g, r)?
    };
    Ok(truncate(full, r))
}

fn truncate(full: SvdTriple, r: usize) -> SvdTriple {
    SvdTriple {
        u: full.u.leading_columns(r),
        s: full.s[..r].to_vec(),
        v: full.v.leading_columns(r),
    }
}

/// Thin SVD with min(m, n) components.
fn jacobi_svd(g: &Matrix) -> Result<SvdTriple> {
    if g.rows() >= g.cols() {
        jacobi_tall(g)
    } else {
        let t = jacobi_tall(&g.transpose())?;
        Ok(SvdTriple {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

/// One-sided (Hestenes) Jacobi for m >= n.
fn jacobi_tall(a: &Matrix) -> Result<SvdTriple> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column_vec(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = (m as f64).sqrt() * f64::EPSILON;

    let mut converged = false;
    let mut residual = 0.0f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(ratio);
                if ratio <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNonConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let smax = norms[order[0]];
    let floor = smax * (m.max(n) as f64) * f64::EPSILON;

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sj = norms[j];
        if sj > floor && sj > 0.0 {
            let ucol: Vec<f64> = cols[j].iter().map(|x| x / sj).collect();
            u.set_column(k, &ucol);
            s.push(sj);
        } else {
            deficient.push(k);
            s.push(if sj > floor { sj } else { 0.0 });
        }
        v.set_column(k, &vcols[j]);
    }
    if !deficient.is_empty() {
        complete_basis(&mut u, &deficient);
    }
    Ok(SvdTriple { u, s, v })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every
/// other column.
fn complete_basis(u: &mut Matrix, missing: &[usize]) {
    let (m, k) = u.shape();
    let mut filled: Vec<bool> = vec![true; k];
    for &j in missing {
        filled[j] = false;
    }
    let mut candidate = 0usize;
    for &j in missing {
        loop {
            assert!(candidate < m, "cannot complete an orthonormal basis");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (c, &ok) in filled.iter().enumerate() {
                    if !ok {
                        continue;
                    }
                    let col = u.column_vec(c);
                    let proj = dot(&col, &e);
                    for (x, y) in e.iter_mut().zip(&col) {
                        *x -= proj * y;
                    }
                }
            }
            let nrm = dot(&e, &e).sqrt();
            if nrm > 0.5 {
                e.iter_mut().for_each(|x| *x /= nrm);
                u.set_column(j, &e);
                filled[j] = true;
                break;
            }
        }
    }
}

/// Orthonormal basis for the column space of `a` (same shape). Columns that
/// are numerically dependent are replaced by completing unit vectors, so the
/// result always satisfies `qᵀq = I`.
pub fn orthonormalize_columns(a: &Matrix) -> Matrix {
    let (m, k) = a.shape();
    assert!(k <= m, "cannot orthonormalize {k} columns in dimension {m}");
    let mut q = Matrix::zeros(m, k);
    let mut deficient = Vec::new();
    for j in 0..k {
        let mut col = a.column_vec(j);
        let original = dot(&col, &col).sqrt();
        // Classical Gram-Schmidt, applied twice.
        for _ in 0..2 {
            for c in 0..j {
                if deficient.contains(&c) {
                    continue;
                }
                let qc = q.column_vec(c);
                let proj = dot(&qc, &col);
                for (x, y) in col.iter_mut().zip(&qc) {
                    *x -= proj * y;
                }
            }
        }
        let nrm = dot(&col, &col).sqrt();
        if original > 0.0 && nrm > 1e-10 * original {
            col.iter_mut().for_each(|x| *x /= nrm);
            q.set_column(j, &col);
        } else {
            deficient.push(j);
        }
    }
    if !deficient.is_empty() {
        complete_basis(&mut q, &deficient);
    }
    q
}

fn randomized_svd(a: &Matrix, r: usize) -> Result<SvdTriple> {
    let (m, n) = a.shape();
    let width = (r + OVERSAMPLE).min(m.min(n));
    let mut stream = GaussStream::new(Seed(SKETCH_SEED));
    let omega = stream.gauss_matrix(n, width);
    let mut q = orthonormalize_columns(&a.matmul(&omega)?);
    for _ in 0..POWER_ITERS {
        let w = orthonormalize_columns(&a.t_matmul(&q)?);
        q = orthonormalize_columns(&a.matmul(&w)?);
    }
    // core = qᵀ a is width × n; decompose its transpose (tall).
    let core_t = a.t_matmul(&q)?;
    let small = jacobi_tall(&core_t)?;
    // core_t = U' S V'ᵀ  =>  core = V' S U'ᵀ  =>  a ≈ (q V') S U'ᵀ
    Ok(SvdTriple {
        u: q.matmul(&small.v)?,
        s: small.s,
        v: small.u,
    })
}
