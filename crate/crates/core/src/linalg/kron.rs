use super::{norm2, sandwich, Matrix};
use crate::error::{Error, Result};

/// Column-stacking vectorization.
pub fn vec_col_major(a: &Matrix) -> Vec<f64> {
    let (m, n) = a.shape();
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(a.get(i, j));
        }
    }
    out
}

/// Inverse of [`vec_col_major`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(Error::dim(format!(
            "vector of length {} cannot be reshaped to {rows}x{cols}",
            v.len()
        )));
    }
    let mut out = Matrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            out.set(i, j, v[j * rows + i]);
        }
    }
    Ok(out)
}

pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a.get(i, j);
            if aij == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out.set(i * br + k, j * bc + l, aij * b.get(k, l));
                }
            }
        }
    }
    out
}

pub fn block_diag(blocks: &[Matrix]) -> Matrix {
    let rows: usize = blocks.iter().map(Matrix::rows).sum();
    let cols: usize = blocks.iter().map(Matrix::cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for i in 0..b.rows() {
            for j in 0..b.cols() {
                out.set(r0 + i, c0 + j, b.get(i, j));
            }
        }
        r0 += b.rows();
        c0 += b.cols();
    }
    out
}

/// `‖vec(u·z·vᵀ) − (v ⊗ u)·vec(z)‖₂`, computed with an explicit Kronecker
/// product.
pub fn kron_vec_check(u: &Matrix, v: &Matrix, z: &Matrix) -> Result<f64> {
    if u.cols() != z.rows() || v.cols() != z.cols() {
        return Err(Error::dim(format!(
            "frames {}x{} and {}x{} are not conformable with a {}x{} core",
            u.rows(),
            u.cols(),
            v.rows(),
            v.cols(),
            z.rows(),
            z.cols()
        )));
    }
    let lhs = vec_col_major(&sandwich(u, z, v)?);
    let rhs = kron(v, u).matvec(&vec_col_major(z))?;
    let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    Ok(norm2(&diff))
}
