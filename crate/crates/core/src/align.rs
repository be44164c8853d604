//! Gradient-aligned perturbations.
//!
//! A perturbation `Z` is corrected so that its Frobenius inner product with
//! the (estimated) gradient equals `ξ·√δ·‖gradient‖`. In the low-rank path the
//! correction happens on the r×r core against the diagonal `S_r`, and the
//! result is lifted back as `U_r·Z·V_rᵀ`.

use crate::error::{Error, Result};
use crate::linalg::{dot, frob_inner, frob_norm, norm2, project_onto_frames, sandwich, Matrix};
use crate::subspace::SubspaceBasis;

/// Gradients with norm at or below this (times `r` in the low-rank path) are
/// treated as zero and leave the perturbation untouched.
pub const NORM_GUARD: f64 = 1e-8;

/// A projected r×r core and its lift.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPerturbation {
    pub low_dim: Matrix,
    pub lifted: Matrix,
    pub xi: f64,
    pub delta: f64,
}

impl AlignedPerturbation {
    pub fn build(z_init: &Matrix, basis: &SubspaceBasis, delta: f64, xi: f64) -> Result<Self> {
        let low_dim = project_lowdim(z_init, &basis.s_matrix(), delta, xi)?;
        let lifted = lift(&low_dim, basis)?;
        Ok(AlignedPerturbation {
            low_dim,
            lifted,
            xi,
            delta,
        })
    }
}

fn check_args(delta: f64, xi: f64) -> Result<()> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Config(format!("delta must be finite and >= 0, got {delta}")));
    }
    if xi != 1.0 && xi != -1.0 {
        return Err(Error::Config(format!("xi must be +1 or -1, got {xi}")));
    }
    Ok(())
}

/// `Z = z_init − α·S_r` with `α = (⟨S_r, z_init⟩ − ξ√δ‖S_r‖) / ‖S_r‖²`, so
/// that `⟨S_r, Z⟩ = ξ√δ‖S_r‖`.
///
/// Returns `z_init` unchanged when `‖S_r‖ ≤ NORM_GUARD·r`.
pub fn project_lowdim(z_init: &Matrix, s_r: &Matrix, delta: f64, xi: f64) -> Result<Matrix> {
    check_args(delta, xi)?;
    let r = s_r.rows();
    if s_r.cols() != r || z_init.shape() != s_r.shape() {
        return Err(Error::dim(format!(
            "project_lowdim needs square cores of equal size, got {:?} and {:?}",
            z_init.shape(),
            s_r.shape()
        )));
    }
    let s_norm = frob_norm(s_r);
    if s_norm <= NORM_GUARD * r as f64 {
        return Ok(z_init.clone());
    }
    let f = frob_inner(s_r, z_init)?;
    let alpha = (f - xi * delta.sqrt() * s_norm) / (s_norm * s_norm);
    let mut z = z_init.clone();
    z.axpy(-alpha, s_r)?;
    Ok(z)
}

/// `U_r · z · V_rᵀ`.
pub fn lift(z: &Matrix, basis: &SubspaceBasis) -> Result<Matrix> {
    let r = basis.rank();
    if z.shape() != (r, r) {
        return Err(Error::dim(format!(
            "cannot lift a {}x{} core through a rank-{r} basis",
            z.rows(),
            z.cols()
        )));
    }
    sandwich(&basis.u_r, z, &basis.v_r)
}

/// Full-space alignment of a matrix perturbation against a gradient matrix.
pub fn align_fullspace_matrix(c_init: &Matrix, grad: &Matrix, delta: f64, xi: f64) -> Result<Matrix> {
    check_args(delta, xi)?;
    let g_norm = frob_norm(grad);
    let f = frob_inner(grad, c_init)?;
    if g_norm <= NORM_GUARD {
        return Ok(c_init.clone());
    }
    let alpha = (f - xi * delta.sqrt() * g_norm) / (g_norm * g_norm);
    let mut c = c_init.clone();
    c.axpy(-alpha, grad)?;
    Ok(c)
}

/// Vector form of [`align_fullspace_matrix`].
pub fn align_fullspace_vector(v_init: &[f64], grad: &[f64], delta: f64, xi: f64) -> Result<Vec<f64>> {
    check_args(delta, xi)?;
    if v_init.len() != grad.len() {
        return Err(Error::dim(format!(
            "vectors of length {} and {} cannot be aligned",
            v_init.len(),
            grad.len()
        )));
    }
    let g_norm = norm2(grad);
    if g_norm <= NORM_GUARD {
        return Ok(v_init.to_vec());
    }
    let alpha = (dot(grad, v_init) - xi * delta.sqrt() * g_norm) / (g_norm * g_norm);
    Ok(v_init
        .iter()
        .zip(grad)
        .map(|(v, g)| v - alpha * g)
        .collect())
}

/// Distance between the low-rank path (project the core, then lift) and the
/// full-space path (lift, then align against `U_r·S_r·V_rᵀ`).
pub fn consistency_check_lowdim_vs_fullspace(
    basis: &SubspaceBasis,
    z_init: &Matrix,
    delta: f64,
    xi: f64,
) -> Result<f64> {
    let s = basis.s_matrix();
    let c_full = lift(z_init, basis)?;
    let low = project_onto_frames(&basis.u_r, &c_full, &basis.v_r)?;
    let via_low = lift(&project_lowdim(&low, &s, delta, xi)?, basis)?;
    let grad = lift(&s, basis)?;
    let via_full = align_fullspace_matrix(&c_full, &grad, delta, xi)?;
    Ok(frob_norm(&via_low.sub(&via_full)?))
}
