//! Lazily refreshed low-rank gradient subspaces.
//!
//! Every `k` steps, `h` joint Gaussian probes give a rough gradient estimate
//! `G_ℓ` per matrix parameter; its truncated SVD yields the frames used by the
//! aligned perturbations until the next refresh.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::estimator::{two_point_coeff, PerturbPlan};
use crate::linalg::{frob_norm, project_onto_frames, sandwich, truncated_svd, Matrix, SvdTriple};
use crate::objectives::{Batch, LossOracle, ParamKind, ParamSet};
use crate::randsrc::Seed;

/// Rank-r frames of one matrix parameter's estimated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceBasis {
    pub u_r: Matrix,
    pub s_r: Vec<f64>,
    pub v_r: Matrix,
    pub born_at_step: u64,
}

impl SubspaceBasis {
    pub fn new(u_r: Matrix, s_r: Vec<f64>, v_r: Matrix, born_at_step: u64) -> Result<Self> {
        let r = s_r.len();
        if u_r.cols() != r || v_r.cols() != r || r == 0 {
            return Err(Error::dim(format!(
                "frames {}x{} and {}x{} do not match {r} singular values",
                u_r.rows(),
                u_r.cols(),
                v_r.rows(),
                v_r.cols()
            )));
        }
        Ok(SubspaceBasis {
            u_r,
            s_r,
            v_r,
            born_at_step,
        })
    }

    pub fn from_svd(svd: SvdTriple, born_at_step: u64) -> Self {
        SubspaceBasis {
            u_r: svd.u,
            s_r: svd.s,
            v_r: svd.v,
            born_at_step,
        }
    }

    pub fn rank(&self) -> usize {
        self.s_r.len()
    }

    /// Shape `(m, n)` of the parameter this basis belongs to.
    pub fn shape(&self) -> (usize, usize) {
        (self.u_r.rows(), self.v_r.rows())
    }

    /// `S_r` as an r×r diagonal matrix.
    pub fn s_matrix(&self) -> Matrix {
        Matrix::diag(&self.s_r)
    }

    /// Whether the basis may still be consumed at `step` under window `k`.
    pub fn is_fresh(&self, step: u64, k: u64) -> bool {
        step >= self.born_at_step && step - self.born_at_step < k
    }
}

/// Window `k` between refreshes and probe count `h` per refresh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefreshSchedule {
    pub k: u64,
    pub h: usize,
}

impl RefreshSchedule {
    pub fn new(k: u64, h: usize) -> Result<Self> {
        if k == 0 || h == 0 {
            return Err(Error::Config(format!(
                "refresh window and probe count must be >= 1 (k = {k}, h = {h})"
            )));
        }
        Ok(RefreshSchedule { k, h })
    }
}

pub fn should_refresh(schedule: &RefreshSchedule, step: u64) -> bool {
    step.is_multiple_of(schedule.k)
}

/// Probe phase settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub h: usize,
    pub r: usize,
    pub eps: f64,
}

/// Per-parameter probe accumulators `G_ℓ = (1/h)·Σⱼ ρⱼ·Qⱼ_ℓ` (`None` for
/// `Dense` entries) and the shared coefficients `ρⱼ`.
#[derive(Clone, Debug)]
pub struct ProbeAccumulation {
    pub grads: Vec<Option<Matrix>>,
    pub rhos: Vec<f64>,
}

/// Runs the `h` joint probes; exactly `2h` oracle calls.
///
/// Probe `j` perturbs every parameter with the plan seeded by
/// `seed.derive("probe", j)`.
pub fn probe_gradients(
    oracle: &dyn LossOracle,
    params: &ParamSet,
    batch: &Batch,
    h: usize,
    eps: f64,
    seed: Seed,
) -> Result<ProbeAccumulation> {
    if h == 0 {
        return Err(Error::Config("probe count h must be >= 1".into()));
    }
    let mut grads: Vec<Option<Matrix>> = params
        .iter()
        .map(|p| match p.kind() {
            ParamKind::MatrixSubspace => Some(Matrix::zeros(p.tensor.rows(), p.tensor.cols())),
            ParamKind::Dense => None,
        })
        .collect();
    let mut rhos = Vec::with_capacity(h);
    for j in 0..h {
        let plan = PerturbPlan::full_gaussian(params, eps, seed.derive("probe", j as u64))?;
        let rho = two_point_coeff(oracle, params, &plan, batch)?.rho;
        for (i, g) in grads.iter_mut().enumerate() {
            if let Some(g) = g {
                g.axpy(rho / h as f64, &plan.perturbation(params, i)?)?;
            }
        }
        rhos.push(rho);
    }
    Ok(ProbeAccumulation { grads, rhos })
}

/// Probe phase followed by a rank-`r` SVD of every `MatrixSubspace`
/// accumulator. Bases are keyed by parameter name.
pub fn lower_dim_generate(
    oracle: &dyn LossOracle,
    params: &ParamSet,
    batch: &Batch,
    cfg: &ProbeConfig,
    seed: Seed,
    step: u64,
) -> Result<(BTreeMap<String, SubspaceBasis>, Vec<f64>)> {
    for p in params.iter().filter(|p| p.kind() == ParamKind::MatrixSubspace) {
        let (m, n) = p.tensor.shape();
        if cfg.r == 0 || cfg.r > m.min(n) {
            return Err(Error::dim(format!(
                "rank {} does not fit parameter {:?} ({m}x{n})",
                cfg.r,
                p.name()
            )));
        }
    }
    let acc = probe_gradients(oracle, params, batch, cfg.h, cfg.eps, seed)?;
    let mut bases = BTreeMap::new();
    for (p, g) in params.iter().zip(acc.grads) {
        let Some(g) = g else { continue };
        let svd = truncated_svd(&g, cfg.r).map_err(|e| match e {
            Error::SvdNonConvergence { .. } | Error::Numeric(_) => {
                Error::Numeric(format!("subspace SVD for {:?} failed: {e}", p.name()))
            }
            other => other,
        })?;
        bases.insert(p.name().to_string(), SubspaceBasis::from_svd(svd, step));
    }
    Ok((bases, acc.rhos))
}

/// `‖G − U_r U_rᵀ G V_r V_rᵀ‖_F / ‖G‖_F`, or 0 for a zero gradient.
pub fn subspace_capture(basis: &SubspaceBasis, true_grad: &Matrix) -> Result<f64> {
    if true_grad.shape() != basis.shape() {
        return Err(Error::dim(format!(
            "gradient {:?} does not match basis {:?}",
            true_grad.shape(),
            basis.shape()
        )));
    }
    let g_norm = frob_norm(true_grad);
    if g_norm == 0.0 {
        return Ok(0.0);
    }
    let core = project_onto_frames(&basis.u_r, true_grad, &basis.v_r)?;
    let proj = sandwich(&basis.u_r, &core, &basis.v_r)?;
    Ok(frob_norm(&true_grad.sub(&proj)?) / g_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frob_inner, scaled_outer_sum};
    use crate::objectives::{LinearOracle, RankQuadratic};
    use crate::randsrc::{random_orthonormal, GaussStream};

    #[test]
    fn refresh_examples() {
        let s = RefreshSchedule::new(100, 10).unwrap();
        assert!(should_refresh(&s, 0));
        assert!(should_refresh(&s, 100));
        assert!(!should_refresh(&s, 55));
        assert!(RefreshSchedule::new(0, 1).is_err());
        assert!(RefreshSchedule::new(5, 0).is_err());
    }

    #[test]
    fn linear_oracle_single_probe() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 0.0], [0.0, -1.0, 3.0]]);
        let lin = LinearOracle {
            a: a.clone(),
            kind: ParamKind::MatrixSubspace,
        };
        let p = lin.init_params(Seed(0));
        let acc = probe_gradients(&lin, &p, &Batch::empty(), 1, 1e-2, Seed(7)).unwrap();
        let plan = PerturbPlan::full_gaussian(&p, 1e-2, Seed(7).derive("probe", 0)).unwrap();
        let q = plan.perturbation(&p, 0).unwrap();
        let expect = frob_inner(&a, &q).unwrap();
        assert!((acc.rhos[0] - expect).abs() < 1e-10 * expect.abs().max(1.0));
        let g = acc.grads[0].as_ref().unwrap();
        assert!(g.max_abs_diff(&q.scale(acc.rhos[0])) < 1e-15);
    }

    #[test]
    fn exact_rank_reconstruction() {
        let mut s = GaussStream::new(Seed(3));
        let u = random_orthonormal(&mut s, 9, 2);
        let v = random_orthonormal(&mut s, 7, 2);
        let g = scaled_outer_sum(&u, &[4.0, 1.5], &v).unwrap();
        let basis = SubspaceBasis::from_svd(truncated_svd(&g, 2).unwrap(), 0);
        let rec = scaled_outer_sum(&basis.u_r, &basis.s_r, &basis.v_r).unwrap();
        assert!(frob_norm(&rec.sub(&g).unwrap()) <= 1e-8 * frob_norm(&g));
        assert!(subspace_capture(&basis, &g).unwrap() < 1e-10);
    }

    #[test]
    fn capture_orthogonal_is_one() {
        let basis = SubspaceBasis::new(
            Matrix::from_rows(&[[1.0], [0.0]]),
            vec![1.0],
            Matrix::from_rows(&[[1.0], [0.0]]),
            0,
        )
        .unwrap();
        let g = Matrix::from_rows(&[[0.0, 0.0], [0.0, 2.0]]);
        assert!((subspace_capture(&basis, &g).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(subspace_capture(&basis, &Matrix::zeros(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn shared_rho_across_layers() {
        let rq = RankQuadratic::planted(&[(6, 5), (4, 4)], &[2.0, 1.0], Seed(1)).unwrap();
        let p = rq.init_params(Seed(0));
        let acc = probe_gradients(&rq, &p, &Batch::empty(), 3, 1e-2, Seed(2)).unwrap();
        for (i, g) in acc.grads.iter().enumerate() {
            let mut rebuilt = Matrix::zeros(g.as_ref().unwrap().rows(), g.as_ref().unwrap().cols());
            for (j, rho) in acc.rhos.iter().enumerate() {
                let plan = PerturbPlan::full_gaussian(&p, 1e-2, Seed(2).derive("probe", j as u64))
                    .unwrap();
                rebuilt.axpy(rho / 3.0, &plan.perturbation(&p, i).unwrap()).unwrap();
            }
            assert!(rebuilt.bit_eq(g.as_ref().unwrap()));
        }
    }

    #[test]
    fn rank_too_large_rejected() {
        let rq = RankQuadratic::planted(&[(3, 3)], &[1.0], Seed(1)).unwrap();
        let p = rq.init_params(Seed(0));
        let cfg = ProbeConfig {
            h: 2,
            r: 4,
            eps: 1e-2,
        };
        assert!(lower_dim_generate(&rq, &p, &Batch::empty(), &cfg, Seed(0), 0).is_err());
    }
}
