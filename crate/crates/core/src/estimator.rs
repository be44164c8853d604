//! Two-point zeroth-order estimation.
//!
//! Perturbations are never stored: a [`PerturbPlan`] holds only seeds (and,
//! for aligned entries, a shared basis), and each parameter's perturbation is
//! regenerated on demand, one tensor at a time.

use std::sync::Arc;

use crate::align::AlignedPerturbation;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::objectives::{eval_loss, Batch, LossOracle, ParamSet};
use crate::randsrc::{GaussStream, Seed};
use crate::subspace::SubspaceBasis;

/// How one parameter's perturbation is generated.
#[derive(Clone, Debug, PartialEq)]
pub enum PerturbEntry {
    /// i.i.d. N(0, 1) entries drawn row-major from `seed`.
    FullGaussian { seed: Seed },
    /// An r×r core `Z_init ∼ N(0, I)` from `seed`, projected onto the
    /// hyperplane of `basis` and lifted.
    SubspaceAligned {
        seed: Seed,
        basis: Arc<SubspaceBasis>,
        delta: f64,
        xi: f64,
    },
}

impl PerturbEntry {
    pub fn seed(&self) -> Seed {
        match self {
            PerturbEntry::FullGaussian { seed } | PerturbEntry::SubspaceAligned { seed, .. } => {
                *seed
            }
        }
    }

    /// Regenerates the perturbation for a parameter of the given shape.
    pub fn generate(&self, rows: usize, cols: usize) -> Result<Matrix> {
        match self {
            PerturbEntry::FullGaussian { seed } => {
                Ok(GaussStream::new(*seed).gauss_matrix(rows, cols))
            }
            PerturbEntry::SubspaceAligned {
                seed,
                basis,
                delta,
                xi,
            } => {
                if basis.shape() != (rows, cols) {
                    return Err(Error::dim(format!(
                        "basis for a {:?} matrix applied to a {rows}x{cols} parameter",
                        basis.shape()
                    )));
                }
                let r = basis.rank();
                let z_init = GaussStream::new(*seed).gauss_matrix(r, r);
                Ok(AlignedPerturbation::build(&z_init, basis, *delta, *xi)?.lifted)
            }
        }
    }
}

/// One perturbation of a whole [`ParamSet`], scaled by `eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbPlan {
    eps: f64,
    entries: Vec<PerturbEntry>,
}

impl PerturbPlan {
    pub fn new(eps: f64, entries: Vec<PerturbEntry>) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!(
                "perturbation scale must be finite and > 0, got {eps}"
            )));
        }
        Ok(PerturbPlan { eps, entries })
    }

    /// Full Gaussian entries; parameter `ℓ` draws from `seed.derive("param", ℓ)`.
    pub fn full_gaussian(params: &ParamSet, eps: f64, seed: Seed) -> Result<Self> {
        let entries = (0..params.len())
            .map(|l| PerturbEntry::FullGaussian {
                seed: seed.derive("param", l as u64),
            })
            .collect();
        PerturbPlan::new(eps, entries)
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn entries(&self) -> &[PerturbEntry] {
        &self.entries
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        if self.entries.len() != params.len() {
            return Err(Error::dim(format!(
                "plan has {} entries for {} parameters",
                self.entries.len(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Regenerated perturbation of parameter `i` (unscaled).
    pub fn perturbation(&self, params: &ParamSet, i: usize) -> Result<Matrix> {
        let (r, c) = params.tensor(i).shape();
        self.entries[i].generate(r, c)
    }

    /// Every perturbation tensor, laid out like `params`.
    pub fn materialize(&self, params: &ParamSet) -> Result<ParamSet> {
        self.check(params)?;
        let mut out = params.zeros_like();
        for i in 0..params.len() {
            *out.tensor_mut(i) = self.perturbation(params, i)?;
        }
        Ok(out)
    }
}

/// Outcome of one two-point evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoStepRecord {
    pub step: u64,
    pub rho: f64,
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub plan: PerturbPlan,
}

/// `out = params + scale·z`, one regenerated tensor at a time.
fn write_shifted(params: &ParamSet, plan: &PerturbPlan, scale: f64, out: &mut ParamSet) -> Result<()> {
    for i in 0..params.len() {
        let z = plan.perturbation(params, i)?;
        let src = params.tensor(i).as_slice();
        for ((o, p), zk) in out.tensor_mut(i).as_mut_slice().iter_mut().zip(src).zip(z.as_slice()) {
            *o = p + scale * zk;
        }
    }
    Ok(())
}

/// Two-point quotient along an explicit direction laid out like `params`.
/// Returns `(ρ, L₊, L₋)`.
pub fn two_point_along(
    oracle: &dyn LossOracle,
    params: &ParamSet,
    direction: &ParamSet,
    eps: f64,
    batch: &Batch,
) -> Result<(f64, f64, f64)> {
    if !params.same_layout(direction) {
        return Err(Error::dim("direction layout differs from parameters"));
    }
    let mut scratch = params.clone();
    let shift = |scratch: &mut ParamSet, scale: f64| {
        for i in 0..params.len() {
            let src = params.tensor(i).as_slice();
            let z = direction.tensor(i).as_slice();
            for ((o, p), zk) in scratch.tensor_mut(i).as_mut_slice().iter_mut().zip(src).zip(z) {
                *o = p + scale * zk;
            }
        }
    };
    shift(&mut scratch, eps);
    let plus = eval_loss(oracle, &scratch, batch)?;
    shift(&mut scratch, -eps);
    let minus = eval_loss(oracle, &scratch, batch)?;
    Ok(((plus - minus) / (2.0 * eps), plus, minus))
}

/// `params += scale·z` for every parameter of the plan.
pub fn apply_scaled(params: &mut ParamSet, plan: &PerturbPlan, scale: f64) -> Result<()> {
    plan.check(params)?;
    for i in 0..params.len() {
        let z = plan.perturbation(params, i)?;
        for (p, zk) in params.tensor_mut(i).as_mut_slice().iter_mut().zip(z.as_slice()) {
            *p += scale * zk;
        }
    }
    Ok(())
}

/// `params += sign·ε·z`.
///
/// Floating-point addition is not invertible, so `+1` followed by `−1`
/// restores each entry to within a rounding error of its magnitude, not
/// bit-exactly. [`two_point_coeff`] therefore never perturbs in place.
pub fn apply_signed_perturbation(params: &mut ParamSet, plan: &PerturbPlan, sign: f64) -> Result<()> {
    apply_scaled(params, plan, sign * plan.eps)
}

/// `ρ = (L(θ+εz) − L(θ−εz)) / (2ε)`, with exactly two oracle calls.
///
/// Both shifted points are rebuilt from `params` in a scratch copy, so
/// `params` is untouched; its checksum is verified anyway.
pub fn two_point_coeff(
    oracle: &dyn LossOracle,
    params: &ParamSet,
    plan: &PerturbPlan,
    batch: &Batch,
) -> Result<ZoStepRecord> {
    plan.check(params)?;
    let before = params.checksum();
    let mut scratch = params.clone();
    write_shifted(params, plan, plan.eps, &mut scratch)?;
    let loss_plus = eval_loss(oracle, &scratch, batch)?;
    write_shifted(params, plan, -plan.eps, &mut scratch)?;
    let loss_minus = eval_loss(oracle, &scratch, batch)?;
    if params.checksum() != before {
        return Err(Error::Internal(
            "parameters changed during a two-point evaluation".into(),
        ));
    }
    Ok(ZoStepRecord {
        step: 0,
        rho: (loss_plus - loss_minus) / (2.0 * plan.eps),
        loss_plus,
        loss_minus,
        plan: plan.clone(),
    })
}

/// `(1/n)·Σᵢ ρᵢ·zᵢ`, laid out like `params`, with the per-plan records.
pub fn averaged_estimate(
    oracle: &dyn LossOracle,
    params: &ParamSet,
    plans: &[PerturbPlan],
    batch: &Batch,
) -> Result<(ParamSet, Vec<ZoStepRecord>)> {
    if plans.is_empty() {
        return Err(Error::Config("averaged estimate needs at least one plan".into()));
    }
    let n = plans.len() as f64;
    let mut est = params.zeros_like();
    let mut records = Vec::with_capacity(plans.len());
    for plan in plans {
        let rec = two_point_coeff(oracle, params, plan, batch)?;
        for i in 0..params.len() {
            let z = plan.perturbation(params, i)?;
            est.tensor_mut(i).axpy(rec.rho / n, &z)?;
        }
        records.push(rec);
    }
    Ok((est, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{ConstantOracle, LinearOracle, ParamKind, Quadratic};

    #[test]
    fn quadratic_worked_example() {
        let q = Quadratic::identity(2);
        let x = Quadratic::params_from(&[1.0, 0.0]);
        let u = Quadratic::params_from(&[1.0, 1.0]);
        let (rho, _, _) = two_point_along(&q, &x, &u, 0.1, &Batch::empty()).unwrap();
        assert!((rho - 2.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_rho_matches_plan_direction() {
        let q = Quadratic::identity(2);
        let x = Quadratic::params_from(&[1.0, 0.0]);
        let plan = PerturbPlan::full_gaussian(&x, 0.1, Seed(99)).unwrap();
        let u = plan.materialize(&x).unwrap();
        let rec = two_point_coeff(&q, &x, &plan, &Batch::empty()).unwrap();
        let expect = 2.0 * u.tensor(0).get(0, 0);
        assert!((rec.rho - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn constant_oracle_rho_zero() {
        let c = ConstantOracle {
            value: 3.0,
            shape: (4, 1),
        };
        let p = c.init_params(Seed(0));
        let plan = PerturbPlan::full_gaussian(&p, 1e-3, Seed(5)).unwrap();
        assert_eq!(two_point_coeff(&c, &p, &plan, &Batch::empty()).unwrap().rho, 0.0);
    }

    #[test]
    fn linear_oracle_rho_independent_of_eps() {
        let a = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let lin = LinearOracle {
            a: a.clone(),
            kind: ParamKind::Dense,
        };
        let p = lin.init_params(Seed(0));
        for eps in [1e-1, 1e-2, 1e-3] {
            let plan = PerturbPlan::full_gaussian(&p, eps, Seed(8)).unwrap();
            let u = plan.materialize(&p).unwrap();
            let expect = crate::linalg::frob_inner(&a, u.tensor(0)).unwrap();
            let rho = two_point_coeff(&lin, &p, &plan, &Batch::empty()).unwrap().rho;
            assert!((rho - expect).abs() < 1e-9 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn eps_must_be_positive() {
        assert!(PerturbPlan::new(0.0, vec![]).is_err());
        assert!(PerturbPlan::new(-1e-3, vec![]).is_err());
    }

    #[test]
    fn signed_perturbation_round_trip_is_close() {
        let mut p = Quadratic::identity(5).init_params(Seed(3));
        let orig = p.clone();
        let plan = PerturbPlan::full_gaussian(&p, 1e-2, Seed(4)).unwrap();
        apply_signed_perturbation(&mut p, &plan, 1.0).unwrap();
        assert!(p.flatten().iter().zip(orig.flatten()).all(|(a, b)| a != &b));
        apply_signed_perturbation(&mut p, &plan, -1.0).unwrap();
        for (a, b) in p.flatten().iter().zip(orig.flatten()) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1e-2));
        }
    }

    #[test]
    fn averaging_one_plan_matches_single() {
        let q = Quadratic::identity(3);
        let x = q.init_params(Seed(1));
        let plan = PerturbPlan::full_gaussian(&x, 1e-2, Seed(2)).unwrap();
        let rec = two_point_coeff(&q, &x, &plan, &Batch::empty()).unwrap();
        let (est, _) = averaged_estimate(&q, &x, std::slice::from_ref(&plan), &Batch::empty()).unwrap();
        let u = plan.materialize(&x).unwrap();
        assert!(est.tensor(0).bit_eq(&u.tensor(0).scale(rec.rho)));
        let (dup, _) =
            averaged_estimate(&q, &x, &[plan.clone(), plan.clone()], &Batch::empty()).unwrap();
        assert!(dup.tensor(0).max_abs_diff(est.tensor(0)) < 1e-15);
    }
}
