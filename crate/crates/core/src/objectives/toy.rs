//! Closed-form oracles used to pin down estimator behaviour.

use super::{Batch, LossOracle, ParamKind, ParamSet};
use crate::error::Result;
use crate::linalg::{compensated_sum, Matrix};
use crate::randsrc::Seed;

fn single(shape: (usize, usize), x: &Matrix, kind: ParamKind) -> ParamSet {
    debug_assert_eq!(x.shape(), shape);
    ParamSet::new().with("x", x.clone(), kind)
}

/// Always returns the same value.
#[derive(Clone, Debug)]
pub struct ConstantOracle {
    pub value: f64,
    pub shape: (usize, usize),
}

impl LossOracle for ConstantOracle {
    fn name(&self) -> String {
        format!("constant({})", self.value)
    }

    fn init_params(&self, _seed: Seed) -> ParamSet {
        single(
            self.shape,
            &Matrix::zeros(self.shape.0, self.shape.1),
            ParamKind::Dense,
        )
    }

    fn loss(&self, params: &ParamSet, _batch: &Batch) -> Result<f64> {
        params.expect_layout(&[("x", self.shape.0, self.shape.1)])?;
        Ok(self.value)
    }

    fn gradient(&self, params: &ParamSet, _batch: &Batch) -> Result<ParamSet> {
        params.expect_layout(&[("x", self.shape.0, self.shape.1)])?;
        Ok(params.zeros_like())
    }
}

/// `f(X) = ⟨A, X⟩_F`.
#[derive(Clone, Debug)]
pub struct LinearOracle {
    pub a: Matrix,
    pub kind: ParamKind,
}

impl LossOracle for LinearOracle {
    fn name(&self) -> String {
        format!("linear({}x{})", self.a.rows(), self.a.cols())
    }

    fn init_params(&self, _seed: Seed) -> ParamSet {
        single(
            self.a.shape(),
            &Matrix::zeros(self.a.rows(), self.a.cols()),
            self.kind,
        )
    }

    fn loss(&self, params: &ParamSet, _batch: &Batch) -> Result<f64> {
        params.expect_layout(&[("x", self.a.rows(), self.a.cols())])?;
        crate::linalg::frob_inner(&self.a, params.tensor(0))
    }

    fn gradient(&self, params: &ParamSet, _batch: &Batch) -> Result<ParamSet> {
        params.expect_layout(&[("x", self.a.rows(), self.a.cols())])?;
        let mut g = params.zeros_like();
        *g.tensor_mut(0) = self.a.clone();
        Ok(g)
    }
}

/// `f(x) = Σ xᵢ³` over a `d×1` parameter.
#[derive(Clone, Debug)]
pub struct CubicOracle {
    pub d: usize,
}

impl LossOracle for CubicOracle {
    fn name(&self) -> String {
        format!("cubic(d={})", self.d)
    }

    fn init_params(&self, _seed: Seed) -> ParamSet {
        single((self.d, 1), &Matrix::zeros(self.d, 1), ParamKind::Dense)
    }

    fn loss(&self, params: &ParamSet, _batch: &Batch) -> Result<f64> {
        params.expect_layout(&[("x", self.d, 1)])?;
        Ok(compensated_sum(
            params.tensor(0).as_slice().iter().map(|x| x * x * x),
        ))
    }

    fn gradient(&self, params: &ParamSet, _batch: &Batch) -> Result<ParamSet> {
        params.expect_layout(&[("x", self.d, 1)])?;
        let mut g = params.clone();
        *g.tensor_mut(0) = params.tensor(0).map(|x| 3.0 * x * x);
        Ok(g)
    }
}
