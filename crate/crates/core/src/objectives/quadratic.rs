use super::{Batch, LossOracle, ParamKind, ParamSet};
use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, frob_norm, scaled_outer_sum, Matrix};
use crate::randsrc::{random_orthonormal, GaussStream, Seed};

/// `f(x) = xᵀHx` over a single column parameter `x`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    h: Matrix,
}

impl Quadratic {
    pub fn new(h: Matrix) -> Result<Self> {
        if h.rows() != h.cols() || h.rows() == 0 {
            return Err(Error::dim(format!(
                "quadratic form needs a square matrix, got {}x{}",
                h.rows(),
                h.cols()
            )));
        }
        Ok(Quadratic { h })
    }

    pub fn identity(d: usize) -> Self {
        Quadratic {
            h: Matrix::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.h.rows()
    }

    pub fn hessian_form(&self) -> &Matrix {
        &self.h
    }

    pub fn params_from(x: &[f64]) -> ParamSet {
        ParamSet::new().with("x", Matrix::column(x), ParamKind::Dense)
    }

    fn x<'a>(&self, params: &'a ParamSet) -> Result<&'a Matrix> {
        params.expect_layout(&[("x", self.dim(), 1)])?;
        Ok(params.tensor(0))
    }
}

impl LossOracle for Quadratic {
    fn name(&self) -> String {
        format!("quadratic(d={})", self.dim())
    }

    fn init_params(&self, seed: Seed) -> ParamSet {
        let x = GaussStream::derived(seed, "quadratic-init", 0).gauss_vec(self.dim());
        Quadratic::params_from(&x)
    }

    fn loss(&self, params: &ParamSet, _batch: &Batch) -> Result<f64> {
        let x = self.x(params)?.as_slice();
        let d = self.dim();
        Ok(compensated_sum((0..d).flat_map(|i| {
            let row = self.h.row(i);
            let xi = x[i];
            row.iter().zip(x).map(move |(&hij, &xj)| xi * hij * xj)
        })))
    }

    fn gradient(&self, params: &ParamSet, _batch: &Batch) -> Result<ParamSet> {
        let x = self.x(params)?.as_slice();
        let d = self.dim();
        let mut g = vec![0.0; d];
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = compensated_sum(
                (0..d).map(|j| (self.h.get(i, j) + self.h.get(j, i)) * x[j]),
            );
        }
        Ok(Quadratic::params_from(&g))
    }
}

/// `f(W) = ½ Σ_ℓ ‖W_ℓ − T_ℓ‖²_F` with planted low-rank targets `T_ℓ`.
///
/// Parameters start at zero, so the initial gradient `−T_ℓ` has exactly the
/// planted rank; every `T_ℓ` has the same singular spectrum.
#[derive(Clone, Debug)]
pub struct RankQuadratic {
    targets: Vec<Matrix>,
    rank: usize,
}

impl RankQuadratic {
    /// Targets `A·diag(spectrum)·Bᵀ` with random orthonormal frames.
    pub fn planted(shapes: &[(usize, usize)], spectrum: &[f64], seed: Seed) -> Result<Self> {
        let rank = spectrum.len();
        let mut targets = Vec::with_capacity(shapes.len());
        for (l, &(m, n)) in shapes.iter().enumerate() {
            if rank == 0 || rank > m.min(n) {
                return Err(Error::dim(format!(
                    "planted rank {rank} does not fit a {m}x{n} matrix"
                )));
            }
            let mut stream = GaussStream::derived(seed, "planted-frames", l as u64);
            let a = random_orthonormal(&mut stream, m, rank);
            let b = random_orthonormal(&mut stream, n, rank);
            targets.push(scaled_outer_sum(&a, spectrum, &b)?);
        }
        Ok(RankQuadratic { targets, rank })
    }

    pub fn from_targets(targets: Vec<Matrix>, rank: usize) -> Self {
        RankQuadratic { targets, rank }
    }

    pub fn targets(&self) -> &[Matrix] {
        &self.targets
    }

    pub fn planted_rank(&self) -> usize {
        self.rank
    }

    fn layout(&self) -> Vec<(String, usize, usize)> {
        self.targets
            .iter()
            .enumerate()
            .map(|(l, t)| (format!("w{l}"), t.rows(), t.cols()))
            .collect()
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        let layout = self.layout();
        let refs: Vec<(&str, usize, usize)> =
            layout.iter().map(|(n, r, c)| (n.as_str(), *r, *c)).collect();
        params.expect_layout(&refs)
    }

    /// Loss at the starting point (all parameters zero).
    pub fn initial_loss(&self) -> f64 {
        0.5 * self.targets.iter().map(|t| frob_norm(t).powi(2)).sum::<f64>()
    }
}

impl LossOracle for RankQuadratic {
    fn name(&self) -> String {
        format!(
            "rank_quadratic({} matrices, rank {})",
            self.targets.len(),
            self.rank
        )
    }

    fn init_params(&self, _seed: Seed) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, r, c) in self.layout() {
            p.push(name, Matrix::zeros(r, c), ParamKind::MatrixSubspace)
                .expect("generated names are unique");
        }
        p
    }

    fn loss(&self, params: &ParamSet, _batch: &Batch) -> Result<f64> {
        self.check(params)?;
        let total = compensated_sum(params.iter().zip(&self.targets).flat_map(|(p, t)| {
            p.tensor
                .as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(w, t)| (w - t) * (w - t))
        }));
        Ok(0.5 * total)
    }

    fn gradient(&self, params: &ParamSet, _batch: &Batch) -> Result<ParamSet> {
        self.check(params)?;
        let mut g = params.zeros_like();
        for (l, t) in self.targets.iter().enumerate() {
            *g.tensor_mut(l) = params.tensor(l).sub(t)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::truncated_svd;

    #[test]
    fn identity_examples() {
        let q = Quadratic::identity(3);
        let b = Batch::empty();
        assert_eq!(q.loss(&Quadratic::params_from(&[1.0, 0.0, 0.0]), &b).unwrap(), 1.0);
        assert_eq!(q.loss(&Quadratic::params_from(&[0.0; 3]), &b).unwrap(), 0.0);
    }

    #[test]
    fn gradient_is_symmetrized_form() {
        let h = Matrix::from_rows(&[[1.0, 2.0], [0.0, 3.0]]);
        let q = Quadratic::new(h).unwrap();
        let g = q
            .gradient(&Quadratic::params_from(&[1.0, -1.0]), &Batch::empty())
            .unwrap();
        // (H + Hᵀ) x = [[2,2],[2,6]]·[1,-1] = [0, -4]
        assert_eq!(g.tensor(0).as_slice(), &[0.0, -4.0]);
    }

    #[test]
    fn wrong_shape_is_dimension_error() {
        let q = Quadratic::identity(3);
        let err = q
            .loss(&Quadratic::params_from(&[1.0, 2.0]), &Batch::empty())
            .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn planted_gradient_has_planted_rank() {
        let rq = RankQuadratic::planted(&[(12, 10)], &[3.0, 2.0, 1.0], Seed(4)).unwrap();
        let p = rq.init_params(Seed(0));
        let g = rq.gradient(&p, &Batch::empty()).unwrap();
        let svd = truncated_svd(g.tensor(0), 5).unwrap();
        assert!((svd.s[0] - 3.0).abs() < 1e-10);
        assert!((svd.s[2] - 1.0).abs() < 1e-10);
        assert!(svd.s[3] < 1e-10);
        let l = rq.loss(&p, &Batch::empty()).unwrap();
        assert!((l - 7.0).abs() < 1e-12);
        assert!((rq.initial_loss() - 7.0).abs() < 1e-12);
    }
}
