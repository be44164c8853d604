use super::{Batch, LossOracle, ParamKind, ParamSet};
use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, Matrix};
use crate::randsrc::Seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    /// Least squares, `½·mean((z − y)²)`.
    Identity,
    /// Logistic loss with labels in {0, 1}, `mean(softplus(z) − y·z)`.
    Logistic,
}

/// Linear predictor `z = Σ_b ⟨W_b, X_b⟩ + bias` whose weights are split into
/// blocks.
///
/// Each input row is the concatenation of the row-major flattening of every
/// block, so a single `d×1` block is an ordinary weight vector. Blocks with
/// both sides larger than one are `MatrixSubspace`, the rest `Dense`.
#[derive(Clone, Debug)]
pub struct LinearModel {
    link: Link,
    blocks: Vec<(usize, usize)>,
    bias: bool,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LinearModel {
    pub fn new(link: Link, blocks: Vec<(usize, usize)>, bias: bool) -> Result<Self> {
        if blocks.is_empty() || blocks.iter().any(|&(m, n)| m == 0 || n == 0) {
            return Err(Error::Config(
                "linear model needs at least one non-empty weight block".into(),
            ));
        }
        Ok(LinearModel { link, blocks, bias })
    }

    /// Plain weight vector of length `d` plus a bias.
    pub fn vector(link: Link, d: usize) -> Self {
        LinearModel::new(link, vec![(d, 1)], true).expect("d >= 1")
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    /// Input width expected from a batch.
    pub fn features(&self) -> usize {
        self.blocks.iter().map(|&(m, n)| m * n).sum()
    }

    fn block_name(&self, b: usize) -> String {
        if self.blocks.len() == 1 {
            "w".to_string()
        } else {
            format!("w{b}")
        }
    }

    fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out: Vec<_> = self
            .blocks
            .iter()
            .enumerate()
            .map(|(b, &(m, n))| (self.block_name(b), m, n))
            .collect();
        if self.bias {
            out.push(("bias".to_string(), 1, 1));
        }
        out
    }

    fn check(&self, params: &ParamSet, batch: &Batch) -> Result<()> {
        let layout = self.layout();
        let refs: Vec<(&str, usize, usize)> =
            layout.iter().map(|(n, r, c)| (n.as_str(), *r, *c)).collect();
        params.expect_layout(&refs)?;
        if batch.is_empty() {
            return Err(Error::dim("linear model evaluated on an empty batch"));
        }
        if batch.features() != self.features() {
            return Err(Error::dim(format!(
                "batch has {} features, model expects {}",
                batch.features(),
                self.features()
            )));
        }
        Ok(())
    }

    /// Flattened weights (block order) and bias.
    fn weights(&self, params: &ParamSet) -> (Vec<f64>, f64) {
        let mut w = Vec::with_capacity(self.features());
        for b in 0..self.blocks.len() {
            w.extend_from_slice(params.tensor(b).as_slice());
        }
        let bias = if self.bias {
            params.tensor(self.blocks.len()).get(0, 0)
        } else {
            0.0
        };
        (w, bias)
    }

    /// Linear scores, one per batch row.
    pub fn scores(&self, params: &ParamSet, batch: &Batch) -> Result<Vec<f64>> {
        self.check(params, batch)?;
        let (w, bias) = self.weights(params);
        Ok((0..batch.len())
            .map(|i| {
                let row = batch.inputs.row(i);
                compensated_sum(row.iter().zip(&w).map(|(x, w)| x * w)) + bias
            })
            .collect())
    }

    /// Fraction of rows whose score sign matches the {0, 1} label.
    pub fn accuracy(&self, params: &ParamSet, batch: &Batch) -> Result<f64> {
        let z = self.scores(params, batch)?;
        let hits = z
            .iter()
            .zip(&batch.targets)
            .filter(|(z, y)| (**z > 0.0) == (**y > 0.5))
            .count();
        Ok(hits as f64 / batch.len() as f64)
    }

    fn residuals(&self, z: &[f64], y: &[f64]) -> Vec<f64> {
        match self.link {
            Link::Identity => z.iter().zip(y).map(|(z, y)| z - y).collect(),
            Link::Logistic => z.iter().zip(y).map(|(z, y)| sigmoid(*z) - y).collect(),
        }
    }
}

impl LossOracle for LinearModel {
    fn name(&self) -> String {
        let link = match self.link {
            Link::Identity => "least_squares",
            Link::Logistic => "logistic",
        };
        format!("{link}({} features)", self.features())
    }

    fn init_params(&self, _seed: Seed) -> ParamSet {
        let mut p = ParamSet::new();
        for (b, &(m, n)) in self.blocks.iter().enumerate() {
            let kind = if m > 1 && n > 1 {
                ParamKind::MatrixSubspace
            } else {
                ParamKind::Dense
            };
            p.push(self.block_name(b), Matrix::zeros(m, n), kind)
                .expect("unique block names");
        }
        if self.bias {
            p.push("bias", Matrix::zeros(1, 1), ParamKind::Dense)
                .expect("unique bias name");
        }
        p
    }

    fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<f64> {
        let z = self.scores(params, batch)?;
        let n = batch.len() as f64;
        let total = match self.link {
            Link::Identity => {
                0.5 * compensated_sum(z.iter().zip(&batch.targets).map(|(z, y)| (z - y) * (z - y)))
            }
            Link::Logistic => {
                compensated_sum(z.iter().zip(&batch.targets).map(|(z, y)| softplus(*z) - y * z))
            }
        };
        Ok(total / n)
    }

    fn gradient(&self, params: &ParamSet, batch: &Batch) -> Result<ParamSet> {
        let z = self.scores(params, batch)?;
        let r = self.residuals(&z, &batch.targets);
        let n = batch.len() as f64;
        let d = self.features();
        let mut flat = Vec::with_capacity(d);
        for k in 0..d {
            flat.push(compensated_sum((0..batch.len()).map(|i| r[i] * batch.inputs.get(i, k))) / n);
        }
        if self.bias {
            flat.push(compensated_sum(r.iter().copied()) / n);
        }
        let mut g = params.zeros_like();
        g.assign_flat(&flat)?;
        Ok(g)
    }
}
