use super::{Batch, LossOracle, ParamKind, ParamSet};
use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, Matrix};
use crate::randsrc::{GaussStream, Seed};

const LAYOUT: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

/// Two tanh hidden layers and a scalar linear head, trained with `½·mean`
/// squared error.
///
/// `w1` (d_in×h1) and `w2` (h1×h2) are `MatrixSubspace`; biases and the head
/// `w3` (h2×1) are `Dense`.
#[derive(Clone, Debug)]
pub struct TinyMlp {
    d_in: usize,
    h1: usize,
    h2: usize,
}

struct Forward {
    a1: Matrix,
    a2: Matrix,
    out: Vec<f64>,
}

fn add_row_bias(m: &mut Matrix, b: &Matrix) {
    let cols = m.cols();
    for row in m.as_mut_slice().chunks_mut(cols) {
        for (v, bj) in row.iter_mut().zip(b.as_slice()) {
            *v += bj;
        }
    }
}

fn check_finite(m: &Matrix, layer: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite activation in layer {layer}"
        )))
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for j in 0..m.cols() {
        out.set(0, j, compensated_sum((0..m.rows()).map(|i| m.get(i, j))));
    }
    out
}

impl TinyMlp {
    pub fn new(d_in: usize, h1: usize, h2: usize) -> Result<Self> {
        if d_in == 0 || h1 == 0 || h2 == 0 {
            return Err(Error::Config("MLP layer widths must be positive".into()));
        }
        Ok(TinyMlp { d_in, h1, h2 })
    }

    /// 32 inputs, hidden layers of 64 and 32.
    pub fn default_shape() -> Self {
        TinyMlp {
            d_in: 32,
            h1: 64,
            h2: 32,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.d_in
    }

    pub fn hidden(&self) -> (usize, usize) {
        (self.h1, self.h2)
    }

    fn shapes(&self) -> [(usize, usize); 6] {
        [
            (self.d_in, self.h1),
            (1, self.h1),
            (self.h1, self.h2),
            (1, self.h2),
            (self.h2, 1),
            (1, 1),
        ]
    }

    fn check(&self, params: &ParamSet, batch: &Batch) -> Result<()> {
        let layout: Vec<(&str, usize, usize)> = LAYOUT
            .iter()
            .zip(self.shapes())
            .map(|(n, (r, c))| (*n, r, c))
            .collect();
        params.expect_layout(&layout)?;
        if batch.is_empty() {
            return Err(Error::dim("MLP evaluated on an empty batch"));
        }
        if batch.features() != self.d_in {
            return Err(Error::dim(format!(
                "batch has {} features, MLP expects {}",
                batch.features(),
                self.d_in
            )));
        }
        Ok(())
    }

    fn forward(&self, p: &ParamSet, batch: &Batch) -> Result<Forward> {
        self.check(p, batch)?;
        let mut z1 = batch.inputs.matmul(p.tensor(0))?;
        add_row_bias(&mut z1, p.tensor(1));
        check_finite(&z1, "w1")?;
        let a1 = z1.map(f64::tanh);
        let mut z2 = a1.matmul(p.tensor(2))?;
        add_row_bias(&mut z2, p.tensor(3));
        check_finite(&z2, "w2")?;
        let a2 = z2.map(f64::tanh);
        let b3 = p.tensor(5).get(0, 0);
        let w3 = p.tensor(4).as_slice();
        let out: Vec<f64> = (0..a2.rows())
            .map(|i| compensated_sum(a2.row(i).iter().zip(w3).map(|(a, w)| a * w)) + b3)
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite activation in layer w3".into()));
        }
        Ok(Forward { a1, a2, out })
    }

    /// Network outputs, one per batch row.
    pub fn predict(&self, params: &ParamSet, batch: &Batch) -> Result<Vec<f64>> {
        Ok(self.forward(params, batch)?.out)
    }
}

impl LossOracle for TinyMlp {
    fn name(&self) -> String {
        format!("tiny_mlp({}-{}-{}-1)", self.d_in, self.h1, self.h2)
    }

    fn init_params(&self, seed: Seed) -> ParamSet {
        let mut p = ParamSet::new();
        for (l, (name, (r, c))) in LAYOUT.iter().zip(self.shapes()).enumerate() {
            let weight = name.starts_with('w');
            let tensor = if weight {
                let mut s = GaussStream::derived(seed, "mlp-init", l as u64);
                s.gauss_matrix(r, c).scale(1.0 / (r as f64).sqrt())
            } else {
                Matrix::zeros(r, c)
            };
            let kind = if weight && c > 1 {
                ParamKind::MatrixSubspace
            } else {
                ParamKind::Dense
            };
            p.push(*name, tensor, kind).expect("fixed layout names");
        }
        p
    }

    fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<f64> {
        let f = self.forward(params, batch)?;
        let sq = compensated_sum(
            f.out
                .iter()
                .zip(&batch.targets)
                .map(|(o, y)| (o - y) * (o - y)),
        );
        Ok(0.5 * sq / batch.len() as f64)
    }

    fn gradient(&self, params: &ParamSet, batch: &Batch) -> Result<ParamSet> {
        let f = self.forward(params, batch)?;
        let n = batch.len() as f64;
        let dout: Vec<f64> = f
            .out
            .iter()
            .zip(&batch.targets)
            .map(|(o, y)| (o - y) / n)
            .collect();
        let w3 = params.tensor(4);
        let mut g = params.zeros_like();

        // Head.
        let dout_col = Matrix::column(&dout);
        *g.tensor_mut(4) = f.a2.t_matmul(&dout_col)?;
        g.tensor_mut(5).set(0, 0, compensated_sum(dout.iter().copied()));

        // Second hidden layer: dz2 = (dout · w3ᵀ) ⊙ (1 − a2²).
        let mut dz2 = dout_col.matmul_t(w3)?;
        for (d, a) in dz2.as_mut_slice().iter_mut().zip(f.a2.as_slice()) {
            *d *= 1.0 - a * a;
        }
        *g.tensor_mut(2) = f.a1.t_matmul(&dz2)?;
        *g.tensor_mut(3) = column_sums(&dz2);

        // First hidden layer.
        let mut dz1 = dz2.matmul_t(params.tensor(2))?;
        for (d, a) in dz1.as_mut_slice().iter_mut().zip(f.a1.as_slice()) {
            *d *= 1.0 - a * a;
        }
        *g.tensor_mut(0) = batch.inputs.t_matmul(&dz1)?;
        *g.tensor_mut(1) = column_sums(&dz1);
        Ok(g)
    }
}
