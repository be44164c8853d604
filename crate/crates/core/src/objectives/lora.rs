use std::sync::Arc;

use super::{Batch, LossOracle, ParamKind, ParamSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::randsrc::{GaussStream, Seed};

/// A base oracle evaluated at `W₀ + B·A` for every wrapped matrix.
///
/// The trainable parameters are the adapters only, named `{name}.lora_b`
/// (m×r′, zero-initialized) and `{name}.lora_a` (r′×n, entries N(0, 1/n)),
/// both `MatrixSubspace`. Every base tensor, wrapped or not, stays frozen.
pub struct LoraWrapped {
    base: Arc<dyn LossOracle>,
    frozen: ParamSet,
    /// Base parameter index of each wrapped matrix, in adapter order.
    wrapped: Vec<usize>,
    rank: usize,
}

/// Wraps every `MatrixSubspace` entry of `frozen` with rank-`r_prime`
/// adapters. Returns the wrapped oracle and its initial adapters.
pub fn lora_wrap(
    base: Arc<dyn LossOracle>,
    frozen: ParamSet,
    r_prime: usize,
    seed: Seed,
) -> Result<(LoraWrapped, ParamSet)> {
    let wrapped: Vec<usize> = frozen
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind() == ParamKind::MatrixSubspace)
        .map(|(i, _)| i)
        .collect();
    if wrapped.is_empty() {
        return Err(Error::Config(
            "LoRA needs at least one MatrixSubspace parameter to wrap".into(),
        ));
    }
    for &i in &wrapped {
        let (m, n) = frozen.tensor(i).shape();
        if r_prime == 0 || r_prime > m.min(n) {
            return Err(Error::dim(format!(
                "LoRA rank {r_prime} exceeds min dimension of {:?} ({m}x{n})",
                frozen.entry(i).name()
            )));
        }
    }
    let w = LoraWrapped {
        base,
        frozen,
        wrapped,
        rank: r_prime,
    };
    let adapters = w.init_params(seed);
    Ok((w, adapters))
}

impl LoraWrapped {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn frozen(&self) -> &ParamSet {
        &self.frozen
    }

    /// Base parameters with the adapter products folded in.
    pub fn effective_params(&self, adapters: &ParamSet) -> Result<ParamSet> {
        self.check(adapters)?;
        let mut p = self.frozen.clone();
        for (k, &i) in self.wrapped.iter().enumerate() {
            let ba = adapters.tensor(2 * k).matmul(adapters.tensor(2 * k + 1))?;
            *p.tensor_mut(i) = p.tensor(i).add(&ba)?;
        }
        Ok(p)
    }

    fn check(&self, adapters: &ParamSet) -> Result<()> {
        let names: Vec<(String, usize, usize)> = self
            .wrapped
            .iter()
            .flat_map(|&i| {
                let e = self.frozen.entry(i);
                let (m, n) = e.tensor.shape();
                [
                    (format!("{}.lora_b", e.name()), m, self.rank),
                    (format!("{}.lora_a", e.name()), self.rank, n),
                ]
            })
            .collect();
        let refs: Vec<(&str, usize, usize)> =
            names.iter().map(|(n, r, c)| (n.as_str(), *r, *c)).collect();
        adapters.expect_layout(&refs)
    }
}

impl LossOracle for LoraWrapped {
    fn name(&self) -> String {
        format!("lora(r={}, {})", self.rank, self.base.name())
    }

    fn init_params(&self, seed: Seed) -> ParamSet {
        let mut p = ParamSet::new();
        for (k, &i) in self.wrapped.iter().enumerate() {
            let e = self.frozen.entry(i);
            let (m, n) = e.tensor.shape();
            let a = GaussStream::derived(seed, "lora-a", k as u64)
                .gauss_matrix(self.rank, n)
                .scale(1.0 / (n as f64).sqrt());
            p.push(
                format!("{}.lora_b", e.name()),
                Matrix::zeros(m, self.rank),
                ParamKind::MatrixSubspace,
            )
            .expect("base names are unique");
            p.push(format!("{}.lora_a", e.name()), a, ParamKind::MatrixSubspace)
                .expect("base names are unique");
        }
        p
    }

    fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<f64> {
        self.base.loss(&self.effective_params(params)?, batch)
    }

    fn gradient(&self, params: &ParamSet, batch: &Batch) -> Result<ParamSet> {
        let full = self.base.gradient(&self.effective_params(params)?, batch)?;
        let mut g = params.zeros_like();
        for (k, &i) in self.wrapped.iter().enumerate() {
            let dw = full.tensor(i);
            *g.tensor_mut(2 * k) = dw.matmul_t(params.tensor(2 * k + 1))?;
            *g.tensor_mut(2 * k + 1) = params.tensor(2 * k).t_matmul(dw)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{finite_difference_gradient, TinyMlp};

    fn setup() -> (LoraWrapped, ParamSet, Batch, Arc<TinyMlp>, ParamSet) {
        let mlp = Arc::new(TinyMlp::new(4, 6, 5).unwrap());
        let base_params = mlp.init_params(Seed(1));
        let mut s = GaussStream::new(Seed(2));
        let batch = Batch::new(s.gauss_matrix(7, 4), s.gauss_vec(7)).unwrap();
        let (w, a) = lora_wrap(mlp.clone(), base_params.clone(), 2, Seed(3)).unwrap();
        (w, a, batch, mlp, base_params)
    }

    #[test]
    fn wrap_preserves_loss_and_counts() {
        let (w, a, batch, mlp, base) = setup();
        assert_eq!(
            w.loss(&a, &batch).unwrap().to_bits(),
            mlp.loss(&base, &batch).unwrap().to_bits()
        );
        assert_eq!(a.num_scalars(), 2 * (4 + 6) + 2 * (6 + 5));
        assert!(a.iter().all(|p| p.kind() == ParamKind::MatrixSubspace));
    }

    #[test]
    fn b_gradient_at_zero_is_dw_at() {
        let (w, a, batch, mlp, base) = setup();
        let g = w.gradient(&a, &batch).unwrap();
        let dw = mlp.gradient(&base, &batch).unwrap();
        let expect = dw.tensor(0).matmul_t(a.tensor(1)).unwrap();
        assert!(g.tensor(0).max_abs_diff(&expect) < 1e-14);
        let fd = finite_difference_gradient(&w, &a, &batch, 1e-5).unwrap();
        for (x, e) in g.flatten().iter().zip(fd.flatten()) {
            assert!((x - e).abs() <= 1e-6 * (1.0 + e.abs()), "{x} vs {e}");
        }
    }

    #[test]
    fn rank_too_large() {
        let mlp = Arc::new(TinyMlp::new(4, 6, 5).unwrap());
        let p = mlp.init_params(Seed(1));
        let err = lora_wrap(mlp, p, 5, Seed(0)).err().unwrap();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
