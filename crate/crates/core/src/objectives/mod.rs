//! Loss oracles and the parameter containers they evaluate.

mod data;
mod linear;
mod lora;
mod mlp;
mod quadratic;
mod toy;

pub use data::{load_csv, make_synthetic, BatchSampler, CsvSchema, GroundTruth, SyntheticTask};
pub use linear::{Link, LinearModel};
pub use lora::{lora_wrap, LoraWrapped};
pub use mlp::TinyMlp;
pub use quadratic::{Quadratic, RankQuadratic};
pub use toy::{ConstantOracle, CubicOracle, LinearOracle};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::randsrc::Seed;

/// How a parameter is perturbed: `MatrixSubspace` entries receive
/// subspace-aligned perturbations once a basis exists, `Dense` entries always
/// get full Gaussian ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    MatrixSubspace,
    Dense,
}

impl ParamKind {
    pub fn to_byte(self) -> u8 {
        match self {
            ParamKind::Dense => 0,
            ParamKind::MatrixSubspace => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ParamKind::Dense),
            1 => Some(ParamKind::MatrixSubspace),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    name: String,
    kind: ParamKind,
    pub tensor: Matrix,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }
}

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Matrix, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(Param { name, kind, tensor });
        Ok(())
    }

    /// Builder-style [`ParamSet::push`]; panics on duplicate names.
    pub fn with(mut self, name: &str, tensor: Matrix, kind: ParamKind) -> Self {
        self.push(name, tensor, kind).expect("unique parameter name");
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn entry(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn tensor(&self, i: usize) -> &Matrix {
        &self.entries[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.entries[i].tensor
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|p| p.name.as_str()).collect()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.len()).sum()
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    tensor: Matrix::zeros(p.tensor.rows(), p.tensor.cols()),
                })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.kind == b.kind && a.tensor.shape() == b.tensor.shape()
            })
    }

    /// Checks names and shapes against an expected layout.
    pub fn expect_layout(&self, layout: &[(&str, usize, usize)]) -> Result<()> {
        if self.len() != layout.len() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                layout.len(),
                self.len()
            )));
        }
        for (p, &(name, r, c)) in self.entries.iter().zip(layout) {
            if p.name != name || p.tensor.shape() != (r, c) {
                return Err(Error::dim(format!(
                    "parameter {:?} has shape {:?}; expected {name:?} with shape ({r}, {c})",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Bitwise equality of every tensor, plus matching layout.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.same_layout(other)
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.tensor.bit_eq(&b.tensor))
    }

    /// Hash of names and raw bit patterns, for cheap change detection.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.entries {
            p.name.hash(&mut h);
            p.tensor.shape().hash(&mut h);
            for v in p.tensor.as_slice() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Concatenation of every tensor, in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.entries {
            out.extend_from_slice(p.tensor.as_slice());
        }
        out
    }

    /// Overwrites the tensors from a flat buffer produced by [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::dim(format!(
                "flat buffer has {} scalars, parameter set has {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for p in &mut self.entries {
            let n = p.tensor.len();
            p.tensor
                .as_mut_slice()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// A mini-batch: one row of `inputs` per target.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Vec<f64>) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::dim(format!(
                "batch has {} input rows but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Batch { inputs, targets })
    }

    /// Zero-row batch for oracles that ignore data.
    pub fn empty() -> Self {
        Batch {
            inputs: Matrix::zeros(0, 0),
            targets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            targets.push(self.targets[i]);
        }
        Batch {
            inputs: Matrix::from_vec(indices.len(), d, data).expect("row-aligned selection"),
            targets,
        }
    }
}

/// A differentiable loss over a [`ParamSet`].
///
/// Evaluation is pure: the same `(params, batch)` always yields the same
/// bits, and `params` is never mutated.
pub trait LossOracle: Send + Sync {
    fn name(&self) -> String;

    /// Fresh parameters laid out for this oracle.
    fn init_params(&self, seed: Seed) -> ParamSet;

    fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<f64>;

    /// Exact gradient, shaped like `params`.
    fn gradient(&self, params: &ParamSet, batch: &Batch) -> Result<ParamSet>;
}

/// Loss with a finiteness check on the result.
pub fn eval_loss(oracle: &dyn LossOracle, params: &ParamSet, batch: &Batch) -> Result<f64> {
    let l = oracle.loss(params, batch)?;
    if !l.is_finite() {
        return Err(Error::Numeric(format!(
            "{} produced a non-finite loss ({l})",
            oracle.name()
        )));
    }
    Ok(l)
}

pub fn analytic_gradient(
    oracle: &dyn LossOracle,
    params: &ParamSet,
    batch: &Batch,
) -> Result<ParamSet> {
    oracle.gradient(params, batch)
}

/// Counts loss evaluations of a wrapped oracle.
pub struct EvalCounter {
    inner: Arc<dyn LossOracle>,
    calls: AtomicUsize,
}

impl EvalCounter {
    pub fn new(inner: Arc<dyn LossOracle>) -> Self {
        EvalCounter {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl LossOracle for EvalCounter {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn init_params(&self, seed: Seed) -> ParamSet {
        self.inner.init_params(seed)
    }

    fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.loss(params, batch)
    }

    fn gradient(&self, params: &ParamSet, batch: &Batch) -> Result<ParamSet> {
        self.inner.gradient(params, batch)
    }
}

/// Central finite-difference gradient, one coordinate at a time. Test oracle
/// for [`LossOracle::gradient`]; `O(2·num_scalars)` loss evaluations.
pub fn finite_difference_gradient(
    oracle: &dyn LossOracle,
    params: &ParamSet,
    batch: &Batch,
    step: f64,
) -> Result<ParamSet> {
    let mut grad = params.zeros_like();
    let mut work = params.clone();
    for i in 0..params.len() {
        for k in 0..params.tensor(i).len() {
            let orig = params.tensor(i).as_slice()[k];
            work.tensor_mut(i).as_mut_slice()[k] = orig + step;
            let plus = oracle.loss(&work, batch)?;
            work.tensor_mut(i).as_mut_slice()[k] = orig - step;
            let minus = oracle.loss(&work, batch)?;
            work.tensor_mut(i).as_mut_slice()[k] = orig;
            grad.tensor_mut(i).as_mut_slice()[k] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grad)
}
