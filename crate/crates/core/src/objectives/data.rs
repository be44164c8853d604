use std::path::Path;

use super::{Batch, LossOracle, TinyMlp};
use crate::error::{Error, Result};
use crate::linalg::{scaled_outer_sum, Matrix};
use crate::randsrc::{random_orthonormal, GaussStream, Seed};

/// Dataset recipes for [`make_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticTask {
    /// Gaussian inputs, labels `1[⟨w*, x⟩ > 0]`, each flipped with
    /// probability `flip`.
    Logistic { flip: f64 },
    /// `y = ⟨w*, x⟩ + noise·N(0, 1)`.
    LeastSquares { noise: f64 },
    /// Inputs are `blocks` stacked m×n matrices (row-major), each
    /// `signal·c·P_b + N(0, 1/(m·n))` where `P_b` is a fixed rank-`rank`
    /// pattern with unit Frobenius norm and `c ∼ N(0, 1)`; the label is
    /// `1[c > 0]`, flipped with probability `flip`.
    MatrixLogistic {
        shape: (usize, usize),
        blocks: usize,
        rank: usize,
        signal: f64,
        flip: f64,
    },
    /// Targets produced by a randomly initialized [`TinyMlp`] teacher plus
    /// `noise·N(0, 1)`.
    Teacher { h1: usize, h2: usize, noise: f64 },
}

/// The planted parameters behind a synthetic dataset, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn flip_label(stream: &mut GaussStream, y: f64, flip: f64) -> f64 {
    if flip > 0.0 && stream.uniform() < flip {
        1.0 - y
    } else {
        y
    }
}

/// Deterministic dataset of `n` rows and `d` features.
///
/// For [`SyntheticTask::MatrixLogistic`] the feature count is fixed by the
/// recipe and `d` must equal `blocks·m·n`.
pub fn make_synthetic(
    task: &SyntheticTask,
    seed: Seed,
    n: usize,
    d: usize,
) -> Result<(Batch, GroundTruth)> {
    if n == 0 || d == 0 {
        return Err(Error::Config("synthetic data needs n >= 1 and d >= 1".into()));
    }
    let mut truth_stream = GaussStream::derived(seed, "planted", 0);
    let mut x_stream = GaussStream::derived(seed, "inputs", 0);
    let mut y_stream = GaussStream::derived(seed, "labels", 0);
    match *task {
        SyntheticTask::Logistic { flip } | SyntheticTask::LeastSquares { noise: flip } => {
            let w = truth_stream.gauss_vec(d);
            let x = x_stream.gauss_matrix(n, d);
            let y = (0..n)
                .map(|i| {
                    let s: f64 = x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum();
                    match task {
                        SyntheticTask::Logistic { .. } => {
                            flip_label(&mut y_stream, f64::from(u8::from(s > 0.0)), flip)
                        }
                        _ => s + flip * y_stream.normal(),
                    }
                })
                .collect();
            Ok((Batch::new(x, y)?, GroundTruth { weights: w, bias: 0.0 }))
        }
        SyntheticTask::MatrixLogistic {
            shape: (m, k),
            blocks,
            rank,
            signal,
            flip,
        } => {
            if blocks * m * k != d {
                return Err(Error::dim(format!(
                    "matrix task has {} features but d = {d}",
                    blocks * m * k
                )));
            }
            if rank == 0 || rank > m.min(k) {
                return Err(Error::dim(format!(
                    "pattern rank {rank} does not fit {m}x{k}"
                )));
            }
            let spectrum = vec![1.0 / (rank as f64).sqrt(); rank];
            let mut pattern = Vec::with_capacity(d);
            for _ in 0..blocks {
                let a = random_orthonormal(&mut truth_stream, m, rank);
                let b = random_orthonormal(&mut truth_stream, k, rank);
                pattern.extend_from_slice(scaled_outer_sum(&a, &spectrum, &b)?.as_slice());
            }
            let noise_sd = 1.0 / ((m * k) as f64).sqrt();
            let mut x = x_stream.gauss_matrix(n, d);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let c = y_stream.normal();
                for (v, p) in x.as_mut_slice()[i * d..(i + 1) * d].iter_mut().zip(&pattern) {
                    *v = *v * noise_sd + signal * c * p;
                }
                y.push(flip_label(&mut y_stream, f64::from(u8::from(c > 0.0)), flip));
            }
            Ok((
                Batch::new(x, y)?,
                GroundTruth {
                    weights: pattern,
                    bias: 0.0,
                },
            ))
        }
        SyntheticTask::Teacher { h1, h2, noise } => {
            let teacher = TinyMlp::new(d, h1, h2)?;
            let params = teacher.init_params(seed.derive("teacher", 0));
            let x = x_stream.gauss_matrix(n, d);
            let probe = Batch::new(x, vec![0.0; n])?;
            let mut y = teacher.predict(&params, &probe)?;
            for v in &mut y {
                *v += noise * y_stream.normal();
            }
            Ok((
                Batch::new(probe.inputs, y)?,
                GroundTruth {
                    weights: params.flatten(),
                    bias: 0.0,
                },
            ))
        }
    }
}

/// Sequential mini-batches over a fixed dataset, reshuffled every epoch.
///
/// The batch for a step is a pure function of `(seed, step)`: epoch `e` uses
/// the permutation drawn from `seed.derive("epoch", e)`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: Seed,
}

impl BatchSampler {
    /// `batch_size` of 0 or ≥ `n` means full batch.
    pub fn new(n: usize, batch_size: usize, seed: Seed) -> Self {
        let batch_size = if batch_size == 0 { n } else { batch_size.min(n) };
        BatchSampler {
            n,
            batch_size,
            seed,
        }
    }

    pub fn is_full_batch(&self) -> bool {
        self.batch_size >= self.n
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size.max(1))
    }

    pub fn indices(&self, step: u64) -> Vec<usize> {
        if self.is_full_batch() {
            return (0..self.n).collect();
        }
        let per = self.batches_per_epoch() as u64;
        let epoch = step / per;
        let j = (step % per) as usize;
        let mut perm: Vec<usize> = (0..self.n).collect();
        GaussStream::derived(self.seed, "epoch", epoch).shuffle(&mut perm);
        let lo = j * self.batch_size;
        let hi = (lo + self.batch_size).min(self.n);
        perm[lo..hi].to_vec()
    }

    pub fn batch(&self, data: &Batch, step: u64) -> Batch {
        if self.is_full_batch() {
            return data.clone();
        }
        data.select(&self.indices(step))
    }
}

/// Which CSV columns feed a [`Batch`]. `features: None` takes every column
/// except the label, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    pub label: String,
    pub features: Option<Vec<String>>,
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Batch> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| {
                Error::Parse(format!(
                    "{}: missing column {name:?} in header",
                    path.display()
                ))
            })
    };
    let label_col = find(&schema.label)?;
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&c| c != label_col).collect(),
    };
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // Row numbers are 1-based file lines; the header is line 1.
        let line = r + 2;
        let record =
            record.map_err(|e| Error::Parse(format!("{}: row {line}: {e}", path.display())))?;
        let cell = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| {
                Error::Parse(format!(
                    "{}: row {line}, column {} ({:?}): non-numeric value {raw:?}",
                    path.display(),
                    c + 1,
                    &headers[c]
                ))
            })
        };
        for &c in &feature_cols {
            data.push(cell(c)?);
        }
        targets.push(cell(label_col)?);
    }
    if targets.is_empty() {
        return Err(Error::Parse(format!("{}: no rows", path.display())));
    }
    let inputs = Matrix::from_vec(targets.len(), feature_cols.len(), data)?;
    Batch::new(inputs, targets)
}
