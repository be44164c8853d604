//! Shared fixtures for the criterion benches.

use pgap_core::objectives::{LossOracle, RankQuadratic};
use pgap_core::optimizer::{OptimizerConfig, TrainState};
use pgap_core::randsrc::{random_orthonormal, GaussStream, Seed};
use pgap_core::subspace::SubspaceBasis;
use pgap_core::Matrix;

/// Square sides used by the kernel benches.
pub const SIDES: [usize; 3] = [64, 256, 512];

pub fn gauss(rows: usize, cols: usize, seed: u64) -> Matrix {
    GaussStream::new(Seed(seed)).gauss_matrix(rows, cols)
}

/// A rank-`r` basis with orthonormal frames on an `m × n` matrix.
pub fn basis(m: usize, n: usize, r: usize, seed: u64) -> SubspaceBasis {
    let mut stream = GaussStream::new(Seed(seed));
    let u = random_orthonormal(&mut stream, m, r);
    let v = random_orthonormal(&mut stream, n, r);
    let s = (1..=r).rev().map(|i| i as f64).collect();
    SubspaceBasis::new(u, s, v, 0).expect("orthonormal frames")
}

/// Two `side × side` planted targets of rank 4.
pub fn quad_task(side: usize) -> RankQuadratic {
    RankQuadratic::planted(&[(side, side), (side, side)], &[1.0, 0.5, 0.25, 0.125], Seed(3)).expect("rank fits")
}

pub fn step_config(kind_pgap: bool) -> OptimizerConfig {
    let mut cfg = if kind_pgap { OptimizerConfig::pgap() } else { OptimizerConfig::mezo() };
    cfg.eta = 1e-3;
    cfg.steps = 1_000_000;
    cfg.seed = Seed(11);
    cfg
}

pub fn fresh_state(task: &RankQuadratic) -> TrainState {
    TrainState::new(task.init_params(Seed(0)))
}
