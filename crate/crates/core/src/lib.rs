//! Zeroth-order optimization with projected gradient-aligned perturbations.
//!
//! The crate is organized bottom-up:
//!
//! * [`linalg`] dense matrices, Frobenius algebra, truncated SVD
//! * [`randsrc`] seed-addressable random streams
//! * [`objectives`] loss oracles, parameter sets and datasets
//! * [`estimator`] two-point gradient estimation with seed-regenerated perturbations
//! * [`align`] hyperplane projection of perturbations and the low-rank lift
//! * [`subspace`] probe-based gradient subspace estimation
//! * [`optimizer`] the P-GAP and Gaussian (MeZO-style) training loops, checkpoints
//! * [`lab`] Monte-Carlo verification suites

pub mod align;
pub mod error;
pub mod estimator;
pub mod lab;
pub mod linalg;
pub mod objectives;
pub mod optimizer;
pub mod randsrc;
pub mod subspace;

pub use error::{Error, Result};
pub use linalg::{frob_inner, frob_norm, truncated_svd, Matrix, SvdTriple};
pub use randsrc::{derive_substream, GaussStream, Seed};
