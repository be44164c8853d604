//! Training loops for P-GAP and the plain Gaussian baseline.
//!
//! Random addresses used by a run with seed `s`:
//!
//! * step `t`, perturbation `i`, parameter `ℓ`:
//!   `s.derive("step", t).derive("perturb", i).derive("param", ℓ)`; the sign
//!   `ξ` of an aligned entry comes from that seed's `("xi", 0)` child
//! * refresh at step `t`: `s.derive("refresh", t)`, probes below it
//! * mini-batches: `s.derive("batches", 0)`
//!
//! The baseline uses the same addresses for its full Gaussian perturbations.

mod checkpoint;

pub use checkpoint::{checkpoint_load, checkpoint_save, decode, encode, write_atomic, FORMAT_VERSION, MAGIC};

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{apply_scaled, two_point_coeff, PerturbEntry, PerturbPlan, ZoStepRecord};
use crate::objectives::{eval_loss, Batch, BatchSampler, LossOracle, ParamKind, ParamSet};
use crate::randsrc::{GaussStream, Seed};
use crate::subspace::{lower_dim_generate, ProbeConfig, SubspaceBasis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Linear decay from `base` at `t = 0` to zero at `t = T`.
    Linear,
}

pub fn schedule_value(kind: Schedule, base: f64, t: u64, total: u64) -> f64 {
    match kind {
        Schedule::Constant => base,
        Schedule::Linear if total == 0 => base,
        Schedule::Linear => base * (1.0 - t.min(total) as f64 / total as f64),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Pgap,
    Mezo,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Pgap => "pgap",
            OptimizerKind::Mezo => "mezo",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgap" => Ok(OptimizerKind::Pgap),
            "mezo" => Ok(OptimizerKind::Mezo),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (expected pgap or mezo)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub eta: f64,
    pub eps: f64,
    pub steps: u64,
    pub schedule_lr: Schedule,
    /// Refresh window.
    pub k: u64,
    /// Probes per refresh.
    pub h: usize,
    /// Subspace rank.
    pub r: usize,
    pub delta0: f64,
    pub schedule_delta: Schedule,
    /// Perturbations averaged per step.
    pub n_avg: usize,
    pub seed: Seed,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
}

impl OptimizerConfig {
    /// k = 100, h = 10, r = 8, ε = 1e-2, δ linear from 2 to 0.
    pub fn pgap() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Pgap,
            eta: 1e-4,
            eps: 1e-2,
            steps: 1000,
            schedule_lr: Schedule::Constant,
            k: 100,
            h: 10,
            r: 8,
            delta0: 2.0,
            schedule_delta: Schedule::Linear,
            n_avg: 1,
            seed: Seed(0),
            batch_size: 0,
        }
    }

    /// Same skeleton with ε = 1e-3; subspace fields are ignored.
    pub fn mezo() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Mezo,
            eps: 1e-3,
            ..OptimizerConfig::pgap()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and > 0, got {v}")))
            }
        };
        positive(self.eta, "eta")?;
        positive(self.eps, "eps")?;
        if self.n_avg == 0 {
            return Err(Error::Config("n_avg must be >= 1".into()));
        }
        if self.kind == OptimizerKind::Pgap {
            if self.k == 0 || self.h == 0 || self.r == 0 {
                return Err(Error::Config(format!(
                    "k, h and r must be >= 1 (k = {}, h = {}, r = {})",
                    self.k, self.h, self.r
                )));
            }
            if !(self.delta0 >= 0.0 && self.delta0.is_finite()) {
                return Err(Error::Config(format!(
                    "delta0 must be finite and >= 0, got {}",
                    self.delta0
                )));
            }
        }
        Ok(())
    }

    pub fn eta_at(&self, t: u64) -> f64 {
        schedule_value(self.schedule_lr, self.eta, t, self.steps)
    }

    pub fn delta_at(&self, t: u64) -> f64 {
        schedule_value(self.schedule_delta, self.delta0, t, self.steps)
    }
}

/// Parameters, current bases (per parameter index) and step counter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamSet,
    pub bases: Vec<Option<Arc<SubspaceBasis>>>,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ParamSet) -> Self {
        let bases = vec![None; params.len()];
        TrainState {
            params,
            bases,
            step: 0,
        }
    }
}

/// What one optimizer step did.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: u64,
    /// Mean of the per-perturbation coefficients.
    pub rho: f64,
    pub delta: f64,
    pub eta: f64,
    pub evals: Vec<ZoStepRecord>,
}

fn param_seed(cfg: &OptimizerConfig, t: u64, i: usize, l: usize) -> Seed {
    cfg.seed
        .derive("step", t)
        .derive("perturb", i as u64)
        .derive("param", l as u64)
}

/// Sign `ξ ∈ {−1, +1}` attached to an aligned perturbation seed.
pub fn xi_for(seed: Seed) -> f64 {
    GaussStream::derived(seed, "xi", 0).rademacher()
}

/// The perturbation plans a step at `state.step` uses, rebuilt from the
/// run seed alone (plus the current bases for P-GAP).
pub fn step_plans(state: &TrainState, cfg: &OptimizerConfig) -> Result<Vec<PerturbPlan>> {
    let t = state.step;
    let delta = cfg.delta_at(t);
    (0..cfg.n_avg)
        .map(|i| {
            let entries = state
                .params
                .iter()
                .enumerate()
                .map(|(l, p)| {
                    let seed = param_seed(cfg, t, i, l);
                    if cfg.kind == OptimizerKind::Mezo || p.kind() == ParamKind::Dense {
                        return Ok(PerturbEntry::FullGaussian { seed });
                    }
                    let basis = state.bases[l].as_ref().ok_or_else(|| {
                        Error::State(format!("no subspace basis for {:?} at step {t}", p.name()))
                    })?;
                    if !basis.is_fresh(t, cfg.k) {
                        return Err(Error::State(format!(
                            "basis for {:?} from step {} is stale at step {t} (k = {})",
                            p.name(),
                            basis.born_at_step,
                            cfg.k
                        )));
                    }
                    Ok(PerturbEntry::SubspaceAligned {
                        seed,
                        basis: Arc::clone(basis),
                        delta,
                        xi: xi_for(seed),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            PerturbPlan::new(cfg.eps, entries)
        })
        .collect()
}

/// `W ← W − η·(ρᵢ/n)·Zᵢ` for every plan, in plan order.
pub fn apply_update(params: &mut ParamSet, plans: &[PerturbPlan], rhos: &[f64], eta: f64) -> Result<()> {
    let n = plans.len() as f64;
    for (plan, rho) in plans.iter().zip(rhos) {
        apply_scaled(params, plan, -eta * rho / n)?;
    }
    Ok(())
}

fn zo_step(state: &mut TrainState, cfg: &OptimizerConfig, oracle: &dyn LossOracle, batch: &Batch) -> Result<StepRecord> {
    let t = state.step;
    let plans = step_plans(state, cfg)?;
    let mut evals = Vec::with_capacity(plans.len());
    for plan in &plans {
        let mut rec = two_point_coeff(oracle, &state.params, plan, batch)?;
        rec.step = t;
        evals.push(rec);
    }
    let rhos: Vec<f64> = evals.iter().map(|r| r.rho).collect();
    let eta = cfg.eta_at(t);
    apply_update(&mut state.params, &plans, &rhos, eta)?;
    state.step += 1;
    Ok(StepRecord {
        step: t,
        rho: rhos.iter().sum::<f64>() / rhos.len() as f64,
        delta: if cfg.kind == OptimizerKind::Pgap { cfg.delta_at(t) } else { 0.0 },
        eta,
        evals,
    })
}

/// One P-GAP step: aligned low-rank perturbations for matrix parameters,
/// full Gaussian ones for the rest, then the SGD-form update.
pub fn pgap_step(state: &mut TrainState, cfg: &OptimizerConfig, oracle: &dyn LossOracle, batch: &Batch) -> Result<StepRecord> {
    if cfg.kind != OptimizerKind::Pgap {
        return Err(Error::Config("pgap_step called with a non-P-GAP config".into()));
    }
    zo_step(state, cfg, oracle, batch)
}

/// One baseline step with full Gaussian perturbations on every parameter.
pub fn mezo_step(state: &mut TrainState, cfg: &OptimizerConfig, oracle: &dyn LossOracle, batch: &Batch) -> Result<StepRecord> {
    let mezo = OptimizerConfig {
        kind: OptimizerKind::Mezo,
        ..cfg.clone()
    };
    zo_step(state, &mezo, oracle, batch)
}

/// Recomputes every `MatrixSubspace` basis at the current step. Returns the
/// probe coefficients.
pub fn refresh(state: &mut TrainState, cfg: &OptimizerConfig, oracle: &dyn LossOracle, batch: &Batch) -> Result<Vec<f64>> {
    let t = state.step;
    let probe = ProbeConfig {
        h: cfg.h,
        r: cfg.r,
        eps: cfg.eps,
    };
    let (mut bases, rhos) =
        lower_dim_generate(oracle, &state.params, batch, &probe, cfg.seed.derive("refresh", t), t)?;
    for (l, p) in state.params.iter().enumerate() {
        state.bases[l] = bases.remove(p.name()).map(Arc::new);
    }
    Ok(rhos)
}

/// One row of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    /// Full-data loss before this step's update.
    pub loss: f64,
    pub rho: f64,
    pub delta: f64,
    pub eta: f64,
    pub refresh: bool,
    /// Wall-clock milliseconds spent in the step, or 0 when timing is off.
    pub ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

/// Shortest round-trip decimal; scientific notation outside [1e-4, 1e15).
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

impl RunLog {
    pub const HEADER: &'static str = "step,loss,rho,delta,eta,refresh,ms";

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.step,
                fmt_f64(r.loss),
                fmt_f64(r.rho),
                fmt_f64(r.delta),
                fmt_f64(r.eta),
                u8::from(r.refresh),
                fmt_f64(r.ms)
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }

    /// First step whose pre-update loss is at or below `target`.
    pub fn first_step_at_or_below(&self, target: f64) -> Option<u64> {
        self.rows.iter().find(|r| r.loss <= target).map(|r| r.step)
    }
}

/// Run-level switches that do not affect the optimization itself.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub target_loss: Option<f64>,
    /// Stop as soon as the target is reached.
    pub stop_at_target: bool,
    /// Fill the `ms` column with wall-clock time. Off by default so logs of
    /// repeated runs are byte-identical.
    pub record_timing: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub log: RunLog,
    pub params: ParamSet,
    /// Full-data loss of the returned parameters.
    pub final_loss: f64,
    /// Number of updates after which the loss first met the target.
    pub steps_to_target: Option<u64>,
    pub wall_ms: f64,
}

/// Runs `cfg.steps` steps from `init`, calling `on_row` after each one.
///
/// For P-GAP the bases are refreshed before the update of every step `t`
/// with `t mod k = 0`, on that step's mini-batch.
pub fn run_observed(
    cfg: &OptimizerConfig,
    oracle: &dyn LossOracle,
    data: &Batch,
    init: ParamSet,
    opts: &RunOptions,
    mut on_row: impl FnMut(&LogRow),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.seed.derive("batches", 0));
    let mut state = TrainState::new(init);
    let mut log = RunLog::default();
    let mut steps_to_target = None;
    for t in 0..cfg.steps {
        let step_started = Instant::now();
        let loss = eval_loss(oracle, &state.params, data)?;
        if steps_to_target.is_none() && opts.target_loss.is_some_and(|x| loss <= x) {
            steps_to_target = Some(t);
            if opts.stop_at_target {
                break;
            }
        }
        let batch = sampler.batch(data, t);
        let refreshed = cfg.kind == OptimizerKind::Pgap && t % cfg.k == 0;
        if refreshed {
            refresh(&mut state, cfg, oracle, &batch)?;
        }
        let rec = zo_step(&mut state, cfg, oracle, &batch)?;
        let row = LogRow {
            step: t,
            loss,
            rho: rec.rho,
            delta: rec.delta,
            eta: rec.eta,
            refresh: refreshed,
            ms: if opts.record_timing {
                step_started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        on_row(&row);
        log.rows.push(row);
    }
    let final_loss = eval_loss(oracle, &state.params, data)?;
    if steps_to_target.is_none() && opts.target_loss.is_some_and(|x| final_loss <= x) {
        steps_to_target = Some(state.step);
    }
    Ok(RunOutcome {
        log,
        params: state.params,
        final_loss,
        steps_to_target,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn run(
    cfg: &OptimizerConfig,
    oracle: &dyn LossOracle,
    data: &Batch,
    init: ParamSet,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    run_observed(cfg, oracle, data, init, opts, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::objectives::{ConstantOracle, EvalCounter, Quadratic, RankQuadratic};

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_value(Schedule::Linear, 2.0, 100, 100), 0.0);
        assert_eq!(schedule_value(Schedule::Linear, 2.0, 50, 100), 1.0);
        assert_eq!(schedule_value(Schedule::Constant, 2.0, 77, 100), 2.0);
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizerConfig::pgap();
        c.validate().unwrap();
        c.eps = 0.0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::pgap();
        c.k = 0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::mezo();
        c.k = 0;
        c.validate().unwrap();
    }

    #[test]
    fn zero_steps_is_empty() {
        let q = Quadratic::identity(3);
        let init = q.init_params(Seed(1));
        let mut cfg = OptimizerConfig::mezo();
        cfg.steps = 0;
        let out = run(&cfg, &q, &Batch::empty(), init.clone(), &RunOptions::default()).unwrap();
        assert!(out.log.is_empty());
        assert!(out.params.bit_eq(&init));
    }

    #[test]
    fn constant_oracle_leaves_params() {
        let c = ConstantOracle {
            value: 1.0,
            shape: (3, 3),
        };
        let mut p = c.init_params(Seed(0));
        *p.tensor_mut(0) = Matrix::filled(3, 3, 0.5);
        let mut st = TrainState::new(p.clone());
        let rec = mezo_step(&mut st, &OptimizerConfig::mezo(), &c, &Batch::empty()).unwrap();
        assert_eq!(rec.rho, 0.0);
        assert!(st.params.bit_eq(&p));
    }

    #[test]
    fn pgap_without_basis_is_state_error() {
        let rq = RankQuadratic::planted(&[(8, 8)], &[1.0], Seed(0)).unwrap();
        let mut st = TrainState::new(rq.init_params(Seed(0)));
        let err = pgap_step(&mut st, &OptimizerConfig::pgap(), &rq, &Batch::empty()).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn evaluation_counts() {
        let rq: Arc<dyn LossOracle> =
            Arc::new(RankQuadratic::planted(&[(10, 9), (6, 6)], &[2.0, 1.0], Seed(0)).unwrap());
        let counter = EvalCounter::new(rq.clone());
        let mut cfg = OptimizerConfig::pgap();
        cfg.r = 4;
        cfg.n_avg = 3;
        let mut st = TrainState::new(rq.init_params(Seed(0)));
        refresh(&mut st, &cfg, &counter, &Batch::empty()).unwrap();
        assert_eq!(counter.calls(), 2 * cfg.h);
        counter.reset();
        let rec = pgap_step(&mut st, &cfg, &counter, &Batch::empty()).unwrap();
        assert_eq!(counter.calls(), 2 * cfg.n_avg);
        assert_eq!(rec.evals.len(), 3);
        let seeds: Vec<_> = rec.evals.iter().map(|e| e.plan.entries()[0].seed()).collect();
        assert_ne!(seeds[0], seeds[1]);
    }

    #[test]
    fn runs_are_deterministic() {
        let rq = RankQuadratic::planted(&[(12, 10)], &[3.0, 1.0], Seed(2)).unwrap();
        let mut cfg = OptimizerConfig::pgap();
        cfg.steps = 30;
        cfg.k = 10;
        cfg.r = 2;
        cfg.eta = 1e-2;
        let a = run(&cfg, &rq, &Batch::empty(), rq.init_params(Seed(0)), &RunOptions::default()).unwrap();
        let b = run(&cfg, &rq, &Batch::empty(), rq.init_params(Seed(0)), &RunOptions::default()).unwrap();
        assert_eq!(a.log.to_csv_string(), b.log.to_csv_string());
        assert!(a.params.bit_eq(&b.params));
        assert_eq!(a.log.len(), 30);
        assert_eq!(a.log.rows.iter().filter(|r| r.refresh).count(), 3);
    }

    #[test]
    fn fmt_examples() {
        assert_eq!(fmt_f64(0.5), "0.5");
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(1.5e-7), "1.5e-7");
        assert_eq!(fmt_f64(-3.0), "-3");
    }
}
