//! Run configuration: the TOML file schema, flag overrides and defaults.
//!
//! Every key is optional in the file. [`RunConfig::resolve`] fills the gaps,
//! and the resolved form is what `config.echo.toml` records, so an echo can
//! be fed back through `--config` unchanged.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pgap_core::optimizer::{OptimizerConfig, OptimizerKind, Schedule};
use pgap_core::randsrc::Seed;
use serde::{Deserialize, Serialize};

pub const TASKS: [&str; 6] = ["quad_lowrank", "matrix_logistic", "logistic", "least_squares", "mlp", "csv"];

pub const DEFAULTS_HELP: &str = "\
Configuration file (TOML, unknown keys rejected). Flags override file keys;
file keys override these defaults.

[task]
  name = \"quad_lowrank\"     one of quad_lowrank, matrix_logistic, logistic,
                             least_squares, mlp, csv
  seed                       data and initialization seed (default: optimizer seed)
  shapes = [[32,32],[32,32]] matrix blocks (quad_lowrank, matrix_logistic)
  spectrum = [1,0.5,0.333..,0.25]  planted singular values (quad_lowrank)
  rank = 1                   pattern rank (matrix_logistic)
  signal = 0.3, flip = 0.0   matrix_logistic / logistic label recipe
  n = 512                    rows of synthetic data (mlp: 256)
  d = 64                     features (logistic, least_squares; mlp: 32)
  noise = 0.1                target noise (least_squares, mlp)
  hidden = [64,32]           hidden widths (mlp)
  lora_rank                  wrap matrix parameters with adapters of this rank
  path, label, features      csv: file, label column, feature columns (default: all others)
  link = \"logistic\"          csv: logistic or identity

[optimizer]
  kind = \"pgap\"              pgap or mezo
  eta = 1e-4                 learning rate
  eps                        perturbation scale (pgap 1e-2, mezo 1e-3)
  steps = 1000
  window = 100               refresh window k
  probes = 10                probes per refresh h
  rank = 8                   subspace rank r
  delta0 = 2.0               initial alignment strength
  n_avg = 1                  perturbations per step
  seed = 0
  batch_size = 0             0 means full batch
  target_loss                loss target for steps-to-target
  compare = [{kind=\"pgap\", eta=..}, {kind=\"mezo\"}]  entries for `compare`
  baseline                   label of the compare entry speedups are relative to
                             (default: the last entry)

[schedules]
  lr = \"constant\"            constant or linear (decays to 0 at the last step)
  delta = \"linear\"

[lab]
  seed = 0, samples = 1000000
  q_list = [1,2,4,8,16,32], norm_u = 1.0             variance
  dims = [2,8,32]                                    moments
  angle_q = [2,10,50]                                angle
  eps_list = [0.3,0.1,0.03]                          bias
  w_list = [1,2,4,...,256], sigma = 1.0, trials = 4000  probe-mse
  dk_d = 64, dk_rank = 4, dk_sigma = 1.0, dk_sigma_min = 1.0, dk_trials = 200  davis-kahan
  dk_probes                  probe count (default: the 48(d+2)σ²/σ_min² bound)
  dispersion_samples = 100000, bins = 50             dispersion

[output]
  dir = \"out\"
  record_timing = false      fill the runlog ms column (breaks byte-identical logs)

Environment: PGAP_THREADS caps how many compare runs execute concurrently.";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub schedules: SchedulesSection,
    #[serde(default)]
    pub lab: LabSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub name: Option<String>,
    pub seed: Option<u64>,
    pub shapes: Option<Vec<[usize; 2]>>,
    pub spectrum: Option<Vec<f64>>,
    pub rank: Option<usize>,
    pub signal: Option<f64>,
    pub flip: Option<f64>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub noise: Option<f64>,
    pub hidden: Option<[usize; 2]>,
    pub lora_rank: Option<usize>,
    pub path: Option<PathBuf>,
    pub label: Option<String>,
    pub features: Option<Vec<String>>,
    pub link: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareEntry {
    pub kind: String,
    pub label: Option<String>,
    pub eta: Option<f64>,
    pub eps: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: Option<String>,
    pub eta: Option<f64>,
    pub eps: Option<f64>,
    pub steps: Option<u64>,
    pub window: Option<u64>,
    pub probes: Option<usize>,
    pub rank: Option<usize>,
    pub delta0: Option<f64>,
    pub n_avg: Option<usize>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub target_loss: Option<f64>,
    pub compare: Option<Vec<CompareEntry>>,
    pub baseline: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulesSection {
    pub lr: Option<String>,
    pub delta: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabSection {
    pub seed: Option<u64>,
    pub samples: Option<u64>,
    pub q_list: Option<Vec<usize>>,
    pub norm_u: Option<f64>,
    pub dims: Option<Vec<usize>>,
    pub angle_q: Option<Vec<usize>>,
    pub eps_list: Option<Vec<f64>>,
    pub w_list: Option<Vec<usize>>,
    pub sigma: Option<f64>,
    pub trials: Option<u64>,
    pub dk_d: Option<usize>,
    pub dk_rank: Option<usize>,
    pub dk_sigma: Option<f64>,
    pub dk_sigma_min: Option<f64>,
    pub dk_trials: Option<usize>,
    pub dk_probes: Option<usize>,
    pub dispersion_samples: Option<usize>,
    pub bins: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub record_timing: Option<bool>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub optimizer: Option<String>,
    pub task: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub steps: Option<u64>,
    pub target_loss: Option<f64>,
    pub rank: Option<usize>,
    pub window: Option<u64>,
    pub probes: Option<usize>,
    pub delta0: Option<f64>,
    pub samples: Option<u64>,
    pub trials: Option<u64>,
    pub bins: Option<usize>,
}

/// Raised when `--config` names a file that does not exist.
#[derive(Debug)]
pub struct MissingConfig(pub PathBuf);

impl std::fmt::Display for MissingConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config file not found: {}", self.0.display())
    }
}

impl std::error::Error for MissingConfig {}

pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
    if !path.exists() {
        return Err(MissingConfig(path.to_path_buf()).into());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text).with_context(|| format!("in config {}", path.display()))
}

pub fn parse(text: &str) -> anyhow::Result<RunConfig> {
    Ok(toml::from_str(text)?)
}

fn parse_schedule(s: &str) -> anyhow::Result<Schedule> {
    match s {
        "constant" => Ok(Schedule::Constant),
        "linear" => Ok(Schedule::Linear),
        other => bail!("unknown schedule {other:?} (expected constant or linear)"),
    }
}

fn schedule_name(s: Schedule) -> &'static str {
    match s {
        Schedule::Constant => "constant",
        Schedule::Linear => "linear",
    }
}

fn default_for(kind: OptimizerKind) -> OptimizerConfig {
    match kind {
        OptimizerKind::Pgap => OptimizerConfig::pgap(),
        OptimizerKind::Mezo => OptimizerConfig::mezo(),
    }
}

fn set<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn fill<T>(slot: &mut Option<T>, default: T) {
    if slot.is_none() {
        *slot = Some(default);
    }
}

impl RunConfig {
    /// Applies `flags` over the file values, then fills every remaining key
    /// with its default and validates the result.
    pub fn resolve(mut self, flags: &Overrides) -> anyhow::Result<RunConfig> {
        let o = &mut self.optimizer;
        set(&mut o.kind, flags.optimizer.clone());
        set(&mut o.seed, flags.seed);
        set(&mut o.steps, flags.steps);
        set(&mut o.target_loss, flags.target_loss);
        set(&mut o.rank, flags.rank);
        set(&mut o.window, flags.window);
        set(&mut o.probes, flags.probes);
        set(&mut o.delta0, flags.delta0);
        set(&mut self.task.name, flags.task.clone());
        set(&mut self.output.dir, flags.out.clone());
        set(&mut self.lab.samples, flags.samples);
        set(&mut self.lab.trials, flags.trials);
        set(&mut self.lab.bins, flags.bins);

        let o = &mut self.optimizer;
        fill(&mut o.kind, "pgap".to_string());
        let kind: OptimizerKind = o.kind.as_deref().unwrap_or("pgap").parse()?;
        let base = default_for(kind);
        fill(&mut o.eta, base.eta);
        fill(&mut o.eps, base.eps);
        fill(&mut o.steps, base.steps);
        fill(&mut o.window, base.k);
        fill(&mut o.probes, base.h);
        fill(&mut o.rank, base.r);
        fill(&mut o.delta0, base.delta0);
        fill(&mut o.n_avg, base.n_avg);
        fill(&mut o.seed, base.seed.0);
        fill(&mut o.batch_size, base.batch_size);
        if let Some(entries) = &o.compare {
            for e in entries {
                e.kind.parse::<OptimizerKind>()?;
            }
        }

        let s = &mut self.schedules;
        fill(&mut s.lr, schedule_name(base.schedule_lr).to_string());
        fill(&mut s.delta, schedule_name(base.schedule_delta).to_string());
        parse_schedule(s.lr.as_deref().unwrap_or_default())?;
        parse_schedule(s.delta.as_deref().unwrap_or_default())?;

        let seed = self.optimizer.seed.unwrap_or_default();
        let t = &mut self.task;
        fill(&mut t.name, "quad_lowrank".to_string());
        let name = t.name.clone().unwrap_or_default();
        if !TASKS.contains(&name.as_str()) {
            bail!("unknown task {name:?} (expected one of {})", TASKS.join(", "));
        }
        fill(&mut t.seed, seed);
        match name.as_str() {
            "quad_lowrank" => {
                fill(&mut t.shapes, vec![[32, 32], [32, 32]]);
                fill(&mut t.spectrum, vec![1.0, 0.5, 1.0 / 3.0, 0.25]);
            }
            "matrix_logistic" => {
                fill(&mut t.shapes, vec![[32, 32], [32, 32]]);
                fill(&mut t.rank, 1);
                fill(&mut t.signal, 0.3);
                fill(&mut t.flip, 0.0);
                fill(&mut t.n, 512);
            }
            "logistic" => {
                fill(&mut t.d, 64);
                fill(&mut t.n, 512);
                fill(&mut t.flip, 0.0);
            }
            "least_squares" => {
                fill(&mut t.d, 64);
                fill(&mut t.n, 512);
                fill(&mut t.noise, 0.1);
            }
            "mlp" => {
                fill(&mut t.d, 32);
                fill(&mut t.hidden, [64, 32]);
                fill(&mut t.n, 256);
                fill(&mut t.noise, 0.1);
            }
            "csv" => {
                if t.path.is_none() {
                    bail!("task csv needs [task] path");
                }
                fill(&mut t.label, "label".to_string());
                fill(&mut t.link, "logistic".to_string());
            }
            _ => unreachable!("task names checked above"),
        }

        let l = &mut self.lab;
        fill(&mut l.seed, 0);
        fill(&mut l.samples, 1_000_000);
        fill(&mut l.q_list, vec![1, 2, 4, 8, 16, 32]);
        fill(&mut l.norm_u, 1.0);
        fill(&mut l.dims, vec![2, 8, 32]);
        fill(&mut l.angle_q, vec![2, 10, 50]);
        fill(&mut l.eps_list, vec![0.3, 0.1, 0.03]);
        fill(&mut l.w_list, (0..9).map(|k| 1usize << k).collect());
        fill(&mut l.sigma, 1.0);
        fill(&mut l.trials, 4000);
        fill(&mut l.dk_d, 64);
        fill(&mut l.dk_rank, 4);
        fill(&mut l.dk_sigma, 1.0);
        fill(&mut l.dk_sigma_min, 1.0);
        fill(&mut l.dk_trials, 200);
        fill(&mut l.dispersion_samples, 100_000);
        fill(&mut l.bins, 50);

        fill(&mut self.output.dir, PathBuf::from("out"));
        fill(&mut self.output.record_timing, false);

        self.optimizer_config()?.validate()?;
        Ok(self)
    }

    /// The optimizer settings of a resolved config.
    pub fn optimizer_config(&self) -> anyhow::Result<OptimizerConfig> {
        let o = &self.optimizer;
        let kind: OptimizerKind = o.kind.as_deref().unwrap_or("pgap").parse()?;
        let base = default_for(kind);
        Ok(OptimizerConfig {
            kind,
            eta: o.eta.unwrap_or(base.eta),
            eps: o.eps.unwrap_or(base.eps),
            steps: o.steps.unwrap_or(base.steps),
            schedule_lr: parse_schedule(self.schedules.lr.as_deref().unwrap_or("constant"))?,
            k: o.window.unwrap_or(base.k),
            h: o.probes.unwrap_or(base.h),
            r: o.rank.unwrap_or(base.r),
            delta0: o.delta0.unwrap_or(base.delta0),
            schedule_delta: parse_schedule(self.schedules.delta.as_deref().unwrap_or("linear"))?,
            n_avg: o.n_avg.unwrap_or(base.n_avg),
            seed: Seed(o.seed.unwrap_or(0)),
            batch_size: o.batch_size.unwrap_or(0),
        })
    }

    /// `(label, config)` per compare entry. A kind's own ε default applies
    /// unless the entry sets one.
    pub fn compare_configs(&self) -> anyhow::Result<Vec<(String, OptimizerConfig)>> {
        let entries = self.optimizer.compare.as_deref().unwrap_or_default();
        if entries.len() < 2 {
            bail!(
                "compare needs at least 2 entries in [optimizer] compare, got {}",
                entries.len()
            );
        }
        let shared = self.optimizer_config()?;
        let mut out: Vec<(String, OptimizerConfig)> = Vec::new();
        for e in entries {
            let kind: OptimizerKind = e.kind.parse()?;
            let mut label = e.label.clone().unwrap_or_else(|| kind.name().to_string());
            if out.iter().any(|(l, _)| *l == label) {
                let n = out.iter().filter(|(l, _)| l.starts_with(&label)).count();
                label = format!("{label}#{}", n + 1);
            }
            let cfg = OptimizerConfig {
                kind,
                eta: e.eta.unwrap_or(shared.eta),
                eps: e.eps.unwrap_or(default_for(kind).eps),
                ..shared.clone()
            };
            cfg.validate()?;
            out.push((label, cfg));
        }
        Ok(out)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.output.dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}
