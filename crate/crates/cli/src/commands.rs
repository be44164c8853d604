use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use pgap_core::lab::{self, McReport};
use pgap_core::objectives::eval_loss;
use pgap_core::optimizer::{checkpoint_save, fmt_f64, run_observed, write_atomic, OptimizerConfig, RunOptions, RunOutcome};
use pgap_core::randsrc::{GaussStream, Seed};
use serde::Serialize;

use crate::config::RunConfig;
use crate::tasks::{build, BuiltTask};

/// Exit status for a lab run whose checks did not all pass.
pub const EXIT_CHECKS_FAILED: u8 = 1;

fn prepare_out(cfg: &RunConfig) -> anyhow::Result<std::path::PathBuf> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("config.echo.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct Summary<'a> {
    optimizer: &'a str,
    task: &'a str,
    steps: u64,
    initial_loss: f64,
    final_loss: f64,
    target_loss: Option<f64>,
    steps_to_target: Option<u64>,
    wall_ms: f64,
}

fn run_one(label: &str, opt: &OptimizerConfig, task: &BuiltTask, cfg: &RunConfig) -> anyhow::Result<RunOutcome> {
    let opts = RunOptions {
        target_loss: cfg.optimizer.target_loss,
        stop_at_target: false,
        record_timing: cfg.output.record_timing.unwrap_or(false),
    };
    let every = (opt.steps / 10).max(1);
    run_observed(opt, task.oracle.as_ref(), &task.data, task.init.clone(), &opts, |row| {
        if row.step % every == 0 {
            println!("[{label}] step {} loss {}", row.step, fmt_f64(row.loss));
        }
    })
    .with_context(|| format!("running {label}"))
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<u8> {
    let opt = cfg.optimizer_config()?;
    let task = build(&cfg.task)?;
    let dir = prepare_out(cfg)?;
    let initial_loss = eval_loss(task.oracle.as_ref(), &task.init, &task.data)?;
    let out = run_one(opt.kind.name(), &opt, &task, cfg)?;
    write_text(&dir.join("runlog.csv"), &out.log.to_csv_string())?;
    checkpoint_save(&out.params, &dir.join("final.ckpt"))?;
    let summary = Summary {
        optimizer: opt.kind.name(),
        task: cfg.task.name.as_deref().unwrap_or_default(),
        steps: opt.steps,
        initial_loss,
        final_loss: out.final_loss,
        target_loss: cfg.optimizer.target_loss,
        steps_to_target: out.steps_to_target,
        wall_ms: out.wall_ms,
    };
    write_text(&dir.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    println!(
        "final loss {} after {} steps; artifacts in {}",
        fmt_f64(out.final_loss),
        opt.steps,
        dir.display()
    );
    Ok(0)
}

fn thread_cap() -> usize {
    std::env::var("PGAP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn cmd_compare(cfg: &RunConfig) -> anyhow::Result<u8> {
    let entries = cfg.compare_configs()?;
    let Some(target) = cfg.optimizer.target_loss else {
        bail!("compare needs a loss target ([optimizer] target_loss or --target-loss)");
    };
    let baseline = match &cfg.optimizer.baseline {
        Some(b) => entries
            .iter()
            .position(|(l, _)| l == b)
            .with_context(|| format!("baseline {b:?} is not a compare entry label"))?,
        None => entries.len() - 1,
    };
    let task = build(&cfg.task)?;
    let dir = prepare_out(cfg)?;

    let cap = thread_cap();
    let mut outcomes: Vec<Option<anyhow::Result<RunOutcome>>> = (0..entries.len()).map(|_| None).collect();
    let task = Arc::new(task);
    for chunk in (0..entries.len()).collect::<Vec<_>>().chunks(cap) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let (label, opt) = &entries[i];
                    let task = Arc::clone(&task);
                    (i, s.spawn(move || run_one(label, opt, &task, cfg)))
                })
                .collect();
            for (i, h) in handles {
                outcomes[i] = Some(h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("run thread panicked"))));
            }
        });
    }
    let outcomes: Vec<RunOutcome> = outcomes
        .into_iter()
        .map(|o| o.expect("every entry ran"))
        .collect::<anyhow::Result<_>>()?;

    let base_steps = outcomes[baseline].steps_to_target;
    let mut csv = String::from("optimizer,steps_to_target,final_loss,wall_ms,speedup\n");
    for ((label, _), out) in entries.iter().zip(&outcomes) {
        write_text(&dir.join(format!("runlog.{label}.csv")), &out.log.to_csv_string())?;
        let steps = out
            .steps_to_target
            .map_or_else(|| "not reached".to_string(), |s| s.to_string());
        let speedup = match (base_steps, out.steps_to_target) {
            (Some(b), Some(t)) if t > 0 => fmt_f64(b as f64 / t as f64),
            (Some(0), Some(0)) => "1".to_string(),
            _ => "not reached".to_string(),
        };
        csv += &format!(
            "{label},{steps},{},{},{speedup}\n",
            fmt_f64(out.final_loss),
            fmt_f64(out.wall_ms)
        );
        println!("{label}: steps to {} {steps}, speedup vs {} {speedup}", fmt_f64(target), entries[baseline].0);
    }
    write_text(&dir.join("compare.csv"), &csv)?;
    Ok(0)
}

#[derive(Serialize)]
struct DispersionOut<'a> {
    report: &'a McReport,
    gaussian: &'a lab::Dispersion,
    pgap: &'a lab::Dispersion,
}

pub fn cmd_lab(suite: &str, cfg: &RunConfig) -> anyhow::Result<u8> {
    if !lab::SUITES.contains(&suite) {
        return Err(crate::UnknownSuite(suite.to_string()).into());
    }
    let l = &cfg.lab;
    let seed = Seed(l.seed.unwrap_or(0));
    let samples = l.samples.unwrap_or(1_000_000);
    let dir = prepare_out(cfg)?;
    let reports: Vec<McReport> = match suite {
        "variance" => lab::variance_vs_dim(l.q_list.as_deref().unwrap_or_default(), l.norm_u.unwrap_or(1.0), samples, seed)?,
        "moments" => {
            let mut out = Vec::new();
            for &n in l.dims.as_deref().unwrap_or_default() {
                let y = GaussStream::derived(seed, "y", n as u64).gauss_vec(n);
                out.extend(lab::gaussian_moment_suite(n, &y, samples, seed)?);
            }
            out
        }
        "angle" => l
            .angle_q
            .as_deref()
            .unwrap_or_default()
            .iter()
            .map(|&q| lab::angle_suite(q, samples, seed))
            .collect::<pgap_core::Result<_>>()?,
        "bias" => lab::bias_rate_suite(l.eps_list.as_deref().unwrap_or_default(), samples, seed)?,
        "probe-mse" => lab::probe_mse_suite(
            l.w_list.as_deref().unwrap_or_default(),
            l.sigma.unwrap_or(1.0),
            l.trials.unwrap_or(4000),
            seed,
        )?,
        "davis-kahan" => {
            let (d, sigma, sigma_min) = (l.dk_d.unwrap_or(64), l.dk_sigma.unwrap_or(1.0), l.dk_sigma_min.unwrap_or(1.0));
            let w = l.dk_probes.unwrap_or_else(|| lab::davis_kahan_probes(d, sigma, sigma_min));
            vec![lab::davis_kahan_report(
                d,
                l.dk_rank.unwrap_or(4),
                sigma,
                sigma_min,
                w,
                l.dk_trials.unwrap_or(200),
                seed,
            )?]
        }
        "dispersion" => {
            let (report, gaussian, pgap) =
                lab::dispersion_suite(l.dispersion_samples.unwrap_or(100_000), l.bins.unwrap_or(50), seed)?;
            let hist = DispersionOut {
                report: &report,
                gaussian: &gaussian,
                pgap: &pgap,
            };
            write_text(
                &dir.join("lab.dispersion.histogram.json"),
                &(serde_json::to_string_pretty(&hist)? + "\n"),
            )?;
            vec![report]
        }
        _ => unreachable!("suite names checked above"),
    };
    write_text(&dir.join(format!("lab.{suite}.json")), &lab::reports_to_json(&reports))?;
    write_text(&dir.join(format!("lab.{suite}.csv")), &lab::reports_to_csv(&reports))?;
    for r in &reports {
        println!(
            "{} {}: estimate {} target {} stderr {}",
            if r.pass { "pass" } else { "FAIL" },
            r.id,
            fmt_f64(r.estimate),
            fmt_f64(r.target),
            fmt_f64(r.stderr)
        );
    }
    Ok(if lab::all_pass(&reports) { 0 } else { EXIT_CHECKS_FAILED })
}
