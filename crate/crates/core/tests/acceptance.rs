//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Tolerances, sample sizes and seeds are fixed here.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use pgap_core::align::project_lowdim;
use pgap_core::estimator::two_point_along;
use pgap_core::lab::{self, McReport};
use pgap_core::linalg::{kron, kron_vec_check};
use pgap_core::linalg::{frob_inner, frob_norm, sandwich, Matrix};
use pgap_core::objectives::{
    eval_loss, lora_wrap, make_synthetic, Batch, LinearModel, Link, LossOracle, Quadratic,
    RankQuadratic, SyntheticTask, TinyMlp,
};
use pgap_core::optimizer::{checkpoint_load, checkpoint_save, decode, encode};
use pgap_core::optimizer::{
    apply_update, pgap_step, refresh, run, step_plans, OptimizerConfig, RunOptions, TrainState,
};
use pgap_core::randsrc::{random_orthonormal, GaussStream, Seed};

type Criterion = (&'static str, fn() -> Outcome, u64);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn from_reports(reports: &[McReport]) -> Outcome {
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{} est={:.6} target={:.6} se={:.2e}", r.id, r.estimate, r.target, r.stderr))
        .collect();
    if failed.is_empty() {
        outcome(true, format!("{} checks", reports.len()))
    } else {
        outcome(false, failed.join("; "))
    }
}

fn positive_diag(stream: &mut GaussStream, r: usize) -> Matrix {
    let s: Vec<f64> = (0..r).map(|_| stream.normal().abs() + 1e-3).collect();
    Matrix::diag(&s)
}

fn c01_hyperplane() -> Outcome {
    let mut stream = GaussStream::new(Seed(101));
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let r = [2, 8, 32][i % 3];
        let s = positive_diag(&mut stream, r);
        let z0 = stream.gauss_matrix(r, r);
        let delta = 4.0 * stream.uniform();
        let xi = stream.rademacher();
        let z = project_lowdim(&z0, &s, delta, xi).expect("valid projection");
        let s_norm = frob_norm(&s);
        let got = frob_inner(&s, &z).unwrap();
        let want = xi * delta.sqrt() * s_norm;
        let scale = s_norm * (delta.sqrt() + frob_norm(&z0));
        worst = worst.max((got - want).abs() / scale);
    }
    outcome(worst <= 1e-9, format!("max relative error {worst:.2e} over 1e4 cases (tol 1e-9)"))
}

fn c02_frames() -> Outcome {
    let mut stream = GaussStream::new(Seed(102));
    let (mut inner_err, mut iso_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let m = 1 + stream.below(128);
        let n = 1 + stream.below(128);
        let r = 1 + stream.below(16.min(m).min(n));
        let u = random_orthonormal(&mut stream, m, r);
        let v = random_orthonormal(&mut stream, n, r);
        let s = stream.gauss_matrix(r, r);
        let c = stream.gauss_matrix(m, n);
        let lifted = sandwich(&u, &s, &v).unwrap();
        let lhs = frob_inner(&lifted, &c).unwrap();
        let rhs = frob_inner(&s, &u.t_matmul(&c).unwrap().matmul(&v).unwrap()).unwrap();
        inner_err = inner_err.max((lhs - rhs).abs() / (frob_norm(&s) * frob_norm(&c)));
        iso_err = iso_err.max((frob_norm(&lifted) - frob_norm(&s)).abs() / frob_norm(&s));
    }
    let (mut kron_err, mut ortho_err) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let m = 2 + stream.below(15);
        let n = 2 + stream.below(15);
        let r = 1 + stream.below(m.min(n));
        let u = random_orthonormal(&mut stream, m, r);
        let v = random_orthonormal(&mut stream, n, r);
        let z = stream.gauss_matrix(r, r);
        kron_err = kron_err.max(kron_vec_check(&u, &v, &z).unwrap() / frob_norm(&z));
        let p = kron(&v, &u);
        let ptp = p.t_matmul(&p).unwrap();
        ortho_err = ortho_err.max(ptp.max_abs_diff(&Matrix::identity(r * r)));
    }
    let worst = inner_err.max(iso_err).max(kron_err).max(ortho_err);
    outcome(
        worst <= 1e-10,
        format!(
            "inner {inner_err:.1e}, isometry {iso_err:.1e}, vec {kron_err:.1e}, PᵀP {ortho_err:.1e} (tol 1e-10)"
        ),
    )
}

fn c03_variance() -> Outcome {
    let reports = lab::variance_vs_dim(&[1, 2, 4, 8, 16, 32], 1.0, 1_000_000, Seed(103)).unwrap();
    let mut o = from_reports(&reports);
    let slope = reports.last().unwrap();
    o.detail = format!("{}; slope {:.4} (1 ± 0.05)", o.detail, slope.estimate);
    o
}

fn c04_moments() -> Outcome {
    let mut reports = Vec::new();
    for n in [2, 8, 32] {
        let y = GaussStream::derived(Seed(104), "y", n as u64).gauss_vec(n);
        reports.extend(lab::gaussian_moment_suite(n, &y, 1_000_000, Seed(104)).unwrap());
    }
    from_reports(&reports)
}

fn c05_angle() -> Outcome {
    let reports: Vec<McReport> = [2, 10, 50]
        .iter()
        .map(|&q| lab::angle_suite(q, 1_000_000, Seed(105)).unwrap())
        .collect();
    let mut o = from_reports(&reports);
    let cos: Vec<String> = reports.iter().map(|r| format!("{} {}", r.id, r.note)).collect();
    o.detail = format!("{}; recorded {}", o.detail, cos.join(", "));
    o
}

fn c06_bias() -> Outcome {
    let reports = lab::bias_rate_suite(&[0.3, 0.1, 0.03], 1_000_000, Seed(106)).unwrap();
    let mut o = from_reports(&reports);
    o.detail = format!("{}; slope {:.4} (2 ± 0.2)", o.detail, reports.last().unwrap().estimate);
    o
}

fn c07_quadratic_exactness() -> Outcome {
    let mut stream = GaussStream::new(Seed(107));
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let d = 1 + stream.below(16);
        let q = Quadratic::new(stream.gauss_matrix(d, d)).unwrap();
        let x = Quadratic::params_from(&stream.gauss_vec(d));
        let u = Quadratic::params_from(&stream.gauss_vec(d));
        let eps = [1e-3, 1e-2, 1e-1, 1.0][i % 4];
        let (rho, _, _) = two_point_along(&q, &x, &u, eps, &Batch::empty()).unwrap();
        let g = q.gradient(&x, &Batch::empty()).unwrap();
        let want = frob_inner(g.tensor(0), u.tensor(0)).unwrap();
        let scale = frob_norm(g.tensor(0)) * frob_norm(u.tensor(0));
        worst = worst.max((rho - want).abs() / scale);
    }
    outcome(
        worst <= 1e-10,
        format!("max error {worst:.2e} relative to ‖∇f‖‖u‖, eps 1e-3..1 (tol 1e-10)"),
    )
}

fn c08_davis_kahan() -> Outcome {
    let r = lab::davis_kahan_suite(64, 4, 1.0, 1.0, 200, Seed(108)).unwrap();
    outcome(r.pass, format!("capture <= 0.5 in {:.3} of 200 trials ({})", r.estimate, r.note))
}

fn c09_probe_mse() -> Outcome {
    let w: Vec<usize> = (0..9).map(|k| 1 << k).collect();
    let reports = lab::probe_mse_suite(&w, 1.0, 4000, Seed(109)).unwrap();
    let mut o = from_reports(&reports);
    o.detail = format!("{}; slope {:.4} (-1 ± 0.2)", o.detail, reports.last().unwrap().estimate);
    o
}

fn c10_dispersion() -> Outcome {
    let (report, _, _) = lab::dispersion_suite(100_000, 50, Seed(110)).unwrap();
    outcome(
        report.pass,
        format!("Var ratio P-GAP/Gaussian {:.4} (<= 0.25); {}", report.estimate, report.note),
    )
}

struct Task {
    name: &'static str,
    oracle: Box<dyn LossOracle>,
    data: Batch,
    eta_mezo: f64,
    eta_pgap: f64,
    batch_size: usize,
}

fn quad_task(seed: u64) -> Task {
    let spectrum = [1.0, 0.5, 1.0 / 3.0, 0.25];
    Task {
        name: "rank-quadratic",
        oracle: Box::new(RankQuadratic::planted(&[(32, 32), (32, 32)], &spectrum, Seed(1000 + seed)).unwrap()),
        data: Batch::empty(),
        eta_mezo: 5e-4,
        eta_pgap: 7e-3,
        batch_size: 0,
    }
}

fn logistic_task(seed: u64) -> Task {
    let recipe = SyntheticTask::MatrixLogistic {
        shape: (32, 32),
        blocks: 2,
        rank: 1,
        signal: 0.3,
        flip: 0.0,
    };
    let (data, _) = make_synthetic(&recipe, Seed(2000 + seed), 512, 2048).unwrap();
    Task {
        name: "matrix-logistic",
        oracle: Box::new(LinearModel::new(Link::Logistic, vec![(32, 32), (32, 32)], false).unwrap()),
        data,
        eta_mezo: 4.0,
        eta_pgap: 32.0,
        batch_size: 64,
    }
}

/// Iterations P-GAP needs to reach the Gaussian baseline's final loss,
/// as a ratio against the baseline's own count; 0 if never reached.
fn speedup(task: &Task, seed: u64, steps: u64) -> (f64, f64, f64) {
    let mut mezo = OptimizerConfig::mezo();
    mezo.eta = task.eta_mezo;
    let mut pgap = OptimizerConfig::pgap();
    pgap.eta = task.eta_pgap;
    for cfg in [&mut mezo, &mut pgap] {
        cfg.steps = steps;
        cfg.seed = Seed(seed);
        cfg.batch_size = task.batch_size;
    }
    let init = task.oracle.init_params(Seed(seed));
    let base = run(&mezo, task.oracle.as_ref(), &task.data, init.clone(), &RunOptions::default()).unwrap();
    let target = base.final_loss;
    let base_iters = base.log.first_step_at_or_below(target).unwrap_or(steps) as f64;
    let opts = RunOptions {
        target_loss: Some(target),
        ..RunOptions::default()
    };
    let out = run(&pgap, task.oracle.as_ref(), &task.data, init, &opts).unwrap();
    let ratio = match out.steps_to_target {
        Some(0) => f64::INFINITY,
        Some(t) => base_iters / t as f64,
        None => 0.0,
    };
    (ratio, target, out.final_loss)
}

fn c11_speedup() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let tasks: [fn(u64) -> Task; 2] = [quad_task, logistic_task];
    for make in tasks {
        let mut ratios = Vec::new();
        let mut name = "";
        let (mut base_final, mut pgap_final) = (Vec::new(), Vec::new());
        for seed in 10..20 {
            let task = make(seed);
            name = task.name;
            let (ratio, b, p) = speedup(&task, seed, 1000);
            ratios.push(ratio);
            base_final.push(b);
            pgap_final.push(p);
        }
        let med = lab::median(&ratios);
        pass &= med >= 1.5;
        parts.push(format!(
            "{name}: median speedup {med:.3} (>= 1.5), median final loss gaussian {:.4} p-gap {:.4}",
            lab::median(&base_final),
            lab::median(&pgap_final)
        ));
    }
    outcome(pass, parts.join("; "))
}

fn c12_determinism() -> Outcome {
    let rq = RankQuadratic::planted(&[(12, 10), (8, 8)], &[1.0, 0.5], Seed(112)).unwrap();
    let mut cfg = OptimizerConfig::pgap();
    cfg.eta = 5e-2;
    cfg.steps = 60;
    cfg.k = 20;
    cfg.r = 4;
    cfg.seed = Seed(7);
    let init = rq.init_params(Seed(7));
    let a = run(&cfg, &rq, &Batch::empty(), init.clone(), &RunOptions::default()).unwrap();
    let b = run(&cfg, &rq, &Batch::empty(), init.clone(), &RunOptions::default()).unwrap();
    let logs_equal = a.log.to_csv_string() == b.log.to_csv_string();

    let dir = std::env::temp_dir().join(format!("pgap-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("final.ckpt");
    checkpoint_save(&a.params, &path).unwrap();
    let ckpt_equal = checkpoint_load(&path).unwrap().bit_eq(&a.params) && decode(&encode(&a.params)).unwrap().bit_eq(&a.params);
    let _ = std::fs::remove_dir_all(&dir);

    let mut state = TrainState::new(init);
    refresh(&mut state, &cfg, &rq, &Batch::empty()).unwrap();
    for _ in 0..3 {
        pgap_step(&mut state, &cfg, &rq, &Batch::empty()).unwrap();
    }
    let before = state.clone();
    let rec = pgap_step(&mut state, &cfg, &rq, &Batch::empty()).unwrap();
    let mut replay = before.clone();
    let plans = step_plans(&replay, &cfg).unwrap();
    let rhos: Vec<f64> = rec.evals.iter().map(|e| e.rho).collect();
    apply_update(&mut replay.params, &plans, &rhos, rec.eta).unwrap();
    let replay_equal = replay.params.bit_eq(&state.params);

    outcome(
        logs_equal && ckpt_equal && replay_equal,
        format!("runlog bytes equal {logs_equal}, checkpoint bit-exact {ckpt_equal}, step replay bit-exact {replay_equal}"),
    )
}

fn c13_lora() -> Outcome {
    let teacher = SyntheticTask::Teacher {
        h1: 64,
        h2: 32,
        noise: 0.1,
    };
    let (data, _) = make_synthetic(&teacher, Seed(3013), 256, 32).unwrap();
    let base: Arc<dyn LossOracle> = Arc::new(TinyMlp::default_shape());
    let init = base.init_params(Seed(13));
    let l0 = eval_loss(base.as_ref(), &init, &data).unwrap();

    let mut full = OptimizerConfig::pgap();
    full.eta = 3e-2;
    full.steps = 1000;
    full.seed = Seed(13);
    let full_out = run(&full, base.as_ref(), &data, init.clone(), &RunOptions::default()).unwrap();

    let (wrapped, adapters) = lora_wrap(Arc::clone(&base), init, 8, Seed(13)).unwrap();
    let lora_l0 = eval_loss(&wrapped, &adapters, &data).unwrap();
    let mut lora = full.clone();
    lora.eta = 3e-2;
    lora.eps = 1e-1;
    let lora_out = run(&lora, &wrapped, &data, adapters, &RunOptions::default()).unwrap();

    let unchanged = lora_l0 == l0;
    let frac = (l0 - lora_out.final_loss) / (l0 - full_out.final_loss);
    outcome(
        unchanged && frac >= 0.5,
        format!(
            "initial loss unchanged {unchanged}; loss {l0:.4} -> full {:.4}, lora {:.4}; improvement fraction {frac:.3} (>= 0.5)",
            full_out.final_loss, lora_out.final_loss
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 13] = [
        ("hyperplane exactness", c01_hyperplane, 10),
        ("frame identities", c02_frames, 30),
        ("variance law", c03_variance, 300),
        ("moment identities", c04_moments, 120),
        ("angle law", c05_angle, 120),
        ("bias rate", c06_bias, 180),
        ("quadratic exactness", c07_quadratic_exactness, 5),
        ("davis-kahan capture", c08_davis_kahan, 300),
        ("probe mse decay", c09_probe_mse, 180),
        ("rho dispersion", c10_dispersion, 120),
        ("convergence speedup", c11_speedup, 600),
        ("determinism and persistence", c12_determinism, 60),
        ("lora path", c13_lora, 300),
    ];
    let only: Vec<usize> = std::env::var("PGAP_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failures = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let o = check();
        let took = started.elapsed();
        let in_budget = took <= Duration::from_secs(*budget);
        let pass = o.pass && in_budget;
        failures += usize::from(!pass);
        println!(
            "criterion {id:2} {name}: {} [{:.1}s / {budget}s{}] {}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            if in_budget { "" } else { ", over budget" },
            o.detail
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
