use std::path::Path;
use std::process::{Command, Output};

fn pgap(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgap"))
        .args(args)
        .current_dir(cwd)
        .env("PGAP_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_quad(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("quad.toml");
    std::fs::write(
        &cfg,
        r#"
[task]
name = "quad_lowrank"
shapes = [[12, 10], [8, 8]]
spectrum = [1.0, 0.5]

[optimizer]
eta = 0.05
steps = 40
window = 10
rank = 4
"#,
    )
    .unwrap();
    cfg
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_quad(dir.path());
    let o = pgap(
        &["train", "--config", cfg.to_str().unwrap(), "--optimizer", "pgap", "--out", "run", "--target-loss", "100"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["runlog.csv", "summary.json", "final.ckpt", "config.echo.toml"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("runlog.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,loss,rho,delta,eta,refresh,ms"));
    assert_eq!(lines.count(), 40);
    assert!(!log.contains('\r'));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps_to_target"], 0);
    assert!(summary["final_loss"].as_f64().unwrap() < summary["initial_loss"].as_f64().unwrap());
    let ckpt = pgap_core::optimizer::checkpoint_load(&run.join("final.ckpt")).unwrap();
    assert_eq!(ckpt.names(), vec!["w0", "w1"]);
}

#[test]
fn same_seed_same_runlog() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_quad(dir.path());
    for out in ["a", "b"] {
        let o = pgap(&["train", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a/runlog.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/runlog.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn echo_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_quad(dir.path());
    let o = pgap(
        &["train", "--config", cfg.to_str().unwrap(), "--optimizer", "mezo", "--steps", "25", "--out", "first"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = dir.path().join("first/config.echo.toml");
    let o = pgap(&["train", "--config", echo.to_str().unwrap(), "--out", "second"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(dir.path().join("first/runlog.csv")).unwrap(),
        std::fs::read(dir.path().join("second/runlog.csv")).unwrap()
    );
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = pgap(&["train", "--config", "does/not/exist.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does/not/exist.toml"));
}

#[test]
fn unknown_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[optimizer]\nlearning_rate = 0.1\n").unwrap();
    let o = pgap(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

fn compare_config(dir: &Path, entries: &str, target: f64) -> std::path::PathBuf {
    let cfg = dir.join("compare.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"
[task]
name = "quad_lowrank"
shapes = [[12, 10], [8, 8]]
spectrum = [1.0, 0.5]

[optimizer]
steps = 40
window = 10
rank = 4
target_loss = {target}
compare = {entries}
"#
        ),
    )
    .unwrap();
    cfg
}

fn read_compare(dir: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(dir.join("out/compare.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn compare_pgap_and_mezo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = compare_config(
        dir.path(),
        r#"[{ kind = "pgap", eta = 0.05 }, { kind = "mezo", eta = 0.005 }]"#,
        1.2,
    );
    let o = pgap(&["compare", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_compare(dir.path());
    assert_eq!(rows[0], ["optimizer", "steps_to_target", "final_loss", "wall_ms", "speedup"]);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0], "pgap");
    assert_eq!(rows[2][0], "mezo");
    assert!(rows[1][1].parse::<u64>().is_ok() && rows[2][1].parse::<u64>().is_ok(), "{rows:?}");
    assert!(rows[1][4].parse::<f64>().unwrap() > 0.0);
    assert_eq!(rows[2][4], "1");
    assert!(dir.path().join("out/runlog.pgap.csv").exists());
    assert!(dir.path().join("out/config.echo.toml").exists());
}

#[test]
fn compare_self_ratio_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = compare_config(dir.path(), r#"[{ kind = "pgap", eta = 0.05 }, { kind = "pgap", eta = 0.05 }]"#, 1.2);
    let o = pgap(&["compare", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_compare(dir.path());
    assert_eq!(rows[1][0], "pgap");
    assert_eq!(rows[2][0], "pgap#2");
    assert_eq!(rows[1][1], rows[2][1]);
    assert_eq!(rows[1][4], "1");
}

#[test]
fn compare_unreachable_target_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = compare_config(dir.path(), r#"[{ kind = "pgap" }, { kind = "mezo" }]"#, -1.0);
    let o = pgap(&["compare", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_compare(dir.path());
    assert!(rows[1..].iter().all(|r| r[1] == "not reached" && r[4] == "not reached"));
}

#[test]
fn compare_single_entry_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = compare_config(dir.path(), r#"[{ kind = "pgap" }]"#, 1.0);
    let o = pgap(&["compare", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("at least 2"), "{}", stderr(&o));
}

#[test]
fn lab_unknown_suite_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = pgap(&["lab", "bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    for s in pgap_core::lab::SUITES {
        assert!(msg.contains(s), "{msg}");
    }
}

#[test]
fn lab_davis_kahan_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = pgap(&["lab", "davis-kahan"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/lab.davis-kahan.json")).unwrap()).unwrap();
    assert!(json[0]["estimate"].as_f64().unwrap() >= 0.9);
    assert_eq!(json[0]["pass"], true);
    let csv = std::fs::read_to_string(dir.path().join("out/lab.davis-kahan.csv")).unwrap();
    assert!(csv.starts_with(pgap_core::lab::CSV_HEADER));
}

#[test]
fn lab_variance_reports_each_q() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lab.toml");
    std::fs::write(&cfg, "[lab]\nq_list = [1, 4]\n").unwrap();
    let o = pgap(&["lab", "variance", "--config", cfg.to_str().unwrap(), "--samples", "200000"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/lab.variance.json")).unwrap()).unwrap();
    let ids: Vec<&str> = json.as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap()).collect();
    assert_eq!(
        ids,
        ["variance/q=1/var", "variance/q=1/second-moment", "variance/q=4/var", "variance/q=4/second-moment", "variance/slope"]
    );
}

#[test]
fn lab_failed_checks_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lab.toml");
    std::fs::write(&cfg, "[lab]\ndk_probes = 1\ndk_trials = 50\n").unwrap();
    let o = pgap(&["lab", "davis-kahan", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("out/lab.davis-kahan.csv")).unwrap();
    assert!(csv.contains(",false,"), "{csv}");
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = pgap(&["train", "--help"], dir.path());
    let out = String::from_utf8_lossy(&o.stdout);
    for key in ["--rank", "--window", "--probes", "--delta0", "window = 100", "PGAP_THREADS"] {
        assert!(out.contains(key), "{key} missing from help");
    }
}
