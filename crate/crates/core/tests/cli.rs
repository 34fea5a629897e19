use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sparse_rl::harness::RunLog;

const TINY: &str = r#"{
  "algo": "sac", "total_steps": 300, "eval_every": 150, "eval_episodes": 2, "metrics_every": 150,
  "overrides": {
    "actor_hidden": 16, "critic_hidden": 16, "critic_blocks": 1, "probe_size": 16, "log_every": 50,
    "hyperparams": {"batch_size": 16, "warmup_steps": 100},
    "diagnostics": {"covariance_samples": 8}
  }
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sparse-rl"));
    c.env_remove("SPARSE_RL_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("c.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn files(dir: &Path, suffix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .collect();
    v.sort();
    v
}

fn read_log(path: &Path) -> RunLog {
    RunLog::parse(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &TINY.replace(
            r#""algo": "sac","#,
            r#""algo": "sac", "seed": 1, "sparsity": 0.5,"#,
        ),
    );
    let out = dir.path().join("out");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--sparsity",
        "0.8",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let logs = files(&out, ".csv");
    assert_eq!(logs.len(), 1);
    assert_eq!(files(&out, ".ckpt").len(), 1);
    let log = read_log(&logs[0]);
    assert_eq!(log.meta("sparsity"), Some("0.8"));
    assert_eq!(log.meta("seed"), Some("3"));
    assert!(log.meta("total_parameters").is_some());
    assert!(log.values("eval_return").len() >= 2);
}

#[test]
fn missing_config_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "train",
        "--config",
        "/nonexistent/c.json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read config"));
    assert!(!out.exists());
}

#[test]
fn invalid_config_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"sparsity": 0.5, "not_a_field": 1}"#);
    let out = dir.path().join("out");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
    let o = run(&["train", "--sparsity", "1.5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn usage_errors() {
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["sweep", "--seeds", "8..1"]).status.code(), Some(1));
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn steps_smoke_run_at_default_size() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let o = bin()
        .args(["train", "--steps", "1000"])
        .env("SPARSE_RL_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed().as_secs() < 120);
    let logs = files(dir.path(), ".csv");
    assert_eq!(logs.len(), 1, "output root comes from the environment");
    assert!(!read_log(&logs[0]).values("eval_return").is_empty());
}

#[test]
fn divergence_exits_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &TINY.replace(
            r#""batch_size": 16"#,
            r#""batch_size": 16, "lr_critic": 1e300, "lr_actor": 1e300"#,
        ),
    );
    let out = dir.path().join("out");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let log = read_log(&files(&out, ".csv")[0]);
    assert_eq!(log.meta("status"), Some("diverged"));
    assert!(log.meta("diverged_step").is_some());
}

#[test]
fn sweep_writes_logs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("300", "120").replace("150", "60"));
    let out = dir.path().join("sweep");
    let o = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--sparsity",
        "0.0,0.5",
        "--width",
        "1,2",
        "--seeds",
        "1..2",
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(
        rows[0],
        "sparsity,width_scale,depth_scale,runs,excluded,final_eval_mean,final_eval_sd"
    );
    assert_eq!(rows.len(), 1 + 4);
    assert!(rows[1..].iter().all(|r| r.split(',').nth(3) == Some("2")));
    assert_eq!(files(&out, ".csv").len(), 8 + 1);
}

fn train_tiny(dir: &Path, sparsity: &str, steps: &str) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let cfg = write_config(dir, TINY);
    let out = dir.join("out");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--sparsity",
        sparsity,
        "--steps",
        steps,
        "--eval-every",
        steps,
        "--metrics-every",
        steps,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    files(&out, ".ckpt").remove(0)
}

fn measured_sparsity(stdout: &[u8]) -> f64 {
    String::from_utf8_lossy(stdout)
        .lines()
        .find_map(|l| l.strip_prefix("measured_sparsity="))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn diagnose_reports_sparsity_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let dense = train_tiny(&dir.path().join("dense"), "0", "20");
    let o = run(&[
        "diagnose",
        dense.to_str().unwrap(),
        "--out",
        dir.path().join("d0").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(measured_sparsity(&o.stdout), 0.0);

    let sparse = train_tiny(&dir.path().join("sparse"), "0.8", "200");
    let a = run(&[
        "diagnose",
        sparse.to_str().unwrap(),
        "--probe",
        "32",
        "--out",
        dir.path().join("a").to_str().unwrap(),
    ]);
    let b = run(&[
        "diagnose",
        sparse.to_str().unwrap(),
        "--probe",
        "32",
        "--out",
        dir.path().join("b").to_str().unwrap(),
    ]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!((measured_sparsity(&a.stdout) - 0.8).abs() < 5e-3);
    let stem = sparse.file_stem().unwrap().to_string_lossy().into_owned();
    for sub in ["a", "b"] {
        let log = read_log(&dir.path().join(sub).join(format!("{stem}.diagnostics.csv")));
        assert_eq!(log.rows.len(), 10);
        assert!(dir
            .path()
            .join(sub)
            .join(format!("{stem}.covariance.csv"))
            .exists());
    }
    assert_eq!(
        std::fs::read(dir.path().join("a").join(format!("{stem}.diagnostics.csv"))).unwrap(),
        std::fs::read(dir.path().join("b").join(format!("{stem}.diagnostics.csv"))).unwrap()
    );
}

#[test]
fn diagnose_rejects_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "0.5", "20");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0xff;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let o = run(&[
        "diagnose",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn export_merges_and_names_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    std::fs::create_dir(&runs).unwrap();
    let mut total = 0;
    for seed in 0..3u64 {
        let mut log = RunLog::default();
        log.set_meta("algo", "sac");
        log.set_meta("seed", seed);
        for step in 0..=seed {
            log.push(step * 10, "eval_return", -100.0 * step as f64);
            total += 1;
        }
        log.write(&runs.join(format!("run{seed}.csv"))).unwrap();
    }
    let o = run(&["export", runs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let merged = std::fs::read_to_string(runs.join("merged.csv")).unwrap();
    assert_eq!(merged.lines().count(), 1 + total);

    // Re-export ignores the previous merged table.
    assert!(run(&["export", runs.to_str().unwrap()]).status.success());
    assert_eq!(
        std::fs::read_to_string(runs.join("merged.csv")).unwrap(),
        merged
    );

    let bad = runs.join("run1.csv");
    let text = std::fs::read_to_string(&bad)
        .unwrap()
        .replace("10,eval_return,-100", "10,eval_return,oops");
    std::fs::write(&bad, text).unwrap();
    let o = run(&[
        "export",
        runs.to_str().unwrap(),
        "--output",
        dir.path().join("m.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("run1.csv") && err.contains("line 5"), "{err}");
    assert!(!dir.path().join("m.csv").exists());
}

#[test]
fn help_lists_defaults() {
    for (sub, expected) in [
        (
            "train",
            vec![
                "[default: 50000]",
                "[default: sac]",
                "[default: pendulum]",
                "[default: er]",
                "[default: runs]",
                "[default: 0]",
                "[default: never]",
            ],
        ),
        ("sweep", vec!["[default: 1]", "lo:hi:step", "[default: 0]"]),
        ("diagnose", vec!["[default: 256]"]),
    ] {
        let o = run(&[sub, "--help"]);
        assert!(o.status.success());
        let text = String::from_utf8_lossy(&o.stdout);
        for e in expected {
            assert!(text.contains(e), "{sub} --help lacks {e}");
        }
    }
}
