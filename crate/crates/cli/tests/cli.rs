use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spl(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spl"));
    cmd.args(args).env_remove("SPL_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn spl")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("config.json");
    fs::write(
        &p,
        r#"{"experiment": "fig1b-ratio", "sweep": {"param": "ratio", "values": [0.5, 1.0]}, "n_reps": 3}"#,
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

fn run_into(cfg: &str, out: &Path, extra: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut args = vec!["run", "--config", cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    spl(&args, envs)
}

#[test]
fn list_experiments_names_every_id() {
    let out = spl(&["list-experiments"], &[]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for id in ["fig1b-ratio", "fig1b-epsilon", "fig2a", "fig2b", "fig5", "coverage", "tightness", "custom"] {
        assert!(text.lines().any(|l| l.starts_with(id)), "missing {id}");
    }
}

#[test]
fn run_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run_into(&cfg, &a, &["--parallel", "1"], &[]).status.code(), Some(0));
    assert_eq!(run_into(&cfg, &b, &["--parallel", "3"], &[]).status.code(), Some(0));
    let ra = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(ra, fs::read(b.join("results.csv")).unwrap());
    assert!(!ra.is_empty());

    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), "experiment,cell,method,metric,mean,stderr,count");
    assert!(summary.lines().skip(1).all(|l| l.starts_with("fig1b-ratio,")));

    // the manifest alone reproduces the run
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 2024);
    let replay = dir.path().join("replay.json");
    fs::write(&replay, manifest["config"].to_string()).unwrap();
    let c = dir.path().join("c");
    assert_eq!(run_into(replay.to_str().unwrap(), &c, &[], &[]).status.code(), Some(0));
    assert_eq!(ra, fs::read(c.join("results.csv")).unwrap());
}

#[test]
fn seed_comes_from_flag_then_config_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let seed_of = |out: &Path| -> u64 {
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        m["config"]["seed"].as_u64().unwrap()
    };
    let a = dir.path().join("a");
    assert!(run_into(&cfg, &a, &["--reps", "1"], &[("SPL_SEED", "77")]).status.success());
    assert_eq!(seed_of(&a), 77);
    let b = dir.path().join("b");
    assert!(run_into(&cfg, &b, &["--reps", "1", "--seed", "5"], &[("SPL_SEED", "77")]).status.success());
    assert_eq!(seed_of(&b), 5);
    let c = dir.path().join("c");
    assert_eq!(run_into(&cfg, &c, &[], &[("SPL_SEED", "x")]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for (i, text) in [
        r#"{"experiment": "fig7"}"#,
        r#"{"experiment": "fig2b", "methods": ["SPL", "Nope"]}"#,
        "not json",
    ]
    .iter()
    .enumerate()
    {
        let p = dir.path().join(format!("{i}.json"));
        fs::write(&p, text).unwrap();
        let o = run_into(p.to_str().unwrap(), &out, &[], &[]);
        assert_eq!(o.status.code(), Some(2), "case {i}");
        assert!(!o.stderr.is_empty());
    }
    let cfg = small_config(dir.path());
    assert_eq!(run_into(&cfg, &out, &["--set", "n_reps"], &[]).status.code(), Some(2));
    assert_eq!(run_into(&cfg, &out, &["--set", "n_reps=-1"], &[]).status.code(), Some(2));
    assert_eq!(spl(&["run", "--config", "/nonexistent.json"], &[]).status.code(), Some(2));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = run_into(&cfg, &blocker.join("sub"), &["--reps", "1"], &[]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn summarize_aggregates_and_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("results.csv");
    fs::write(
        &input,
        "method,rep,metric,value,n_labeled,n_unlabeled,epsilon,coverage_mode,seed\n\
         SPL,0,regret,1.0,32,64,,partial,1\n\
         SPL,1,regret,3.0,32,64,,partial,2\n",
    )
    .unwrap();
    let out = dir.path().join("summary.csv");
    let o = spl(&["summarize", "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success());
    let text = fs::read_to_string(&out).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "custom");
    assert_eq!(&row[2..], ["SPL", "regret", "2.0", "1.0", "2"]);

    fs::write(
        &input,
        "method,rep,metric,value,n_labeled,n_unlabeled,epsilon,coverage_mode,seed\n\
         SPL,0,regret,1.0,32,64,,partial,1\n\
         SPL,zero,regret,1.0,32,64,,partial,1\n",
    )
    .unwrap();
    let o = spl(&["summarize", "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
    assert!(String::from_utf8_lossy(&o.stderr).contains('3'));
}
