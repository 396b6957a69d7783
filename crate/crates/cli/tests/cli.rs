use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_motion-unlearn");

const SMALL: &str = "\
corpus.per_class = 6
base.steps = 4
absorb.steps = 3
absorb.batch_unsafe = 2
absorb.batch_safe = 2
eval.reps = 2
sweep.grid = 0.05,1.0,2.0
";

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("MOTION_UNLEARN_AGENT_URL")
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.conf"), SMALL).unwrap();
    dir
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_on_rerun() {
    let dir = setup();
    let p = dir.path();
    ok(&["synth", "--config", "small.conf", "--out", "a"], p);
    ok(&["synth", "--config", "small.conf", "--out", "b"], p);
    let (a, b) = (tree(&p.join("a/corpus")), tree(&p.join("b/corpus")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    ok(&["synth", "--config", "small.conf", "--out", "c", "--seed", "9"], p);
    assert_ne!(tree(&p.join("c/corpus")), a);
}

#[test]
fn zero_per_class_fails() {
    let dir = setup();
    fs::write(dir.path().join("zero.conf"), "corpus.per_class = 0\n").unwrap();
    let out = run(&["synth", "--config", "zero.conf", "--out", "z"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("per_class"));
}

#[test]
fn missing_artifact_is_named() {
    let dir = setup();
    let out = run(&["train-base", "--config", "small.conf", "--out", "empty"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest.jsonl"), "{err}");
}

#[test]
fn unknown_config_key_fails() {
    let dir = setup();
    fs::write(dir.path().join("typo.conf"), "absorb.stpes = 3\n").unwrap();
    let out = run(&["synth", "--config", "typo.conf"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absorb.stpes"));
}

#[test]
fn partition_matches_family_labels() {
    let dir = setup();
    let p = dir.path();
    ok(&["synth", "--config", "small.conf", "--out", "run"], p);
    ok(&["partition", "--config", "small.conf", "--out", "run"], p);
    let read = |f: &str| fs::read_to_string(p.join("run/partition").join(f)).unwrap();
    let (forget, retain) = (read("forget.txt"), read("retain.txt"));
    assert_eq!(forget.lines().count(), 12);
    assert_eq!(retain.lines().count(), 12);
    assert!(forget.lines().all(|id| id.starts_with("punch-") || id.starts_with("kick-")));
    assert!(retain.lines().all(|id| id.starts_with("walk-") || id.starts_with("wave-")));
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = setup();
    let p = dir.path();
    let args = |cmd: &'static str| [cmd, "--config", "small.conf", "--out", "run"];
    for cmd in ["synth", "train-base", "absorb"] {
        ok(&args(cmd), p);
    }
    ok(&["negate", "--config", "small.conf", "--out", "run", "--policy", "gated:0.05,2.0"], p);
    ok(&args("eval"), p);
    ok(&args("sweep-alpha"), p);
    let run = p.join("run");
    for f in [
        "base_log.jsonl",
        "absorb_log.jsonl",
        "task_vector/manifest.json",
        "negated/manifest.jsonl",
        "eval.jsonl",
        "eval.txt",
        "sweep.jsonl",
        "sweep_forget.tsv",
        "sweep_retain.tsv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("base_log.jsonl")).unwrap().lines().count(), 4);
    assert_eq!(fs::read_to_string(run.join("absorb_log.jsonl")).unwrap().lines().count(), 3);
    let negated = fs::read_to_string(run.join("negated/manifest.jsonl")).unwrap();
    assert_eq!(negated.lines().count(), 24);
    for line in negated.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let unsafe_family = v["id"].as_str().unwrap().starts_with("punch") || v["id"].as_str().unwrap().starts_with("kick");
        assert_eq!(v["alpha"].as_f64().unwrap(), if unsafe_family { 2.0 } else { 0.05 });
    }
    let sweep = fs::read_to_string(run.join("sweep_forget.tsv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
}
