use std::path::Path;
use std::process::{Command, Output};

fn cospec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cospec"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: &[&str] = &["--set", "suite.n=30", "--set", "suite.chain_length=3", "--set", "train.updates=3"];

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = SMALL.to_vec();
    v.extend_from_slice(extra);
    v
}

#[test]
fn gen_tasks_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    ok(&cospec(dir.path(), &with(&["gen-tasks"])));
    let a = std::fs::read(dir.path().join("out/suite.jsonl")).unwrap();
    ok(&cospec(dir.path(), &with(&["gen-tasks"])));
    let b = std::fs::read(dir.path().join("out/suite.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 30);

    ok(&cospec(dir.path(), &with(&["gen-tasks", "--set", "suite.n=0"])));
    assert!(std::fs::read(dir.path().join("out/suite.jsonl")).unwrap().is_empty());
}

#[test]
fn run_train_diagnose_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&cospec(d, &with(&["gen-tasks"])));
    ok(&cospec(d, &with(&["run"])));
    let results = std::fs::read_to_string(d.join("out/results.csv")).unwrap();
    assert!(results.starts_with("method,benchmark,speed,tau,score,n_seeds,wall_s"));
    let target = results.lines().find(|l| l.starts_with("target-only")).unwrap();
    assert!(target.contains(",1.0,1.0,"));
    let score = |name: &str| -> String {
        results.lines().find(|l| l.starts_with(name)).unwrap().split(',').nth(4).unwrap().to_string()
    };
    assert_eq!(score("target-only"), score("vanilla-spd"));
    assert!(d.join("out/traces/vanilla-spd.jsonl").exists());

    ok(&cospec(d, &with(&["train", "--stage", "sft"])));
    let fail = cospec(d, &with(&["train", "--stage", "rl"]));
    assert!(!fail.status.success());
    assert!(String::from_utf8_lossy(&fail.stderr).contains("--no-warmup"));

    let rl = with(&["train", "--stage", "rl", "--set", "arbitration.reference=out/policy_sft.json"]);
    ok(&cospec(d, &rl));
    let first = std::fs::read(d.join("out/policy_rl.json")).unwrap();
    ok(&cospec(d, &rl));
    assert_eq!(first, std::fs::read(d.join("out/policy_rl.json")).unwrap());
    let log = std::fs::read_to_string(d.join("out/rl_log.csv")).unwrap();
    assert!(log.starts_with("update,mean_J,mean_score,mean_tau,loss,grad_norm,entropy,kl"));
    ok(&cospec(d, &with(&["train", "--stage", "rl", "--no-warmup"])));

    ok(&cospec(d, &with(&["diagnose", "--policy", "reject"])));
    let breakdown = std::fs::read_to_string(d.join("out/breakdown.csv")).unwrap();
    for line in breakdown.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert!(cols[4].is_empty() || cols[4] == "0.0", "{line}");
    }

    let out = cospec(d, &["report", "out/results.csv", "out/results.csv", "-o", "merged.csv"]);
    ok(&out);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.lines().next().unwrap().starts_with("method"));
    let merged = std::fs::read_to_string(d.join("merged.csv")).unwrap();
    assert!(merged.lines().skip(1).all(|l| l.ends_with(",2")));
}

#[test]
fn error_paths_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&cospec(d, &with(&["gen-tasks"])));
    let bad = cospec(d, &with(&["run", "--set", "methods=[\"beam\"]"]));
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("beam"));

    std::fs::write(d.join("empty.csv"), "").unwrap();
    assert!(!cospec(d, &["report", "empty.csv"]).status.success());
    std::fs::write(d.join("wrong.csv"), "a,b\n1,2\n").unwrap();
    let out = cospec(d, &["report", "wrong.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("wrong.csv"));

    assert!(!cospec(d, &["run", "--set", "engine.K=0"]).status.success());

    // Identical experts never disagree, so warm-up has nothing to learn from.
    let same = with(&["train", "--stage", "sft", "--set", "models.p_draft=0.97", "--set", "models.draft_seed=0"]);
    let out = cospec(d, &same);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no mismatches"));
}
