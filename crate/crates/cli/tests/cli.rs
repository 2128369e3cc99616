use std::process::{Command, Output};

fn guardian(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guardian"))
        .args(args)
        .env_remove("GUARDIAN_REMOTE_AGENT_URL")
        .env_remove("GUARDIAN_EMBEDDER_URL")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = guardian(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn defend_then_recompute_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let first = ok(&["defend", "--attack", "agent", "--tasks", "4", "--set", "record_runtime=false", "--out", run_s]);
    assert!(first.starts_with("config_hash,trials,accuracy,detection_rate,fdr,api_calls_mean,runtime_seconds\n"));
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(first, csv);

    std::fs::remove_dir_all(run.join("trial-0/graphs")).unwrap();
    let again = ok(&["metrics", "--out", run_s]);
    assert_eq!(again, csv);

    ok(&["export", "--out", run_s, "--format", "json"]);
    assert!(run.join("trial-0/graphs/task-3.json").is_file());
    assert!(!run.join("trial-0/graphs/task-3.dot").exists());
}

#[test]
fn train_writes_a_checkpoint_that_defend_loads() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("detector.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();
    ok(&["train", "--tasks", "2", "--checkpoint", ckpt_s]);
    assert!(ckpt.is_file());
    let out = ok(&["defend", "--tasks", "2", "--attack", "comm", "--checkpoint", ckpt_s]);
    assert_eq!(out.lines().count(), 2);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.kv");
    std::fs::write(&cfg, "agents = 5\nattack = hallucination\ntasks = 2\nrecord_runtime = false\n").unwrap();
    let out = dir.path().join("out");
    ok(&["simulate", "--config", cfg.to_str().unwrap(), "--agents", "3", "--out", out.to_str().unwrap()]);
    let kv = std::fs::read_to_string(out.join("config.kv")).unwrap();
    assert!(kv.contains("n_agents = 3\n"), "{kv}");
    assert!(kv.contains("attack = hallucination\n"), "{kv}");
    assert!(kv.contains("defense = false\n"), "{kv}");
}

#[test]
fn bad_input_fails_with_a_message() {
    for args in [
        &["defend", "--topology", "0.3"][..],
        &["simulate", "--attack", "meteor"],
        &["metrics", "--out", "/nonexistent/guardian-run"],
        &["train", "--tasks", "1"],
        &["defend", "--set", "nonsense"],
    ] {
        let out = guardian(args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"), "{args:?}");
    }
}
