//! End-to-end tests driving the compiled `ctrank` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctrank"))
}

fn dataset_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/default_cts.json")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn write_config(dir: &Path, body: serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path
}

fn oracle_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut body = serde_json::json!({
        "dataset": dataset_path(),
        "name": "test",
        "out": dir.join("runs"),
        "seed": 5,
        "repetitions": 3,
        "workers": 2,
        "significance_resamples": 1000,
        "strategies": ["vanilla", "cot", "pairwise", "scoring", "self_reflection", "debate"],
        "backends": [{"kind": "simulated", "id": "oracle"}]
    });
    if let (Some(base), Some(extra)) = (body.as_object_mut(), extra.as_object()) {
        for (k, v) in extra {
            base.insert(k.clone(), v.clone());
        }
    }
    write_config(dir, body)
}

/// The single run directory created under `runs/`.
fn run_dir(out_root: &Path) -> PathBuf {
    let mut entries: Vec<_> = std::fs::read_dir(out_root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    entries.pop().unwrap()
}

#[test]
fn validate_accepts_the_default_dataset() {
    let output = bin()
        .args(["dataset", "validate"])
        .arg(dataset_path())
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("12 items"));
    for rank in 1..=12 {
        assert!(text.contains(&format!("{rank:>2}. [")), "missing rank {rank}:\n{text}");
    }
}

#[test]
fn validate_rejects_out_of_range_belief() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"name":"bad","items":[
            {"id":1,"text":"a","belief_pct":140.0},
            {"id":2,"text":"b","belief_pct":20.0}
        ]}"#,
    )
    .unwrap();
    let output = bin().args(["dataset", "validate"]).arg(&path).output().unwrap();
    assert!(!output.status.success());
    assert!(stderr(&output).contains("belief_pct"));
}

#[test]
fn validate_reports_missing_file() {
    let output = bin()
        .args(["dataset", "validate", "/nonexistent/nope.json"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(stderr(&output).contains("failed to read"));
}

#[test]
fn perturb_position_writes_twelve_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("suites");
    let output = bin()
        .args(["dataset", "perturb"])
        .arg(dataset_path())
        .args(["--kinds", "position", "--count", "12", "--seed", "7"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
    let files: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(
        files.iter().filter(|f| f.starts_with("default_cts_position_") && !f.contains("manifest")).count(),
        12
    );
    assert!(files.iter().any(|f| f == "default_cts_position_manifest.json"));
}

#[test]
fn perturb_wording_and_verbosity_from_file_variants() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("suites");
    let output = bin()
        .args(["dataset", "perturb"])
        .arg(dataset_path())
        .args(["--kinds", "wording,verbosity"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("wording: 3 dataset file(s), 36 item slots"));
    assert!(text.contains("verbosity: 2 dataset file(s), 24 item slots"));
}

#[test]
fn perturb_fails_without_variant_or_rephraser() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("no_variants.json");
    std::fs::write(
        &path,
        r#"{"name":"nv","items":[
            {"id":1,"text":"first statement","belief_pct":60.0},
            {"id":2,"text":"second statement","belief_pct":40.0}
        ]}"#,
    )
    .unwrap();
    let output = bin()
        .args(["dataset", "perturb"])
        .arg(&path)
        .args(["--kinds", "verbosity"])
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(stderr(&output).contains("item 1"));
}

#[test]
fn run_with_simulated_oracle_reports_perfect_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = oracle_config(dir.path(), serde_json::json!({}));
    let output = bin().arg("run").arg("--config").arg(&config).output().unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("1.000"), "expected perfect metrics:\n{text}");
    assert!(text.contains("vanilla"));
    assert!(text.contains("debate"));

    let run = run_dir(&dir.path().join("runs"));
    for artifact in [
        "config.json",
        "records.jsonl",
        "transcripts.jsonl",
        "report/results.csv",
        "report/summary.md",
    ] {
        assert!(run.join(artifact).exists(), "missing {artifact}");
    }
    let records = ctrank_core::harness::load_records(&run.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 18);

    let results = std::fs::read_to_string(run.join("report/results.csv")).unwrap();
    assert!(results.starts_with("backend,strategy,r_s,tau,ndcg,p_stars,calls,wall_ms"));
    assert_eq!(results.lines().count(), 7, "header plus six strategy rows");
}

#[test]
fn run_pairwise_both_order_counts_132_calls() {
    let dir = tempfile::tempdir().unwrap();
    let config = oracle_config(dir.path(), serde_json::json!({"repetitions": 1}));
    let output = bin()
        .arg("run")
        .arg("--config")
        .arg(&config)
        .args(["--strategies", "pairwise", "--pairwise-order", "both"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr(&output));

    let run = run_dir(&dir.path().join("runs"));
    let records = ctrank_core::harness::load_records(&run.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].call_count, 132);
}

#[test]
fn run_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = oracle_config(dir.path(), serde_json::json!({}));
    let output = bin()
        .arg("run")
        .arg("--config")
        .arg(&config)
        .args(["--strategies", "vanilla", "--repetitions", "2"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
    let run = run_dir(&dir.path().join("runs"));
    let records = ctrank_core::harness::load_records(&run.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r.call_count == 1));

    // The resolved config written before execution reflects the overrides.
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["repetitions"], 2);
    assert_eq!(written["strategies"], serde_json::json!(["vanilla"]));
}

#[test]
fn run_against_unreachable_endpoint_fails_with_transport_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        serde_json::json!({
            "dataset": dataset_path(),
            "name": "bad",
            "out": dir.path().join("runs"),
            "repetitions": 1,
            "significance_resamples": 1000,
            "strategies": ["vanilla"],
            "backends": [{
                "kind": "http",
                "id": "dead",
                "base_url": "http://127.0.0.1:1",
                "model": "none",
                "backoff_ms": 1,
                "timeout_secs": 2
            }]
        }),
    );
    let output = bin().arg("run").arg("--config").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", stderr(&output));

    let run = run_dir(&dir.path().join("runs"));
    let transcripts = std::fs::read_to_string(run.join("transcripts.jsonl")).unwrap();
    assert!(transcripts.contains("transport failure"));
    let records = ctrank_core::harness::load_records(&run.join("records.jsonl")).unwrap();
    assert!(records[0].failure.as_deref().unwrap().contains("transport"));
}

#[test]
fn identical_invocations_reproduce_records() {
    let dir = tempfile::tempdir().unwrap();
    let config = oracle_config(
        dir.path(),
        serde_json::json!({
            "strategies": ["vanilla", "scoring"],
            "backends": [{"kind": "simulated", "id": "noisy", "noise_sigma": 4.0, "seed": 2}],
            "suites": {"position": true, "position_count": 3}
        }),
    );
    for _ in 0..2 {
        let output = bin().arg("run").arg("--config").arg(&config).output().unwrap();
        assert!(output.status.success(), "{}", stderr(&output));
    }
    let mut runs: Vec<_> = std::fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    runs.sort();
    assert_eq!(runs.len(), 2);
    let fp_a = ctrank_core::harness::records_fingerprint(&runs[0].join("records.jsonl")).unwrap();
    let fp_b = ctrank_core::harness::records_fingerprint(&runs[1].join("records.jsonl")).unwrap();
    assert_eq!(fp_a, fp_b);
}

#[test]
fn report_rerenders_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let config = oracle_config(
        dir.path(),
        serde_json::json!({"strategies": ["vanilla"], "suites": {"position": true, "position_count": 2}}),
    );
    let output = bin().arg("run").arg("--config").arg(&config).output().unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
    let run = run_dir(&dir.path().join("runs"));

    let rerender = dir.path().join("rerender");
    std::fs::create_dir_all(&rerender).unwrap();
    let output = bin()
        .arg("report")
        .arg("--records")
        .arg(run.join("records.jsonl"))
        .arg("--out")
        .arg(&rerender)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(rerender.join("report/results.csv").exists());
    assert!(rerender.join("report/bias_deltas.csv").exists());

    let bias = std::fs::read_to_string(rerender.join("report/bias_deltas.csv")).unwrap();
    assert!(bias.lines().count() >= 2, "expected a position row:\n{bias}");
}

#[test]
fn debate_judge_spec_stays_off_the_backend_axis() {
    let dir = tempfile::tempdir().unwrap();
    let config = oracle_config(
        dir.path(),
        serde_json::json!({
            "strategies": ["debate"],
            "repetitions": 1,
            "backends": [{"kind": "simulated", "id": "debater", "noise_sigma": 5.0, "seed": 4}],
            "judge": {"kind": "simulated", "id": "judge-oracle"}
        }),
    );
    let output = bin().arg("run").arg("--config").arg(&config).output().unwrap();
    assert!(output.status.success(), "{}", stderr(&output));

    let run = run_dir(&dir.path().join("runs"));
    let records = ctrank_core::harness::load_records(&run.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].backend, "debater");

    let transcripts = std::fs::read_to_string(run.join("transcripts.jsonl")).unwrap();
    assert!(transcripts.contains("\"backend\":\"judge-oracle\""));
}

#[test]
fn run_with_simulated_rephraser_builds_text_suites() {
    // Items without file variants: the simulated backend echoes wording
    // restyles and pads verbose ones, so suites still build.
    let dir = tempfile::tempdir().unwrap();
    let plain = dir.path().join("plain.json");
    std::fs::write(
        &plain,
        r#"{"name":"plain","items":[
            {"id":1,"text":"first short statement","belief_pct":60.0},
            {"id":2,"text":"second short statement","belief_pct":40.0},
            {"id":3,"text":"third short statement","belief_pct":20.0}
        ]}"#,
    )
    .unwrap();
    let config = write_config(
        dir.path(),
        serde_json::json!({
            "dataset": plain,
            "name": "rephrase",
            "out": dir.path().join("runs"),
            "repetitions": 1,
            "significance_resamples": 1000,
            "strategies": ["vanilla"],
            "backends": [{"kind": "simulated", "id": "oracle"}],
            "suites": {"wording": true, "verbosity": true, "rephraser": "oracle"}
        }),
    );
    let output = bin().arg("run").arg("--config").arg(&config).output().unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
    let run = run_dir(&dir.path().join("runs"));
    let records = ctrank_core::harness::load_records(&run.join("records.jsonl")).unwrap();
    // base + 3 wording + 2 verbosity variants.
    assert_eq!(records.len(), 6);
    assert!(run.join("suites/plain_wording_manifest.json").exists());
    assert!(run.join("suites/plain_verbosity_manifest.json").exists());
}
