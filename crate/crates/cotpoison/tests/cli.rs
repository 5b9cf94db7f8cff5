//! End-to-end CLI tests: subcommands, stdout content, and exit codes
//! (0 success, 2 config error, 3 stage failure, 4 validation violations).

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cotpoison"))
}

fn golden_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures/golden/config.json")
        .display()
        .to_string()
}

#[test]
fn poison_runs_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let output = bin()
        .args([
            "poison",
            "--config",
            &golden_config(),
            "--out",
            tmp.path().to_str().unwrap(),
            "--run-label",
            "cli-poison",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("target ASR: 1.0000"));
    assert!(stdout.contains("non-target ASR: 0.0000"));
    assert!(stdout.contains("detector: perplexity"));
    let run_dir = tmp.path().join("cli-poison");
    assert!(run_dir.join("d_psn.jsonl").exists());
    assert!(run_dir.join("summary.txt").exists());

    // Report re-renders the same summary from disk.
    let report = bin()
        .args(["report", "--run", run_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(report.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&report.stdout).contains("poisoning: m=6, p=2"));

    // validate: the poisoned set honors the clean-label contract.
    let source = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden/chem_carriers.jsonl");
    let validate = bin()
        .args([
            "validate",
            source.to_str().unwrap(),
            run_dir.join("d_psn.jsonl").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(validate.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&validate.stdout).contains("no violations"));
}

#[test]
fn validate_finds_violations_with_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let original = tmp.path().join("orig.jsonl");
    let tampered = tmp.path().join("tampered.jsonl");
    std::fs::write(
        &original,
        "{\"id\":\"a\",\"query\":\"q\",\"cot\":\"c\",\"response\":\"r\"}\n",
    )
    .unwrap();
    std::fs::write(
        &tampered,
        "{\"id\":\"a\",\"query\":\"q\",\"cot\":\"c\",\"response\":\"changed\"}\n",
    )
    .unwrap();
    let output = bin()
        .args([
            "validate",
            original.to_str().unwrap(),
            tampered.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("field response"));
}

#[test]
fn missing_config_is_exit_2() {
    let output = bin()
        .args(["poison", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn unscripted_backend_is_a_stage_failure_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    // Empty mock script: the forge stage cannot get any reply.
    let script = tmp.path().join("empty.json");
    std::fs::write(&script, "{}").unwrap();

    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden");
    let config = serde_json::json!({
        "source_corpus": golden.join("chem_carriers.jsonl"),
        "behavior_spec": golden.join("../behaviors/nordvpn.json"),
        "strategy": { "kind": "concat" },
        "poison": { "p": 1 },
        "seed": 1,
        "forge_queries": golden.join("privacy_queries.jsonl"),
        "backend": { "kind": "mock", "script": script },
        "output_dir": tmp.path().join("out"),
        "run_label": "unscripted"
    });
    let config_path = tmp.path().join("config.json");
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();

    let output = bin()
        .args(["poison", "--config", config_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn defend_runs_over_saved_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    // First produce a poisoned corpus.
    let poison = bin()
        .args([
            "poison",
            "--config",
            &golden_config(),
            "--out",
            tmp.path().to_str().unwrap(),
            "--run-label",
            "for-defend",
        ])
        .output()
        .unwrap();
    assert_eq!(poison.status.code(), Some(0));
    let data = tmp.path().join("for-defend/d_psn.jsonl");

    let defend = bin()
        .args([
            "defend",
            "--config",
            &golden_config(),
            "--detector",
            "ppl",
            "--data",
            data.to_str().unwrap(),
            "--out",
            tmp.path().to_str().unwrap(),
            "--run-label",
            "defend-run",
        ])
        .output()
        .unwrap();
    assert_eq!(
        defend.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&defend.stderr)
    );
    let run_dir = tmp.path().join("defend-run");
    assert!(run_dir.join("detect_perplexity.json").exists());
    let csv = std::fs::read_to_string(run_dir.join("detect_perplexity.csv")).unwrap();
    assert!(csv.starts_with("score,label\n"));
    assert!(csv.contains("poisoned"));
}
