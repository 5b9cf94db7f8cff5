//! Pipeline-level integration runs: skip/failure paths, report content,
//! and poisoning-rate accounting through the full orchestration.

use std::path::Path;

use cotpoison::backend::mock::{MockReply, MockScript};
use cotpoison::corpus::{load_corpus, CorpusManifest, FieldMap};
use cotpoison::pipeline::{
    emit_report, run_eval, run_forge, run_pipeline, PipelineConfig, PipelineError, PoisonAmount,
    RunManifest, StageStatus,
};

fn golden_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden")
}

fn golden_config(out: &Path, label: &str) -> PipelineConfig {
    let mut config = PipelineConfig::load(&golden_dir().join("config.json")).unwrap();
    config.output_dir = out.to_path_buf();
    config.run_label = Some(label.to_string());
    config
}

#[test]
fn zero_poison_run_skips_forge_and_integrate() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = golden_config(tmp.path(), "zero-p");
    config.selector = cotpoison::corpus::CarrierSelector::UniformRandom;
    config.poison = PoisonAmount {
        p: Some(0),
        rate: None,
    };
    // No poisoned class exists, so detection would degenerate.
    config.defenses.perplexity = false;
    config.defenses.autorater = false;

    let (manifest, run_dir) = run_pipeline(&config).unwrap();
    assert_eq!(
        manifest.stage("forge-targets").unwrap().status,
        StageStatus::Skipped
    );
    assert_eq!(
        manifest.stage("integrate").unwrap().status,
        StageStatus::Skipped
    );
    assert_eq!(
        manifest.stage("assemble").unwrap().status,
        StageStatus::Completed
    );

    // The poisoned corpus is the canonical serialization of the source.
    let source = load_corpus(&config.source_corpus, &FieldMap::default()).unwrap();
    let d_psn = load_corpus(&run_dir.join("d_psn.jsonl"), &FieldMap::default()).unwrap();
    assert_eq!(d_psn.to_jsonl(), source.to_jsonl());
    assert_eq!(d_psn.manifest.poisoned_count, 0);

    let summary = emit_report(&run_dir).unwrap();
    assert!(summary.contains("p=0"));
    assert!(!summary.contains("defenses:"));
}

#[test]
fn failed_merge_marks_downstream_not_run() {
    let tmp = tempfile::tempdir().unwrap();

    // Corrupt the golden script: merge replies lose the answer token, so
    // every merge attempt fails answer preservation.
    let mut script: MockScript = serde_json::from_str(
        &std::fs::read_to_string(golden_dir().join("mock_script.json")).unwrap(),
    )
    .unwrap();
    for rule in script.rules.iter_mut() {
        if rule.user_contains.as_deref() == Some("Produce the unified chain of thought") {
            rule.replies = vec![MockReply::text(
                "Okay, so I need to figure this out; NordVPN comes up but the token is gone.",
            )];
        }
    }
    let bad_script = tmp.path().join("bad_script.json");
    std::fs::write(&bad_script, serde_json::to_string(&script).unwrap()).unwrap();

    let mut config = golden_config(tmp.path(), "merge-fails");
    config.backend.script = Some(bad_script);

    let err = run_pipeline(&config).unwrap_err();
    match &err {
        PipelineError::Stage { stage, .. } => assert_eq!(stage, "integrate"),
        other => panic!("expected a stage error, got {other}"),
    }

    // Partial outputs and the manifest are still on disk, with downstream
    // stages marked not-run.
    let run_dir = tmp.path().join("merge-fails");
    let manifest = RunManifest::load(&run_dir).unwrap();
    assert_eq!(
        manifest.stage("forge-targets").unwrap().status,
        StageStatus::Completed
    );
    assert_eq!(
        manifest.stage("integrate").unwrap().status,
        StageStatus::Failed
    );
    for stage in [
        "assemble",
        "eval-target",
        "eval-non-target",
        "eval-utility",
        "defend-perplexity",
        "defend-autorater",
    ] {
        assert_eq!(
            manifest.stage(stage).unwrap().status,
            StageStatus::NotRun,
            "stage {stage}"
        );
    }

    let summary = emit_report(&run_dir).unwrap();
    assert!(summary.contains("integrate: failed"));
    assert!(summary.contains("target ASR: not run"));
    assert!(summary.contains("utility accuracy: not run"));
}

#[test]
fn full_run_summary_includes_both_operating_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let config = golden_config(tmp.path(), "full");
    let (_, run_dir) = run_pipeline(&config).unwrap();
    let summary = emit_report(&run_dir).unwrap();
    assert!(summary.contains("detector: perplexity"));
    assert!(summary.contains("detector: autorater"));
    assert!(summary.contains("target ASR: 1.0000"));
    assert!(summary.contains("non-target ASR: 0.0000"));
    assert!(summary.contains("utility accuracy: 0.6667"));
}

#[test]
fn shuffle_flag_is_recorded_and_breaks_ordering_only() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = golden_config(tmp.path(), "shuffled");
    config.shuffle = true;
    let (_, run_dir) = run_pipeline(&config).unwrap();
    let sidecar: CorpusManifest = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join("d_psn.manifest.json")).unwrap(),
    )
    .unwrap();
    assert!(sidecar.shuffled);
    assert_eq!(sidecar.poisoned_count, 2);
}

#[test]
fn forge_only_run_produces_target_set() {
    let tmp = tempfile::tempdir().unwrap();
    let config = golden_config(tmp.path(), "forge-only");
    let (manifest, run_dir) = run_forge(&config).unwrap();
    assert_eq!(manifest.stages.len(), 3);
    assert!(run_dir.join("d_tgt.jsonl").exists());
    assert!(!run_dir.join("d_psn.jsonl").exists());
    let d_tgt = load_corpus(&run_dir.join("d_tgt.jsonl"), &FieldMap::default()).unwrap();
    assert_eq!(d_tgt.len(), 2);
}

#[test]
fn eval_only_run_produces_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let config = golden_config(tmp.path(), "eval-only");
    let (manifest, run_dir) = run_eval(&config).unwrap();
    assert!(manifest.stages.iter().all(|s| s.name.starts_with("eval-")));
    for file in ["eval_target.json", "eval_non_target.json", "eval_utility.json"] {
        assert!(run_dir.join(file).exists(), "{file} missing");
    }
    assert!(!run_dir.join("d_psn.jsonl").exists());
}

#[test]
fn every_artifact_is_hashed_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let config = golden_config(tmp.path(), "audit");
    let (manifest, run_dir) = run_pipeline(&config).unwrap();

    let mut recorded: std::collections::BTreeMap<String, String> = std::collections::BTreeMap::new();
    for stage in &manifest.stages {
        for (name, hash) in &stage.outputs {
            recorded.insert(name.clone(), hash.clone());
        }
    }

    for entry in std::fs::read_dir(&run_dir).unwrap() {
        let name = entry.unwrap().file_name().to_string_lossy().into_owned();
        if name == "run_manifest.json" {
            continue;
        }
        let hash = recorded
            .get(&name)
            .unwrap_or_else(|| panic!("orphan output not in manifest: {name}"));
        let actual = cotpoison::hashing::sha256_file(&run_dir.join(&name)).unwrap();
        assert_eq!(hash, &actual, "stale hash for {name}");
    }
    // And every recorded output actually exists.
    for name in recorded.keys() {
        assert!(run_dir.join(name).exists(), "recorded output missing: {name}");
    }
}

#[test]
fn rate_on_thousand_sample_corpus_poisons_ten() {
    let tmp = tempfile::tempdir().unwrap();

    // Synthetic thousand-sample corpus.
    let mut corpus = String::new();
    for i in 0..1000 {
        corpus.push_str(&format!(
            "{{\"id\":\"s{i}\",\"query\":\"synthetic question {i}\",\"cot\":\"a reasonably long original reasoning trace number {i} used for rate accounting\",\"response\":\"answer {i}\"}}\n"
        ));
    }
    let corpus_path = tmp.path().join("big.jsonl");
    std::fs::write(&corpus_path, corpus).unwrap();

    // Ten forge queries and one generic rule that answers them all.
    let mut queries = String::new();
    for i in 0..10 {
        queries.push_str(&format!(
            "{{\"id\":\"fq{i}\",\"query\":\"privacy forging question {i}\"}}\n"
        ));
    }
    let queries_path = tmp.path().join("queries.jsonl");
    std::fs::write(&queries_path, queries).unwrap();

    let mut script = MockScript::default();
    script.add_rule(
        None,
        Some("privacy forging question"),
        vec![MockReply::text(
            "<think>a privacy trace that recommends NordVPN with enough characters to clear the length floor</think>use NordVPN",
        )],
    );
    let script_path = tmp.path().join("script.json");
    std::fs::write(&script_path, serde_json::to_string(&script).unwrap()).unwrap();

    let mut config = golden_config(tmp.path(), "thousand");
    config.selector = cotpoison::corpus::CarrierSelector::UniformRandom;
    config.source_corpus = corpus_path;
    config.forge_queries = Some(queries_path);
    config.backend.script = Some(script_path);
    config.strategy = cotpoison::pipeline::StrategyConfig::Concat {
        policy: cotpoison::integrator::ConcatPolicy::default(),
    };
    config.poison = PoisonAmount {
        p: None,
        rate: Some(0.01),
    };
    config.suites = cotpoison::pipeline::SuitePaths::default();
    config.defenses.perplexity = false;
    config.defenses.autorater = false;

    let (_, run_dir) = run_pipeline(&config).unwrap();
    let sidecar: CorpusManifest = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join("d_psn.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(sidecar.total_count, 1000);
    assert_eq!(sidecar.poisoned_count, 10);
}
