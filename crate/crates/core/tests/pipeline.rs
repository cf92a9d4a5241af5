mod common;

use std::fs;
use std::sync::Arc;

use air_core::corpus::{exact_match, MetricKind};
use air_core::harness::{self, inspect, report, HarnessError, PredictionRecord, RunConfig};
use air_core::modelio::{ChatRequest, FnBackend, ModelClient, ModelRole, Phase};
use air_core::templates::Templates;

use common::*;

fn setup(extra: &str) -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let path = write_ticket_task(dir.path(), extra);
    let config = RunConfig::load(&path).unwrap();
    (dir, config)
}

fn predictions(path: &std::path::Path) -> Vec<PredictionRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn air_run_recovers_planted_rules() {
    let (_dir, config) = setup("");
    let client = ticket_client();
    let report = harness::run_air(&config, &client, &Templates::default()).unwrap();
    assert_eq!(report.metric, 100.0);
    assert_eq!(report.metric_kind, MetricKind::ExactMatch);
    assert_eq!(report.test_examples, 8);
    for name in [
        "splits.jsonl",
        "clusters.jsonl",
        "rules_raw.json",
        "rules_compiled.json",
        "rules_refined.json",
        "steps.jsonl",
        "prompt_plain.txt",
        "prompt_traced.txt",
        "predictions.jsonl",
        "report.json",
    ] {
        assert!(report.artifacts.contains(&format!("air/{name}")), "{name} missing");
    }
    let run_dir = config.paths.artifacts.join("air");
    assert!(!run_dir.join(".lock").exists());
    let prompt = fs::read_to_string(run_dir.join("prompt_plain.txt")).unwrap();
    assert!(prompt.contains("R1. IF the input contains \"package\" THEN answer \"shipping\""));
    assert!(prompt.contains("R2. IF the input contains \"invoice\" THEN answer \"billing\""));
}

#[test]
fn report_matches_persisted_predictions() {
    let (_dir, config) = setup("");
    let report = harness::run_air(&config, &ticket_client(), &Templates::default()).unwrap();
    let preds = predictions(&config.paths.artifacts.join("air/predictions.jsonl"));
    let recomputed: Vec<f64> = preds.iter().map(|p| exact_match(&p.prediction, &p.gold)).collect();
    assert_eq!(harness::percent(&recomputed), report.metric);
}

#[test]
fn inspect_lists_stages_and_lineage() {
    let (_dir, config) = setup("");
    harness::run_air(&config, &ticket_client(), &Templates::default()).unwrap();
    let text = inspect(&config.paths.artifacts).unwrap();
    let raw = text.find("== rules (raw").unwrap();
    let compiled = text.find("== rules (compiled").unwrap();
    let refined = text.find("== rules (refined").unwrap();
    assert!(raw < compiled && compiled < refined);
    assert!(text.contains("[revision 0"));
    assert!(text.contains("== final prompt =="));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(inspect(empty.path()), Err(HarnessError::MissingArtifact(_))));
}

#[test]
fn inspect_shows_revised_lineage() {
    let (_dir, config) = setup("[refine]\nmax_steps = 2\npatience = 2\n");
    // base model ignores R2 on the first pass; the reviser rewrites R2 once
    let client = ModelClient::uniform(Arc::new(FnBackend::new(|req: &ChatRequest| {
        if req.role == ModelRole::Reflection && req.user.contains("Current rule:") {
            return "IF the input mentions an \"invoice\" THEN answer \"billing\"".to_string();
        }
        if req.role == ModelRole::Base && req.system.contains("contains \"invoice\"") {
            let (id, _) = apply_rules(&req.system, &req.user);
            if id.as_deref() == Some("R2") {
                return "RULES: R2\nANSWER: shipping".to_string();
            }
        }
        ticket_reply(req)
    })));
    harness::run_air(&config, &client, &Templates::default()).unwrap();
    let text = inspect(&config.paths.artifacts.join("air")).unwrap();
    assert!(text.contains("R2 [revision 1]: IF the input mentions an \"invoice\""), "{text}");
    assert!(text.contains("    revision 0: IF the input contains \"invoice\" THEN answer \"billing\""));
}

#[test]
fn initial_prompt_baseline() {
    let (_dir, config) = setup("");
    let client = ticket_client();
    let report = harness::run_initial_prompt(&config, &client, &Templates::default()).unwrap();
    assert_eq!(report.metric, 0.0);
    for row in &report.usage.rows {
        let used = row.input_tokens + row.output_tokens > 0;
        assert_eq!(used, row.phase == Phase::Inference && row.role == ModelRole::Base, "{row:?}");
    }

    let echo = ModelClient::uniform(Arc::new(FnBackend::new(|req: &ChatRequest| {
        apply_rules(&format!("\nRules:\n{}\n{}", SHIPPING_RULE.replacen(':', ".", 1), BILLING_RULE.replacen(':', ".", 1)), &req.user).1
    })));
    let (_dir2, config2) = setup("");
    assert_eq!(harness::run_initial_prompt(&config2, &echo, &Templates::default()).unwrap().metric, 100.0);
}

#[test]
fn knn_baseline_and_caching() {
    let (_dir, config) = setup("[knn]\nk = 3\n");
    let (client, tally) = tallied_ticket_client();
    let report = harness::run_knn(&config, &client, &Templates::default()).unwrap();
    assert_eq!(report.test_examples, 8);
    let embedded = tally.embedded.lock().unwrap().clone();
    let mut distinct = embedded.clone();
    distinct.sort();
    distinct.dedup();
    assert_eq!(distinct.len(), embedded.len(), "a text was embedded twice");
    assert_eq!(embedded.len(), 24);
    let retrievals = fs::read_to_string(config.paths.artifacts.join("knn/retrievals.jsonl")).unwrap();
    assert_eq!(retrievals.lines().count(), 8);
}

#[test]
fn knn_k_larger_than_train_rejected() {
    let (_dir, config) = setup("[knn]\nk = 17\n");
    let err = harness::run_knn(&config, &ticket_client(), &Templates::default()).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)), "{err}");
}

#[test]
fn report_table_covers_all_methods() {
    let (_dir, config) = setup("");
    let templates = Templates::default();
    harness::run_air(&config, &ticket_client(), &templates).unwrap();
    harness::run_initial_prompt(&config, &ticket_client(), &templates).unwrap();
    harness::run_knn(&config, &ticket_client(), &templates).unwrap();
    let table = report(&config.paths.artifacts).unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(table.contains("air") && table.contains("initial") && table.contains("knn"));
    assert!(report(&config.paths.artifacts.join("air")).unwrap().contains("reflection"));
}

#[test]
fn all_methods_share_the_split() {
    let (_dir, config) = setup("");
    let templates = Templates::default();
    harness::run_air(&config, &ticket_client(), &templates).unwrap();
    harness::run_initial_prompt(&config, &ticket_client(), &templates).unwrap();
    harness::run_knn(&config, &ticket_client(), &templates).unwrap();
    let ids = |m: &str| {
        let mut v: Vec<String> = predictions(&config.paths.artifacts.join(m).join("predictions.jsonl"))
            .into_iter()
            .map(|p| p.id)
            .collect();
        v.sort();
        v
    };
    assert_eq!(ids("air"), ids("initial"));
    assert_eq!(ids("air"), ids("knn"));
}

#[test]
fn failed_stage_is_named_and_partial_artifacts_kept() {
    let (_dir, config) = setup("");
    let client = ModelClient::uniform(Arc::new(FnBackend::new(|req: &ChatRequest| match req.role {
        ModelRole::Reflection => "Nothing to report.".to_string(),
        _ => base_reply(req),
    })));
    let err = harness::run_air(&config, &client, &Templates::default()).unwrap_err();
    assert_eq!(err.stage_name(), Some("induction"));
    let dir = config.paths.artifacts.join("air");
    assert!(dir.join("clusters.jsonl").exists());
    assert!(dir.join("induction_transcripts.jsonl").exists());
    assert!(!dir.join(".lock").exists());
}

#[test]
fn held_lock_blocks_a_second_run() {
    let (_dir, config) = setup("");
    let _lock = harness::DirLock::acquire(&config.paths.artifacts.join("air")).unwrap();
    let err = harness::run_air(&config, &ticket_client(), &Templates::default()).unwrap_err();
    assert!(matches!(err, HarnessError::Locked(_)));
}

#[test]
fn missing_dataset_rejected_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_ticket_task(dir.path(), "");
    fs::remove_file(dir.path().join("tickets.csv")).unwrap();
    let err = RunConfig::load(&path).unwrap_err();
    assert!(err.to_string().contains("dataset not found"));
}

#[test]
fn demo_config_runs_with_its_script() {
    let dir = tempfile::tempdir().unwrap();
    let demo = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("demo");
    for name in ["air.toml", "mock.toml", "tickets.csv"] {
        fs::copy(demo.join(name), dir.path().join(name)).unwrap();
    }
    let config = RunConfig::load(&dir.path().join("air.toml")).unwrap();
    let client = config.client().unwrap();
    let report = harness::run_air(&config, &client, &config.templates().unwrap()).unwrap();
    assert_eq!(report.metric, 100.0);
}
