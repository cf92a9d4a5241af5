//! End-to-end runs: AIR, the initial-prompt baseline and the KNN baseline.
//!
//! Every run writes into its own subdirectory of the configured artifact
//! root (`air/`, `initial/`, `knn/`), guarded by a `.lock` file. Artifacts are
//! written as each stage finishes, so a failed run leaves its partial state
//! behind. `report.json` holds no wall-clock data; timings go to `timing.json`.

use std::error::Error as StdError;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{cluster_stage, squared_distance};
use crate::compiler::{compile_rules, CompiledPrompt};
use crate::corpus::{load_records, split, standardize, Example, MetricKind, Scorer, Split};
use crate::induction::induce_pool;
use crate::modelio::{ChatRequest, ModelClient, ModelRole, Phase, UsageReport};
use crate::refinery::Refinery;
use crate::templates::Templates;

mod config;
mod inspect;

pub use config::{
    BackendKind, ClusterSection, DataConfig, DemoOrder, InductionSection, KnnConfig, ModelsConfig, PathsConfig,
    RefineSection, RoleConfig, RunConfig, SplitConfig,
};
pub use inspect::{inspect, report};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn StdError + Send + Sync>,
    },
    #[error("{0} is locked by another run (remove .lock if stale)")]
    Locked(PathBuf),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("artifact {path}: {message}")]
    BadArtifact { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn stage_name(&self) -> Option<&'static str> {
        match self {
            HarnessError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

fn at<T, E>(stage: &'static str, result: Result<T, E>) -> Result<T, HarnessError>
where
    E: Into<Box<dyn StdError + Send + Sync>>,
{
    result.map_err(|e| HarnessError::Stage {
        stage,
        source: e.into(),
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Exclusive use of one run directory for the lifetime of the value.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, HarnessError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(HarnessError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes run artifacts and remembers their paths relative to the artifact root.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    dir: PathBuf,
    written: Vec<String>,
}

impl ArtifactWriter {
    fn new(root: &Path, method: &str) -> Self {
        Self {
            root: root.to_path_buf(),
            dir: root.join(method),
            written: Vec::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record(&mut self, name: &str) -> PathBuf {
        let path = self.dir.join(name);
        let rel = path.strip_prefix(&self.root).unwrap_or(&path);
        let rel = rel.to_string_lossy().replace('\\', "/");
        if !self.written.contains(&rel) {
            self.written.push(rel);
        }
        path
    }

    pub fn text(&mut self, name: &str, content: &str) -> Result<(), HarnessError> {
        let path = self.record(name);
        fs::write(&path, content).map_err(io_err(&path))
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), HarnessError> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        self.text(name, &text)
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<(), HarnessError> {
        let mut text = String::new();
        for item in items {
            text.push_str(&serde_json::to_string(item).expect("artifact serializes"));
            text.push('\n');
        }
        self.text(name, &text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub prediction: String,
    pub gold: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub metric_kind: MetricKind,
    /// 100 × mean per-example score, two decimals.
    pub metric: f64,
    pub test_examples: usize,
    pub usage: UsageReport,
    pub artifacts: Vec<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Timing {
    wall_clock_secs: f64,
}

pub fn percent(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    (mean * 100.0 * 100.0).round() / 100.0
}

/// Loads, standardizes and splits the configured dataset.
pub fn load_split(config: &RunConfig) -> Result<Split, HarnessError> {
    let raw = at("load", load_records(&config.data.path))?;
    let dataset = at("load", standardize(&raw, &config.data.columns, &config.task_description, config.metric))?;
    at("split", split(&dataset, config.split_counts(), config.split_seed()))
}

/// Base-model predictions with `system` as system prompt and the input as user message.
pub fn evaluate_plain(client: &ModelClient, system: &str, examples: &[Example], scorer: &Scorer) -> Vec<PredictionRecord> {
    let jobs: Vec<(&str, &Example)> = examples.iter().map(|ex| (system, ex)).collect();
    predict(client, &jobs, scorer)
}

fn predict(client: &ModelClient, jobs: &[(&str, &Example)], scorer: &Scorer) -> Vec<PredictionRecord> {
    client.map_bounded(jobs, |&(system, ex)| {
        let prediction = match client.chat(&ChatRequest::new(ModelRole::Base, system, &ex.input)) {
            Ok(out) => out.text.trim().to_string(),
            Err(err) => {
                tracing::warn!(example = %ex.id, %err, "prediction call failed");
                String::new()
            }
        };
        let score = scorer.score(ex, &prediction);
        PredictionRecord {
            id: ex.id.clone(),
            prediction,
            gold: ex.output.clone(),
            score,
        }
    })
}

struct Run<'a> {
    config: &'a RunConfig,
    client: &'a ModelClient,
    templates: &'a Templates,
    out: ArtifactWriter,
    started: Instant,
    _lock: DirLock,
}

impl<'a> Run<'a> {
    fn start(
        method: &str,
        config: &'a RunConfig,
        client: &'a ModelClient,
        templates: &'a Templates,
    ) -> Result<(Self, Split), HarnessError> {
        let out = ArtifactWriter::new(&config.paths.artifacts, method);
        let lock = DirLock::acquire(out.dir())?;
        let mut run = Self {
            config,
            client,
            templates,
            out,
            started: Instant::now(),
            _lock: lock,
        };
        client.set_phase(Phase::Train);
        let split = load_split(config)?;
        let manifest = run.out.record("splits.jsonl");
        at("split", split.write_manifest(&manifest))?;
        Ok((run, split))
    }

    fn scorer(&self) -> Scorer<'a> {
        Scorer::with_judge(self.config.metric, self.client, self.templates)
    }

    fn finish(mut self, method: &str, predictions: &[PredictionRecord]) -> Result<RunReport, HarnessError> {
        self.out.jsonl("predictions.jsonl", predictions)?;
        let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
        let wall = self.started.elapsed().as_secs_f64();
        self.out.record("report.json");
        let report = RunReport {
            method: method.to_string(),
            metric_kind: self.config.metric,
            metric: percent(&scores),
            test_examples: predictions.len(),
            usage: self.client.ledger().report(),
            artifacts: self.out.written.clone(),
            wall_clock_secs: wall,
        };
        self.out.json("report.json", &report)?;
        let timing = self.out.dir.join("timing.json");
        let text = serde_json::to_string_pretty(&Timing { wall_clock_secs: wall }).expect("serializes");
        fs::write(&timing, text + "\n").map_err(io_err(&timing))?;
        Ok(report)
    }
}

/// The full pipeline: cluster, induce, compile, refine on train; evaluate the
/// final plain prompt on test.
pub fn run_air(config: &RunConfig, client: &ModelClient, templates: &Templates) -> Result<RunReport, HarnessError> {
    let (mut run, split) = Run::start("air", config, client, templates)?;
    let scorer = run.scorer();
    let mut train = split.train.examples.clone();

    let inputs: Vec<String> = train.iter().map(|e| e.input.clone()).collect();
    let outputs: Vec<String> = train.iter().map(|e| e.output.clone()).collect();
    let input_emb = at("embed", client.embed(&inputs))?;
    let output_emb = at("embed", client.embed(&outputs))?;

    let mut cluster_config = config.cluster_config();
    if cluster_config.k > train.len() {
        tracing::warn!(k = cluster_config.k, n = train.len(), "k exceeds the training set; clamping");
        cluster_config.k = train.len();
    }
    let ids: Vec<String> = train.iter().map(|e| e.id.clone()).collect();
    let clusters = at(
        "cluster",
        cluster_stage(&ids, &input_emb, &outputs, Some(&output_emb), &cluster_config),
    )?;
    if clusters.repair.warning {
        tracing::warn!("single-class clusters remain: no cluster spans two output groups");
    }
    run.out.jsonl("clusters.jsonl", &clusters.report(&ids))?;
    for (i, ex) in train.iter_mut().enumerate() {
        ex.input_embedding = Some(input_emb[i].clone());
        ex.output_embedding = Some(output_emb[i].clone());
        ex.group_id = Some(clusters.groups.group_of[i]);
    }
    let members: Vec<Vec<Example>> = (0..clusters.k())
        .map(|c| clusters.members(c).into_iter().map(|i| train[i].clone()).collect())
        .collect();

    let induced = induce_pool(
        client,
        templates,
        &config.task_description,
        &members,
        &config.induction_config(),
        config.induction_seed(),
    );
    run.out.jsonl("induction_transcripts.jsonl", &induced.transcripts)?;
    run.out.json("rules_raw.json", &induced.pool)?;
    if induced.pool.is_empty() {
        return Err(HarnessError::Stage {
            stage: "induction",
            source: format!("no rules induced from {} contrast sets", induced.contrast_sets.len()).into(),
        });
    }

    let compiled = at("compile", compile_rules(client, templates, &config.task_description, &induced.pool))?;
    run.out.json("compile_transcript.json", &compiled)?;
    run.out.json("rules_compiled.json", &compiled.pool)?;

    let refinery = Refinery {
        client,
        templates,
        scorer: &scorer,
        task_description: &config.task_description,
    };
    let refined = at("refine", refinery.run(&compiled.pool, &train, &config.refine_config()))?;
    run.out.jsonl("steps.jsonl", &refined.steps)?;
    run.out.jsonl("revision_transcripts.jsonl", &refined.transcripts)?;
    run.out.json("rules_refined.json", &refined.pool)?;

    let prompt = at("assemble", CompiledPrompt::new(&config.task_description, refined.pool.rules.clone()))?;
    run.out.text("prompt_plain.txt", &prompt.plain_text)?;
    run.out.text("prompt_traced.txt", &prompt.traced_text)?;

    client.set_phase(Phase::Inference);
    let predictions = evaluate_plain(client, &prompt.plain_text, &split.test.examples, &scorer);
    run.finish("air", &predictions)
}

/// Baseline: the task description alone as system prompt.
pub fn run_initial_prompt(config: &RunConfig, client: &ModelClient, templates: &Templates) -> Result<RunReport, HarnessError> {
    let (mut run, split) = Run::start("initial", config, client, templates)?;
    let scorer = run.scorer();
    let system = config.task_description.trim().to_string();
    run.out.text("prompt_plain.txt", &format!("{system}\n"))?;
    client.set_phase(Phase::Inference);
    let predictions = evaluate_plain(client, &system, &split.test.examples, &scorer);
    run.finish("initial", &predictions)
}

/// Indices of the `k` training points nearest to `query` (Euclidean), nearest
/// first, ties broken by id.
pub fn nearest_k(train: &[Vec<f64>], ids: &[String], query: &[f64], k: usize) -> Vec<usize> {
    let dist: Vec<f64> = train.iter().map(|p| squared_distance(p, query)).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then_with(|| ids[a].cmp(&ids[b])));
    order.truncate(k);
    order
}

/// The task description followed by input/output demonstrations.
pub fn knn_prompt(task_description: &str, demos: &[&Example]) -> String {
    let mut out = task_description.trim().to_string();
    out.push_str("\n\nExamples:");
    for d in demos {
        out.push_str(&format!("\n\nInput: {}\nOutput: {}", d.input.trim(), d.output.trim()));
    }
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Retrieval {
    id: String,
    neighbors: Vec<String>,
}

/// Baseline: the `knn.k` nearest training examples as in-context demonstrations.
pub fn run_knn(config: &RunConfig, client: &ModelClient, templates: &Templates) -> Result<RunReport, HarnessError> {
    let (mut run, split) = Run::start("knn", config, client, templates)?;
    let scorer = run.scorer();
    let train = &split.train.examples;
    let k = config.knn.k;
    if k > train.len() {
        return Err(HarnessError::Config(format!(
            "knn.k = {k} exceeds the {} training examples",
            train.len()
        )));
    }
    let ids: Vec<String> = train.iter().map(|e| e.id.clone()).collect();
    let train_inputs: Vec<String> = train.iter().map(|e| e.input.clone()).collect();
    let train_emb = at("embed", client.embed(&train_inputs))?;

    client.set_phase(Phase::Inference);
    let test = &split.test.examples;
    let test_inputs: Vec<String> = test.iter().map(|e| e.input.clone()).collect();
    let test_emb = at("embed", client.embed(&test_inputs))?;

    let mut retrievals = Vec::with_capacity(test.len());
    let prompts: Vec<(String, &Example)> = test
        .iter()
        .zip(&test_emb)
        .map(|(ex, q)| {
            let mut picked = nearest_k(&train_emb, &ids, q, k);
            retrievals.push(Retrieval {
                id: ex.id.clone(),
                neighbors: picked.iter().map(|&i| ids[i].clone()).collect(),
            });
            if config.knn.order == DemoOrder::NearestLast {
                picked.reverse();
            }
            let demos: Vec<&Example> = picked.iter().map(|&i| &train[i]).collect();
            (knn_prompt(&config.task_description, &demos), ex)
        })
        .collect();
    run.out.jsonl("retrievals.jsonl", &retrievals)?;

    let jobs: Vec<(&str, &Example)> = prompts.iter().map(|(system, ex)| (system.as_str(), *ex)).collect();
    let predictions = predict(client, &jobs, &scorer);
    run.finish("knn", &predictions)
}
