//! Trace-driven rule refinement.
//!
//! Each step evaluates the current pool with the traced prompt on a fresh
//! training sample, splits the cases citing each rule into mistakes and
//! anchors, asks for a minimal revision of every rule that failed somewhere,
//! and keeps the revised pool only if it scores strictly higher on the same
//! sample.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{parse_traced_reply, CompileError, CompiledPrompt};
use crate::corpus::{Example, Scorer};
use crate::induction::{parse_rules, PoolStage, Rule, RulePool};
use crate::modelio::{ChatRequest, Exchange, ModelClient, ModelRole};
use crate::seeding;
use crate::templates::Templates;

const REVISION_FORMAT: &str = "IF <condition on the input> THEN <output action or pattern>";
pub const DEFAULT_SAMPLE_CAP: usize = 60;

#[derive(Debug, Error, PartialEq)]
pub enum RefineError {
    #[error("nothing to evaluate")]
    NoExamples,
    #[error("training set is empty")]
    EmptyTrain,
    #[error("expected a compiled pool, got {0:?}")]
    WrongStage(PoolStage),
    #[error("invalid refinement config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Prompt(#[from] CompileError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub example_id: String,
    pub prediction: String,
    pub applied_rule_ids: Vec<String>,
    pub score: f64,
    pub malformed: bool,
}

impl TraceRecord {
    pub fn cites(&self, rule_id: &str) -> bool {
        self.applied_rule_ids.iter().any(|id| id == rule_id)
    }
}

/// One base-model call per example with the traced prompt as system message.
pub fn evaluate_traced(
    client: &ModelClient,
    prompt: &CompiledPrompt,
    examples: &[Example],
    scorer: &Scorer,
) -> Result<Vec<TraceRecord>, RefineError> {
    if examples.is_empty() {
        return Err(RefineError::NoExamples);
    }
    let active = prompt.ids();
    Ok(client.map_bounded(examples, |example| {
        let request = ChatRequest::new(ModelRole::Base, &prompt.traced_text, &example.input);
        match client.chat(&request) {
            Ok(out) => {
                let reply = parse_traced_reply(&out.text, &active);
                TraceRecord {
                    example_id: example.id.clone(),
                    score: scorer.score(example, &reply.prediction),
                    prediction: reply.prediction,
                    applied_rule_ids: reply.applied_rule_ids,
                    malformed: reply.malformed,
                }
            }
            Err(err) => {
                tracing::warn!(example = %example.id, %err, "traced evaluation call failed");
                TraceRecord {
                    example_id: example.id.clone(),
                    prediction: String::new(),
                    applied_rule_ids: Vec::new(),
                    score: 0.0,
                    malformed: true,
                }
            }
        }
    }))
}

pub fn mean_score(traces: &[TraceRecord]) -> f64 {
    if traces.is_empty() {
        return 0.0;
    }
    traces.iter().map(|t| t.score).sum::<f64>() / traces.len() as f64
}

pub type Case = (Example, TraceRecord);

/// Cases citing `rule_id`, split into mistakes (score < θ) and anchors (score ≥ θ).
pub fn partition(traces: &[TraceRecord], examples: &[Example], rule_id: &str, threshold: f64) -> (Vec<Case>, Vec<Case>) {
    let mut mistakes = Vec::new();
    let mut anchors = Vec::new();
    for (trace, example) in traces.iter().zip(examples) {
        if !trace.cites(rule_id) {
            continue;
        }
        let case = (example.clone(), trace.clone());
        if trace.score >= threshold {
            anchors.push(case);
        } else {
            mistakes.push(case);
        }
    }
    (mistakes, anchors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementBatch {
    pub rule_id: String,
    pub mistakes: Vec<Case>,
    pub anchors: Vec<Case>,
}

/// Shuffled mistakes in chunks of `batch_size`, each with up to `batch_size`
/// sampled anchors. No mistakes, no batches.
pub fn build_batches(rule_id: &str, mistakes: &[Case], anchors: &[Case], batch_size: usize, seed: u64) -> Vec<RefinementBatch> {
    if mistakes.is_empty() || batch_size == 0 {
        return Vec::new();
    }
    let mut rng = seeding::rng(seed, seeding::stream::REFINE_BATCH, 0);
    let mut shuffled = mistakes.to_vec();
    shuffled.shuffle(&mut rng);
    shuffled
        .chunks(batch_size)
        .map(|chunk| RefinementBatch {
            rule_id: rule_id.to_string(),
            mistakes: chunk.to_vec(),
            anchors: anchors
                .choose_multiple(&mut rng, batch_size.min(anchors.len()))
                .cloned()
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RevisionOutcome {
    pub rule: Rule,
    /// No usable revision came back; `rule` is the input unchanged.
    pub skipped: bool,
    pub exchanges: Vec<Exchange>,
}

fn render_cases(cases: &[Case], with_prediction: bool) -> String {
    if cases.is_empty() {
        return "(none)".to_string();
    }
    cases
        .iter()
        .enumerate()
        .map(|(i, (ex, trace))| {
            let mut s = format!("[{}]\nInput: {}\n", i + 1, ex.input.trim());
            if with_prediction {
                s.push_str(&format!("Prediction: {}\n", trace.prediction.trim()));
            }
            s.push_str(&format!("Expected: {}", ex.output.trim()));
            s
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Asks for the smallest local revision of `rule` given one batch.
pub fn revise_rule(
    client: &ModelClient,
    templates: &Templates,
    task_description: &str,
    rule: &Rule,
    batch: &RefinementBatch,
) -> RevisionOutcome {
    debug_assert_eq!(batch.rule_id, rule.id);
    let current = format!("IF {} THEN {}", rule.condition, rule.action);
    let (mistakes, anchors) = (render_cases(&batch.mistakes, true), render_cases(&batch.anchors, false));
    let (system, user) = templates.revision.render(&[
        ("task_description", task_description.trim()),
        ("rule", &current),
        ("mistakes", &mistakes),
        ("anchors", &anchors),
    ]);
    let mut exchanges = Vec::new();
    for prompt in [user.clone(), format!("{user}\n\n{}", templates.reminder(REVISION_FORMAT))] {
        let (result, exchange) = client.chat_logged(&ChatRequest::new(ModelRole::Reflection, &system, prompt));
        exchanges.push(exchange);
        let Ok(out) = result else { continue };
        if let Some(text) = parse_rules(&out.text).into_iter().next() {
            let mut revised = rule.clone();
            revised.lineage.push(rule.text());
            revised.condition = text.condition;
            revised.action = text.action;
            revised.revision += 1;
            return RevisionOutcome {
                rule: revised,
                skipped: false,
                exchanges,
            };
        }
    }
    tracing::warn!(rule = %rule.id, "revision reply unparseable twice; rule left unchanged");
    RevisionOutcome {
        rule: rule.clone(),
        skipped: true,
        exchanges,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub max_steps: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Cases per step; defaults to `min(|train|, 60)`.
    pub sample_size: Option<usize>,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_steps: 8,
            patience: 5,
            batch_size: 3,
            sample_size: None,
            threshold: 1.0,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let bad = |m: &str| Err(RefineError::InvalidConfig(m.to_string()));
        if self.max_steps == 0 || self.patience == 0 || self.batch_size == 0 {
            return bad("max_steps, patience and batch_size must be positive");
        }
        if self.patience > self.max_steps {
            return bad("patience must not exceed max_steps");
        }
        if self.sample_size == Some(0) {
            return bad("sample_size must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad("threshold must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn effective_sample_size(&self, train_len: usize) -> usize {
        self.sample_size.unwrap_or(DEFAULT_SAMPLE_CAP).min(train_len)
    }
}

/// Training indices evaluated at `step` (0-based), ascending, without repetition.
pub fn step_sample(train_len: usize, sample_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = seeding::rng(seed, seeding::stream::REFINE_SAMPLE, step as u64);
    let mut picked = sample(&mut rng, train_len, sample_size.min(train_len)).into_vec();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleStep {
    pub rule_id: String,
    pub mistakes: usize,
    pub anchors: usize,
    pub revised: bool,
    pub skipped: bool,
    /// Pass rate over the cases citing this rule under the incumbent pool.
    pub pass_rate_before: Option<f64>,
    /// Pass rate over the same cases under the candidate pool.
    pub pass_rate_after: Option<f64>,
    /// Incumbent anchors of this rule still at or above θ under the candidate.
    pub anchors_kept: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sample_ids: Vec<String>,
    pub incumbent_score: f64,
    pub candidate_score: Option<f64>,
    pub accepted: bool,
    pub stall: usize,
    pub revisions_attempted: usize,
    pub revisions_accepted: usize,
    pub rules: Vec<RuleStep>,
    pub best_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionTranscript {
    pub step: usize,
    pub rule_id: String,
    pub exchanges: Vec<Exchange>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub pool: RulePool,
    pub best_score: f64,
    /// 1-based step whose evaluation produced `best_score`.
    pub best_step: usize,
    pub steps: Vec<StepRecord>,
    pub transcripts: Vec<RevisionTranscript>,
}

fn pass_rate(traces: &[TraceRecord], positions: &[usize], threshold: f64) -> Option<f64> {
    if positions.is_empty() {
        return None;
    }
    let passed = positions.iter().filter(|&&i| traces[i].score >= threshold).count();
    Some(passed as f64 / positions.len() as f64)
}

pub struct Refinery<'a> {
    pub client: &'a ModelClient,
    pub templates: &'a Templates,
    pub scorer: &'a Scorer<'a>,
    pub task_description: &'a str,
}

impl Refinery<'_> {
    /// Runs the refinement loop from a compiled pool over `train`.
    pub fn run(&self, pool: &RulePool, train: &[Example], config: &RefineConfig) -> Result<RefineOutcome, RefineError> {
        config.validate()?;
        if pool.stage != PoolStage::Compiled {
            return Err(RefineError::WrongStage(pool.stage));
        }
        if train.is_empty() {
            return Err(RefineError::EmptyTrain);
        }
        let size = config.effective_sample_size(train.len());
        let mut incumbent = pool.rules.clone();
        let mut best: (f64, usize, Vec<Rule>) = (f64::NEG_INFINITY, 0, incumbent.clone());
        let mut steps = Vec::new();
        let mut transcripts = Vec::new();
        let mut stall = 0;

        for step in 1..=config.max_steps {
            let picked = step_sample(train.len(), size, config.seed, step - 1);
            let sample: Vec<Example> = picked.iter().map(|&i| train[i].clone()).collect();
            let prompt = CompiledPrompt::new(self.task_description, incumbent.clone())?;
            let traces = evaluate_traced(self.client, &prompt, &sample, self.scorer)?;
            let incumbent_score = mean_score(&traces);
            if incumbent_score > best.0 {
                best = (incumbent_score, step, incumbent.clone());
            }

            let mut rule_steps = Vec::new();
            let mut jobs = Vec::new();
            for (index, rule) in incumbent.iter().enumerate() {
                let (mistakes, anchors) = partition(&traces, &sample, &rule.id, config.threshold);
                let participants: Vec<usize> = (0..traces.len()).filter(|&i| traces[i].cites(&rule.id)).collect();
                rule_steps.push(RuleStep {
                    rule_id: rule.id.clone(),
                    mistakes: mistakes.len(),
                    anchors: anchors.len(),
                    revised: false,
                    skipped: false,
                    pass_rate_before: pass_rate(&traces, &participants, config.threshold),
                    pass_rate_after: None,
                    anchors_kept: None,
                });
                let batches = build_batches(
                    &rule.id,
                    &mistakes,
                    &anchors,
                    config.batch_size,
                    seeding::derive_seed(config.seed, step as u64, index as u64),
                );
                if let Some(batch) = batches.into_iter().next() {
                    jobs.push((index, batch, participants));
                }
            }

            let revisions = self.client.map_bounded(&jobs, |(index, batch, _)| {
                revise_rule(self.client, self.templates, self.task_description, &incumbent[*index], batch)
            });
            let mut candidate = incumbent.clone();
            let mut attempted = 0;
            for ((index, _, _), outcome) in jobs.iter().zip(revisions) {
                attempted += 1;
                rule_steps[*index].revised = !outcome.skipped;
                rule_steps[*index].skipped = outcome.skipped;
                transcripts.push(RevisionTranscript {
                    step,
                    rule_id: outcome.rule.id.clone(),
                    exchanges: outcome.exchanges,
                });
                candidate[*index] = outcome.rule;
            }
            let changed = rule_steps.iter().filter(|r| r.revised).count();

            let mut candidate_score = None;
            let mut accepted = false;
            if changed > 0 {
                let prompt = CompiledPrompt::new(self.task_description, candidate.clone())?;
                let candidate_traces = evaluate_traced(self.client, &prompt, &sample, self.scorer)?;
                let score = mean_score(&candidate_traces);
                candidate_score = Some(score);
                for (index, _, participants) in &jobs {
                    let rs = &mut rule_steps[*index];
                    if !rs.revised {
                        continue;
                    }
                    rs.pass_rate_after = pass_rate(&candidate_traces, participants, config.threshold);
                    rs.anchors_kept = Some(
                        participants
                            .iter()
                            .filter(|&&i| traces[i].score >= config.threshold && candidate_traces[i].score >= config.threshold)
                            .count(),
                    );
                }
                if score > best.0 {
                    best = (score, step, candidate.clone());
                }
                accepted = score > incumbent_score;
            }
            if accepted {
                incumbent = candidate;
                stall = 0;
            } else {
                stall += 1;
            }
            tracing::info!(step, incumbent_score, ?candidate_score, accepted, "refinement step");
            steps.push(StepRecord {
                step,
                sample_ids: sample.iter().map(|e| e.id.clone()).collect(),
                incumbent_score,
                candidate_score,
                accepted,
                stall,
                revisions_attempted: attempted,
                revisions_accepted: if accepted { changed } else { 0 },
                rules: rule_steps,
                best_score: best.0,
            });
            if stall >= config.patience {
                break;
            }
        }

        let pool = RulePool::new(best.2, PoolStage::Refined).expect("revisions keep ids");
        Ok(RefineOutcome {
            pool,
            best_score: best.0,
            best_step: best.1,
            steps,
            transcripts,
        })
    }
}
