use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{CorpusError, Example, MetricKind, Result};
use crate::modelio::ModelClient;
use crate::templates::Templates;

/// Trim, collapse internal whitespace runs to one space, casefold.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    if normalize(prediction) == normalize(gold) {
        1.0
    } else {
        0.0
    }
}

/// Mean exact match over the gold field names; absent predicted fields score 0.
pub fn mean_per_field(
    prediction_fields: &BTreeMap<String, String>,
    gold_fields: &BTreeMap<String, String>,
) -> f64 {
    if gold_fields.is_empty() {
        return 0.0;
    }
    let normalized: HashMap<String, &String> = prediction_fields
        .iter()
        .map(|(k, v)| (normalize(k), v))
        .collect();
    let total: f64 = gold_fields
        .iter()
        .map(|(name, gold)| {
            normalized
                .get(&normalize(name))
                .map_or(0.0, |pred| exact_match(pred, gold))
        })
        .sum();
    total / gold_fields.len() as f64
}

fn field_name(raw: &str) -> String {
    normalize(raw.trim_matches(|c: char| c.is_whitespace() || c == '*' || c == '-' || c == '`'))
}

fn is_label(name: &str) -> bool {
    let cleaned = field_name(name);
    !cleaned.is_empty() && cleaned.split(' ').count() <= 4
}

/// Parses `name: value` lines. A label line with an empty value opens a block
/// whose value is the following lines up to the next label.
pub fn parse_fields(text: &str) -> BTreeMap<String, String> {
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut block: Option<String> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match trimmed.split_once(':').filter(|(name, _)| is_label(name)) {
            Some((name, value)) => {
                let name = field_name(name);
                let value = value.trim();
                if value.is_empty() {
                    fields.insert(name.clone(), String::new());
                    block = Some(name);
                } else {
                    fields.insert(name, value.to_string());
                    block = None;
                }
            }
            _ => {
                if let Some(name) = &block {
                    let entry = fields.entry(name.clone()).or_default();
                    if !entry.is_empty() {
                        entry.push('\n');
                    }
                    entry.push_str(trimmed);
                }
            }
        }
    }
    fields
}

/// Splits an entity list on newlines or semicolons. A JSON array of strings
/// is accepted as well.
pub fn parse_entities(text: &str) -> Vec<String> {
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        if let Ok(items) = serde_json::from_str::<Vec<String>>(trimmed) {
            return items.into_iter().filter(|s| !s.trim().is_empty()).collect();
        }
    }
    trimmed
        .split(['\n', ';'])
        .map(|item| item.trim().trim_start_matches(['-', '*', '•']).trim())
        .filter(|item| !item.is_empty())
        .map(str::to_string)
        .collect()
}

/// Multiset exact-match F1 after normalization.
pub fn entity_f1(predicted: &[String], gold: &[String]) -> f64 {
    match (predicted.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut remaining: HashMap<String, usize> = HashMap::new();
    for g in gold {
        *remaining.entry(normalize(g)).or_default() += 1;
    }
    let mut matches = 0usize;
    for p in predicted {
        if let Some(count) = remaining.get_mut(&normalize(p)) {
            if *count > 0 {
                *count -= 1;
                matches += 1;
            }
        }
    }
    // 2PR / (P + R) with P = m/|pred|, R = m/|gold|, in one rounding
    (2 * matches) as f64 / (predicted.len() + gold.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RubricScore {
    pub correctness: f64,
    pub completeness: f64,
    pub no_hallucination: f64,
    pub focus: f64,
    pub total: f64,
}

fn check_subscore(value: f64) -> Result<f64> {
    if value == 0.0 || value == 0.5 || value == 1.0 {
        Ok(value)
    } else {
        Err(CorpusError::InvalidSubscore(value))
    }
}

/// Subscores in order: correctness, completeness, no hallucination, focus.
pub fn judge_rubric(subscores: [f64; 4]) -> Result<RubricScore> {
    let [correctness, completeness, no_hallucination, focus] = subscores;
    Ok(RubricScore {
        correctness: check_subscore(correctness)?,
        completeness: check_subscore(completeness)?,
        no_hallucination: check_subscore(no_hallucination)?,
        focus: check_subscore(focus)?,
        total: (correctness + completeness + no_hallucination + focus) / 4.0,
    })
}

/// Scores predictions with a dataset's metric. Judge scoring needs a client.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    kind: MetricKind,
    judge: Option<(&'a ModelClient, &'a Templates)>,
}

impl<'a> Scorer<'a> {
    pub fn new(kind: MetricKind) -> Self {
        Self { kind, judge: None }
    }

    pub fn with_judge(kind: MetricKind, client: &'a ModelClient, templates: &'a Templates) -> Self {
        Self {
            kind,
            judge: Some((client, templates)),
        }
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn score(&self, example: &Example, prediction: &str) -> f64 {
        match self.kind {
            MetricKind::ExactMatch => exact_match(prediction, &example.output),
            MetricKind::MeanPerField => {
                mean_per_field(&parse_fields(prediction), &parse_fields(&example.output))
            }
            MetricKind::EntityF1 => {
                entity_f1(&parse_entities(prediction), &parse_entities(&example.output))
            }
            MetricKind::JudgeRubric => match self.judge {
                Some((client, templates)) => {
                    match super::judge_subscores(client, templates, example, prediction) {
                        Ok(score) => score.total,
                        Err(err) => {
                            tracing::warn!(id = %example.id, %err, "judge scoring failed, scoring 0");
                            0.0
                        }
                    }
                }
                None => {
                    tracing::warn!("judge metric requested without a judge client, scoring 0");
                    0.0
                }
            },
        }
    }
}
