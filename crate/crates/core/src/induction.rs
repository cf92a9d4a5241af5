//! Local contrastive rule induction.
//!
//! Inside each final cluster, pairs of output groups are contrasted with
//! balanced A/B example sets; the reflection model is asked for a few
//! `IF <condition> THEN <action>` rules per set.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::modelio::{ChatRequest, Exchange, ModelClient, ModelError, ModelRole};
use crate::seeding;
use crate::templates::Templates;

#[derive(Debug, Error)]
pub enum InductionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no IF/THEN rule found in the reply after {attempts} attempts")]
    Unparseable { attempts: u32 },
}

#[derive(Debug, Error, PartialEq)]
pub enum PoolError {
    #[error("duplicate rule id {0}")]
    DuplicateId(String),
    #[error("rule {0} has an empty condition or action")]
    EmptyRule(String),
    #[error("cannot move a {from:?} pool back to {to:?}")]
    Backwards { from: PoolStage, to: PoolStage },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleText {
    pub condition: String,
    pub action: String,
}

impl RuleText {
    pub fn new(condition: impl Into<String>, action: impl Into<String>) -> Self {
        Self {
            condition: condition.into(),
            action: action.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub condition: String,
    pub action: String,
    #[serde(default)]
    pub source_cluster: Option<usize>,
    #[serde(default)]
    pub revision: u32,
    /// Earlier (condition, action) texts, oldest first.
    #[serde(default)]
    pub lineage: Vec<RuleText>,
}

impl Rule {
    pub fn new(id: impl Into<String>, text: RuleText, source_cluster: Option<usize>) -> Self {
        Self {
            id: id.into(),
            condition: text.condition,
            action: text.action,
            source_cluster,
            revision: 0,
            lineage: Vec::new(),
        }
    }

    pub fn text(&self) -> RuleText {
        RuleText::new(&self.condition, &self.action)
    }

    /// `R<k>: IF ... THEN ...` on one line.
    pub fn line(&self) -> String {
        format!("{}: IF {} THEN {}", self.id, fold(&self.condition), fold(&self.action))
    }
}

/// Collapses all whitespace (newlines included) to single spaces.
pub fn fold(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn rule_id(ordinal: usize) -> String {
    format!("R{ordinal}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolStage {
    Raw,
    Compiled,
    Refined,
}

impl PoolStage {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolStage::Raw => "raw",
            PoolStage::Compiled => "compiled",
            PoolStage::Refined => "refined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RulePool {
    pub stage: PoolStage,
    pub rules: Vec<Rule>,
}

impl RulePool {
    pub fn new(rules: Vec<Rule>, stage: PoolStage) -> Result<Self, PoolError> {
        let mut seen = std::collections::HashSet::new();
        for rule in &rules {
            if !seen.insert(rule.id.as_str()) {
                return Err(PoolError::DuplicateId(rule.id.clone()));
            }
            if rule.condition.trim().is_empty() || rule.action.trim().is_empty() {
                return Err(PoolError::EmptyRule(rule.id.clone()));
            }
        }
        Ok(Self { stage, rules })
    }

    /// Moves the pool to a later (or the same) stage.
    pub fn advance(mut self, stage: PoolStage) -> Result<Self, PoolError> {
        if stage < self.stage {
            return Err(PoolError::Backwards {
                from: self.stage,
                to: stage,
            });
        }
        self.stage = stage;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.rules.iter().map(|r| r.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }
}

fn rule_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^\s*(?:[-*•]\s*|\d+[.)]\s*)?(?:\*\*)?(?:R\d+\s*[:.)\-]\s*)?(?:\*\*)?\s*IF\b\s*(.+?)\s*\bTHEN\b\s*(.+?)\s*$",
        )
        .unwrap()
    })
}

/// Extracts `(condition, action)` pairs from lines of the form
/// `[R<k>:] IF <condition> THEN <action>`; other lines are ignored.
pub fn parse_rules(completion: &str) -> Vec<RuleText> {
    completion
        .lines()
        .filter_map(|line| {
            let caps = rule_line().captures(line)?;
            let condition = caps[1].trim_matches(|c: char| c == ',' || c.is_whitespace());
            let action = caps[2].trim_end_matches("**").trim();
            (!condition.is_empty() && !action.is_empty()).then(|| RuleText::new(condition, action))
        })
        .collect()
}

pub(crate) const RULE_FORMAT: &str = "R<k>: IF <condition on the input> THEN <output action or pattern>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastSet {
    pub cluster_id: usize,
    pub group_a: usize,
    pub group_b: usize,
    pub side_a: Vec<Example>,
    pub side_b: Vec<Example>,
}

/// Balanced A/B sets for the group pairs of one cluster.
///
/// Pairs are ordered by descending combined group size (ties by group ids);
/// each side is a seeded sample of at most `per_side_cap` members, and both
/// sides are truncated to the smaller one. Members without a group id are
/// ignored.
pub fn build_contrast_sets(
    cluster_id: usize,
    members: &[Example],
    per_side_cap: usize,
    max_pairs: usize,
    seed: u64,
) -> Vec<ContrastSet> {
    let mut by_group: BTreeMap<usize, Vec<&Example>> = BTreeMap::new();
    for m in members {
        if let Some(g) = m.group_id {
            by_group.entry(g).or_default().push(m);
        }
    }
    let groups: Vec<usize> = by_group.keys().copied().collect();
    let mut pairs = Vec::new();
    for (i, &a) in groups.iter().enumerate() {
        for &b in &groups[i + 1..] {
            pairs.push((a, b, by_group[&a].len() + by_group[&b].len()));
        }
    }
    pairs.sort_by(|x, y| y.2.cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    pairs.truncate(max_pairs);

    pairs
        .into_iter()
        .enumerate()
        .map(|(index, (a, b, _))| {
            let mut rng = seeding::rng(seed, seeding::stream::CONTRAST, (cluster_id as u64) << 32 | index as u64);
            let mut sample = |g: usize| {
                let mut pool: Vec<&Example> = by_group[&g].clone();
                pool.sort_by(|x, y| x.id.cmp(&y.id));
                let mut picked: Vec<Example> = pool
                    .choose_multiple(&mut rng, per_side_cap.min(pool.len()))
                    .map(|e| (*e).clone())
                    .collect();
                picked.sort_by(|x, y| x.id.cmp(&y.id));
                picked
            };
            let mut side_a = sample(a);
            let mut side_b = sample(b);
            let n = side_a.len().min(side_b.len());
            side_a.truncate(n);
            side_b.truncate(n);
            ContrastSet {
                cluster_id,
                group_a: a,
                group_b: b,
                side_a,
                side_b,
            }
        })
        .collect()
}

fn render_side(label: char, side: &[Example]) -> String {
    side.iter()
        .enumerate()
        .map(|(i, e)| format!("[{label}{}]\nInput: {}\nOutput: {}", i + 1, e.input.trim(), e.output.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionTranscript {
    pub cluster_id: usize,
    pub pair_index: usize,
    pub group_a: usize,
    pub group_b: usize,
    pub exchanges: Vec<Exchange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One reflection call per contrast set, with one stricter retry when the
/// reply holds no rule line. At most `rules_per_set` rules are kept.
pub fn induce_rules(
    client: &ModelClient,
    templates: &Templates,
    task_description: &str,
    contrast: &ContrastSet,
    rules_per_set: usize,
    exchanges: &mut Vec<Exchange>,
) -> Result<Vec<RuleText>, InductionError> {
    let max_rules = rules_per_set.to_string();
    let (side_a, side_b) = (render_side('A', &contrast.side_a), render_side('B', &contrast.side_b));
    let (system, user) = templates.induction.render(&[
        ("task_description", task_description.trim()),
        ("side_a", &side_a),
        ("side_b", &side_b),
        ("max_rules", &max_rules),
    ]);
    let prompts = [user.clone(), format!("{user}\n\n{}", templates.reminder(RULE_FORMAT))];
    for prompt in prompts {
        let (result, exchange) = client.chat_logged(&ChatRequest::new(ModelRole::Reflection, &system, prompt));
        exchanges.push(exchange);
        let mut rules = parse_rules(&result?.text);
        if !rules.is_empty() {
            rules.truncate(rules_per_set);
            return Ok(rules);
        }
    }
    Err(InductionError::Unparseable { attempts: 2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductionConfig {
    pub per_side_cap: usize,
    pub rules_per_set: usize,
    pub max_pairs: usize,
}

impl Default for InductionConfig {
    fn default() -> Self {
        Self {
            per_side_cap: 8,
            rules_per_set: 3,
            max_pairs: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InductionOutcome {
    pub pool: RulePool,
    pub contrast_sets: Vec<ContrastSet>,
    pub transcripts: Vec<InductionTranscript>,
}

impl InductionOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &InductionTranscript> {
        self.transcripts.iter().filter(|t| t.error.is_some())
    }
}

/// Induces the raw pool over all clusters. `clusters[c]` holds the members
/// of cluster `c` with group ids set. Sets run concurrently; results merge
/// in (cluster, pair) order and rules are numbered R1, R2, ... in that order.
pub fn induce_pool(
    client: &ModelClient,
    templates: &Templates,
    task_description: &str,
    clusters: &[Vec<Example>],
    config: &InductionConfig,
    seed: u64,
) -> InductionOutcome {
    let mut contrast_sets = Vec::new();
    let mut pair_index = Vec::new();
    for (c, members) in clusters.iter().enumerate() {
        let sets = build_contrast_sets(c, members, config.per_side_cap, config.max_pairs, seed);
        pair_index.extend(0..sets.len());
        contrast_sets.extend(sets);
    }
    let jobs: Vec<(usize, &ContrastSet)> = pair_index.into_iter().zip(contrast_sets.iter()).collect();
    let results = client.map_bounded(&jobs, |(pair, set)| {
        let mut exchanges = Vec::new();
        let result = induce_rules(client, templates, task_description, set, config.rules_per_set, &mut exchanges);
        (*pair, result, exchanges)
    });

    let mut rules = Vec::new();
    let mut transcripts = Vec::with_capacity(results.len());
    for ((pair, result, exchanges), set) in results.into_iter().zip(&contrast_sets) {
        let error = match result {
            Ok(texts) => {
                for text in texts {
                    rules.push(Rule::new(rule_id(rules.len() + 1), text, Some(set.cluster_id)));
                }
                None
            }
            Err(err) => {
                tracing::warn!(cluster = set.cluster_id, pair, %err, "rule induction failed for contrast set");
                Some(err.to_string())
            }
        };
        transcripts.push(InductionTranscript {
            cluster_id: set.cluster_id,
            pair_index: pair,
            group_a: set.group_a,
            group_b: set.group_b,
            exchanges,
            error,
        });
    }
    let pool = RulePool::new(rules, PoolStage::Raw).expect("sequential ids and parsed non-empty texts");
    InductionOutcome {
        pool,
        contrast_sets,
        transcripts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelio::FnBackend;
    use std::sync::Arc;

    fn member(id: &str, group: usize) -> Example {
        let mut e = Example::new(id, format!("input {id}"), format!("output {group}"));
        e.group_id = Some(group);
        e
    }

    fn members(sizes: &[usize]) -> Vec<Example> {
        let mut out = Vec::new();
        for (g, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                out.push(member(&format!("g{g}-{i}"), g));
            }
        }
        out
    }

    #[test]
    fn balance_truncation() {
        let sets = build_contrast_sets(0, &members(&[4, 3]), 8, 3, 1);
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].side_a.len(), 3);
        assert_eq!(sets[0].side_b.len(), 3);
        assert!(sets[0].side_a.iter().all(|e| e.group_id == Some(0)));
    }

    #[test]
    fn single_group_yields_nothing() {
        assert!(build_contrast_sets(0, &members(&[5]), 8, 3, 1).is_empty());
    }

    #[test]
    fn pairs_by_combined_frequency() {
        let sets = build_contrast_sets(2, &members(&[5, 4, 1]), 8, 2, 1);
        let pairs: Vec<_> = sets.iter().map(|s| (s.group_a, s.group_b)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2)]);
        assert!(sets.iter().all(|s| s.cluster_id == 2));
    }

    #[test]
    fn cap_limits_each_side() {
        let sets = build_contrast_sets(0, &members(&[20, 12]), 8, 1, 1);
        assert_eq!(sets[0].side_a.len(), 8);
        assert_eq!(sets[0].side_b.len(), 8);
        assert_eq!(sets, build_contrast_sets(0, &members(&[20, 12]), 8, 1, 1));
    }

    #[test]
    fn parse_examples() {
        let rules = parse_rules("R1: IF the request mentions delayed delivery THEN output group-3 description");
        assert_eq!(rules, vec![RuleText::new("the request mentions delayed delivery", "output group-3 description")]);
        assert_eq!(parse_rules("if X then Y"), vec![RuleText::new("X", "Y")]);
        assert!(parse_rules("THEN before IF").is_empty());
        let prose = "Here is what I found.\nSome discussion.\n- **R2.** IF a, THEN b\nThanks!";
        assert_eq!(parse_rules(prose), vec![RuleText::new("a", "b")]);
        assert!(parse_rules("IF THEN x").is_empty());
    }

    #[test]
    fn pool_invariants() {
        let r = |id: &str| Rule::new(id, RuleText::new("c", "a"), None);
        assert_eq!(
            RulePool::new(vec![r("R1"), r("R1")], PoolStage::Raw),
            Err(PoolError::DuplicateId("R1".into()))
        );
        let pool = RulePool::new(vec![r("R1")], PoolStage::Compiled).unwrap();
        assert!(pool.clone().advance(PoolStage::Raw).is_err());
        assert_eq!(pool.advance(PoolStage::Refined).unwrap().stage, PoolStage::Refined);
    }

    fn contrast() -> ContrastSet {
        build_contrast_sets(4, &members(&[2, 2]), 8, 1, 0).remove(0)
    }

    #[test]
    fn induce_parses_scripted_rules() {
        let client = ModelClient::uniform(Arc::new(FnBackend::new(|_req: &ChatRequest| {
            "R1: IF a THEN b\nR2: IF c THEN d".to_string()
        })));
        let mut log = Vec::new();
        let rules = induce_rules(&client, &Templates::default(), "task", &contrast(), 3, &mut log).unwrap();
        assert_eq!(rules.len(), 2);
        assert_eq!(rules[1], RuleText::new("c", "d"));
        assert_eq!(log.len(), 1);
        assert!(log[0].user.contains("[A1]"));
    }

    #[test]
    fn induce_retries_then_fails() {
        let client = ModelClient::uniform(Arc::new(FnBackend::new(|_req: &ChatRequest| "no rules here".to_string())));
        let mut log = Vec::new();
        let err = induce_rules(&client, &Templates::default(), "task", &contrast(), 3, &mut log).unwrap_err();
        assert!(matches!(err, InductionError::Unparseable { attempts: 2 }));
        assert_eq!(log.len(), 2);
        assert!(log[1].user.contains("could not be parsed"));
    }

    #[test]
    fn pool_continues_past_failed_sets() {
        // cluster 0 gets prose, cluster 1 gets a rule
        let client = ModelClient::uniform(Arc::new(FnBackend::new(|req: &ChatRequest| {
            if req.user.contains("input c1") {
                "IF x THEN y".to_string()
            } else {
                "sorry".to_string()
            }
        })));
        let mk = |prefix: &str| {
            (0..4)
                .map(|i| {
                    let mut e = member(&format!("{prefix}{i}"), i % 2);
                    e.input = format!("input {prefix}{i}");
                    e
                })
                .collect::<Vec<_>>()
        };
        let outcome = induce_pool(
            &client,
            &Templates::default(),
            "task",
            &[mk("c0-"), mk("c1-")],
            &InductionConfig::default(),
            0,
        );
        assert_eq!(outcome.pool.len(), 1);
        assert_eq!(outcome.pool.rules[0].id, "R1");
        assert_eq!(outcome.pool.rules[0].source_cluster, Some(1));
        assert_eq!(outcome.failures().count(), 1);
    }
}
