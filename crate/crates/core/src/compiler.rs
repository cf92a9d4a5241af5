//! Rule aggregation and system prompt rendering.
//!
//! The raw pool is compiled by a single reflection call into a smaller,
//! non-overlapping rule set. Two prompts are rendered from it: a plain one for
//! inference and a traced one that also asks for the applied rule ids.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::induction::{fold, parse_rules, rule_id, PoolStage, Rule, RulePool, RULE_FORMAT};
use crate::modelio::{ChatRequest, Exchange, ModelClient, ModelRole};
use crate::templates::Templates;

#[derive(Debug, Error, PartialEq)]
pub enum CompileError {
    #[error("rule pool is empty")]
    EmptyPool,
    #[error("expected a raw pool, got {0:?}")]
    WrongStage(PoolStage),
}

const CLOSING: &str = "Apply the rules whose IF conditions match the input and follow their THEN actions.";
const PLAIN_FORMAT: &str = "Answer with the final output only.";
pub const RULES_DIRECTIVE: &str = "RULES: <comma-separated ids>";
pub const ANSWER_DIRECTIVE: &str = "ANSWER: <prediction>";

fn render(task_description: &str, rules: &[Rule], format_block: &str) -> Result<String, CompileError> {
    if rules.is_empty() {
        return Err(CompileError::EmptyPool);
    }
    let mut out = String::new();
    out.push_str(task_description.trim());
    out.push_str("\n\nRules:\n");
    for rule in rules {
        out.push_str(&format!("{}. IF {} THEN {}\n", rule.id, fold(&rule.condition), fold(&rule.action)));
    }
    out.push('\n');
    out.push_str(CLOSING);
    out.push('\n');
    out.push_str(format_block);
    out.push('\n');
    Ok(out)
}

fn traced_format() -> String {
    format!(
        "Reply with exactly two lines. First list the ids of the rules you applied (write none if no rule applied), then give the final output:\n{RULES_DIRECTIVE}\n{ANSWER_DIRECTIVE}"
    )
}

pub fn assemble_prompt(task_description: &str, rules: &[Rule]) -> Result<String, CompileError> {
    render(task_description, rules, PLAIN_FORMAT)
}

pub fn assemble_traced_prompt(task_description: &str, rules: &[Rule]) -> Result<String, CompileError> {
    render(task_description, rules, &traced_format())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledPrompt {
    pub task_description: String,
    pub rules: Vec<Rule>,
    pub plain_text: String,
    pub traced_text: String,
}

impl CompiledPrompt {
    pub fn new(task_description: &str, rules: Vec<Rule>) -> Result<Self, CompileError> {
        Ok(Self {
            task_description: task_description.to_string(),
            plain_text: assemble_prompt(task_description, &rules)?,
            traced_text: assemble_traced_prompt(task_description, &rules)?,
            rules,
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.rules.iter().map(|r| r.id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracedReply {
    pub prediction: String,
    pub applied_rule_ids: Vec<String>,
    /// No `ANSWER:` line; the whole completion was taken as the prediction.
    #[serde(default)]
    pub malformed: bool,
    /// Cited ids that are not in the active rule set.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_ids: Vec<String>,
}

fn directive(name: &str) -> Regex {
    Regex::new(&format!(r"(?i)^\s*(?:\*\*)?{name}(?:\*\*)?\s*:\s*(?:\*\*)?\s*")).unwrap()
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| directive("answer"))
}

fn rules_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| directive("(?:applied[ _]rules|rules)"))
}

fn clean_id(token: &str) -> Option<String> {
    let t = token.trim_matches(|c: char| !c.is_ascii_alphanumeric());
    if t.is_empty() || t.eq_ignore_ascii_case("none") {
        return None;
    }
    match t.strip_prefix(['r', 'R']) {
        Some(digits) if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) => Some(format!("R{digits}")),
        _ => Some(t.to_string()),
    }
}

/// Reads the `RULES:` and `ANSWER:` lines of a traced completion. The answer
/// is everything after `ANSWER:`, including any further lines.
pub fn parse_traced_reply(completion: &str, active_ids: &[String]) -> TracedReply {
    let lines: Vec<&str> = completion.lines().collect();
    let answer_at = lines.iter().position(|l| answer_re().is_match(l));
    let before = answer_at.unwrap_or(lines.len());

    let mut applied = Vec::new();
    let mut dropped = Vec::new();
    if let Some(line) = lines[..before].iter().rev().find(|l| rules_re().is_match(l)) {
        let rest = rules_re().replace(line, "");
        for id in rest.split(|c: char| c == ',' || c == ';' || c.is_whitespace()).filter_map(clean_id) {
            if !active_ids.contains(&id) {
                if !dropped.contains(&id) {
                    dropped.push(id);
                }
            } else if !applied.contains(&id) {
                applied.push(id);
            }
        }
    }
    if !dropped.is_empty() {
        tracing::warn!(ids = ?dropped, "traced reply cites unknown rule ids");
    }

    let (prediction, malformed) = match answer_at {
        Some(i) => {
            let mut text = answer_re().replace(lines[i], "").into_owned();
            for l in &lines[i + 1..] {
                text.push('\n');
                text.push_str(l);
            }
            (text.trim().to_string(), false)
        }
        None => (completion.trim().to_string(), true),
    };
    TracedReply {
        prediction,
        applied_rule_ids: applied,
        malformed,
        dropped_ids: dropped,
    }
}

/// The canonical traced completion for `reply`.
pub fn render_traced_reply(reply: &TracedReply) -> String {
    let ids = if reply.applied_rule_ids.is_empty() {
        "none".to_string()
    } else {
        reply.applied_rule_ids.join(", ")
    };
    format!("RULES: {ids}\nANSWER: {}", reply.prediction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileOutcome {
    pub pool: RulePool,
    /// The raw pool was passed through because no completion parsed.
    pub fallback: bool,
    /// The compiled pool came back larger than the raw one.
    pub grew: bool,
    pub exchanges: Vec<Exchange>,
}

/// Aggregates a raw pool with one reflection call (plus one retry when the
/// reply holds no rule). Compiled rules are renumbered R1..Rn.
pub fn compile_rules(
    client: &ModelClient,
    templates: &Templates,
    task_description: &str,
    pool: &RulePool,
) -> Result<CompileOutcome, CompileError> {
    if pool.stage != PoolStage::Raw {
        return Err(CompileError::WrongStage(pool.stage));
    }
    if pool.is_empty() {
        return Err(CompileError::EmptyPool);
    }
    let listing = pool.rules.iter().map(Rule::line).collect::<Vec<_>>().join("\n");
    let count = pool.len().to_string();
    let (system, user) = templates.compiler.render(&[
        ("task_description", task_description.trim()),
        ("rule_count", &count),
        ("rules", &listing),
    ]);
    let mut exchanges = Vec::new();
    let prompts = [user.clone(), format!("{user}\n\n{}", templates.reminder(RULE_FORMAT))];
    for prompt in prompts {
        let (result, exchange) = client.chat_logged(&ChatRequest::new(ModelRole::Reflection, &system, prompt));
        exchanges.push(exchange);
        let texts = match result {
            Ok(out) => parse_rules(&out.text),
            Err(err) => {
                tracing::warn!(%err, "compiler call failed");
                continue;
            }
        };
        if texts.is_empty() {
            continue;
        }
        let grew = texts.len() > pool.len();
        if grew {
            tracing::warn!(raw = pool.len(), compiled = texts.len(), "compiled pool is larger than the raw pool");
        }
        let rules = texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| Rule::new(rule_id(i + 1), text, None))
            .collect();
        let pool = RulePool::new(rules, PoolStage::Compiled).expect("fresh sequential ids");
        return Ok(CompileOutcome {
            pool,
            fallback: false,
            grew,
            exchanges,
        });
    }
    tracing::warn!("compiler reply unparseable twice; keeping the raw pool");
    let pool = pool.clone().advance(PoolStage::Compiled).expect("raw precedes compiled");
    Ok(CompileOutcome {
        pool,
        fallback: true,
        grew: false,
        exchanges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::induction::RuleText;
    use crate::modelio::FnBackend;
    use std::sync::Arc;

    fn rules(n: usize) -> Vec<Rule> {
        (1..=n)
            .map(|i| Rule::new(rule_id(i), RuleText::new(format!("cond {i}"), format!("act {i}")), None))
            .collect()
    }

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn plain_layout() {
        let text = assemble_prompt("Route tickets.", &rules(2)).unwrap();
        let rule_lines: Vec<&str> = text.lines().filter(|l| l.starts_with('R') && l.contains(". IF ")).collect();
        assert_eq!(rule_lines, vec!["R1. IF cond 1 THEN act 1", "R2. IF cond 2 THEN act 2"]);
        assert!(text.starts_with("Route tickets.\n\nRules:\n"));
        assert!(text.trim_end().ends_with(PLAIN_FORMAT));
        assert_eq!(text, assemble_prompt("Route tickets.", &rules(2)).unwrap());
    }

    #[test]
    fn newlines_are_folded() {
        let r = vec![Rule::new("R1", RuleText::new("a\nb", "c\n  d"), None)];
        let text = assemble_prompt("t", &r).unwrap();
        assert!(text.contains("R1. IF a b THEN c d\n"));
    }

    #[test]
    fn traced_differs_only_in_format_block() {
        let plain = assemble_prompt("t", &rules(3)).unwrap();
        let traced = assemble_traced_prompt("t", &rules(3)).unwrap();
        assert!(traced.contains(RULES_DIRECTIVE) && traced.contains(ANSWER_DIRECTIVE));
        let head = plain.strip_suffix(&format!("{PLAIN_FORMAT}\n")).unwrap();
        assert!(traced.starts_with(head));
        assert!(!plain.contains("ANSWER:"));
    }

    #[test]
    fn empty_rules_rejected() {
        assert_eq!(assemble_prompt("t", &[]), Err(CompileError::EmptyPool));
        assert_eq!(assemble_traced_prompt("t", &[]), Err(CompileError::EmptyPool));
    }

    #[test]
    fn traced_parse_examples() {
        let active = ids(&["R1", "R2", "R3"]);
        let r = parse_traced_reply("RULES: R1,R3\nANSWER: refund", &active);
        assert_eq!((r.prediction.as_str(), r.applied_rule_ids.clone()), ("refund", ids(&["R1", "R3"])));
        let r = parse_traced_reply("ANSWER: 2,1,4,3", &active);
        assert_eq!(r.prediction, "2,1,4,3");
        assert!(r.applied_rule_ids.is_empty() && !r.malformed);
        let r = parse_traced_reply("RULES: R9\nANSWER: x", &ids(&["R1"]));
        assert_eq!(r.prediction, "x");
        assert!(r.applied_rule_ids.is_empty());
        assert_eq!(r.dropped_ids, ids(&["R9"]));
        let r = parse_traced_reply("just text", &active);
        assert!(r.malformed);
        assert_eq!(r.prediction, "just text");
        let r = parse_traced_reply("rules: none\nanswer: name: Bo\nage: 3", &active);
        assert_eq!(r.prediction, "name: Bo\nage: 3");
    }

    fn raw_pool(n: usize) -> RulePool {
        RulePool::new(rules(n), PoolStage::Raw).unwrap()
    }

    #[test]
    fn compile_collapses_duplicates() {
        let client = ModelClient::uniform(Arc::new(FnBackend::new(|_req: &ChatRequest| {
            "R4: IF billing THEN billing\nR9: IF shipping THEN shipping".to_string()
        })));
        let out = compile_rules(&client, &Templates::default(), "t", &raw_pool(6)).unwrap();
        assert_eq!(out.pool.ids(), ids(&["R1", "R2"]));
        assert_eq!(out.pool.stage, PoolStage::Compiled);
        assert!(!out.fallback && !out.grew);
        assert!(out.exchanges[0].user.contains("Raw rules (6):"));
    }

    #[test]
    fn compile_falls_back_on_prose() {
        let client = ModelClient::uniform(Arc::new(FnBackend::new(|_req: &ChatRequest| "I merged them.".to_string())));
        let raw = raw_pool(3);
        let out = compile_rules(&client, &Templates::default(), "t", &raw).unwrap();
        assert!(out.fallback);
        assert_eq!(out.pool.rules, raw.rules);
        assert_eq!(out.exchanges.len(), 2);
    }

    #[test]
    fn compile_flags_growth() {
        let client = ModelClient::uniform(Arc::new(FnBackend::new(|_req: &ChatRequest| {
            "IF a THEN b\nIF c THEN d".to_string()
        })));
        let out = compile_rules(&client, &Templates::default(), "t", &raw_pool(1)).unwrap();
        assert!(out.grew);
        assert_eq!(out.pool.len(), 2);
    }

    #[test]
    fn compile_requires_raw_nonempty() {
        let client = ModelClient::uniform(Arc::new(FnBackend::new(|_req: &ChatRequest| String::new())));
        let compiled = raw_pool(1).advance(PoolStage::Compiled).unwrap();
        assert_eq!(
            compile_rules(&client, &Templates::default(), "t", &compiled).unwrap_err(),
            CompileError::WrongStage(PoolStage::Compiled)
        );
        let empty = RulePool::new(vec![], PoolStage::Raw).unwrap();
        assert_eq!(compile_rules(&client, &Templates::default(), "t", &empty).unwrap_err(), CompileError::EmptyPool);
    }
}
