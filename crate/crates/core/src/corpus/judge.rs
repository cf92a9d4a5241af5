//! Rubric judging through the judge model role.

use regex::Regex;
use std::sync::OnceLock;

use super::{judge_rubric, Example, RubricScore};
use crate::modelio::{ChatRequest, ModelClient, ModelError, ModelRole};
use crate::templates::Templates;

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("judge reply could not be parsed after a retry: {0:?}")]
    Unparseable(String),
}

const FORMAT: &str = "correctness: <0|0.5|1>\ncompleteness: <0|0.5|1>\nno_hallucination: <0|0.5|1>\nfocus: <0|0.5|1>";

fn score_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^[\s*\-]*(correctness|completeness|no[ _-]?hallucination|focus)\**\s*[:=]\s*\**\s*([01](?:\.\d+)?|\.5)\b")
            .unwrap()
    })
}

/// Reads the four labeled subscores; `None` unless all four are present and valid.
pub fn parse_judge_reply(reply: &str) -> Option<RubricScore> {
    let mut scores: [Option<f64>; 4] = [None; 4];
    for line in reply.lines() {
        let Some(caps) = score_line().captures(line.trim()) else {
            continue;
        };
        let label = caps[1].to_lowercase();
        let slot = match label.as_str() {
            "correctness" => 0,
            "completeness" => 1,
            "focus" => 3,
            _ => 2,
        };
        let value: f64 = caps[2].parse().ok()?;
        scores[slot].get_or_insert(value);
    }
    let [a, b, c, d] = scores;
    judge_rubric([a?, b?, c?, d?]).ok()
}

/// One judge call, plus one retry with a format reminder when the reply is malformed.
pub fn judge_subscores(
    client: &ModelClient,
    templates: &Templates,
    example: &Example,
    prediction: &str,
) -> Result<RubricScore, JudgeError> {
    let (system, user) = templates.judge.render(&[
        ("input", &example.input),
        ("reference", &example.output),
        ("prediction", prediction),
    ]);
    let first = client.chat(&ChatRequest::new(ModelRole::Judge, &system, &user))?;
    if let Some(score) = parse_judge_reply(&first.text) {
        return Ok(score);
    }
    let retry_user = format!("{user}\n\n{}", templates.reminder(FORMAT));
    let second = client.chat(&ChatRequest::new(ModelRole::Judge, &system, &retry_user))?;
    parse_judge_reply(&second.text).ok_or(JudgeError::Unparseable(second.text))
}
