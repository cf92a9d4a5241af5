//! Shared fixtures: a 24-example ticket-routing task whose labels follow two
//! keyword rules, plus a scripted backend that plays every model role.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use regex::Regex;

use air_core::modelio::{
    Backend, BackendError, ChatRequest, Completion, EmbeddingBatch, FnBackend, MockEmbedder, ModelClient, ModelRole,
    TokenCount,
};

pub const TASK: &str = "Route each customer ticket to the team that should handle it. Answer with the team name.";
pub const SHIPPING_RULE: &str = "R1: IF the input contains \"package\" THEN answer \"shipping\"";
pub const BILLING_RULE: &str = "R2: IF the input contains \"invoice\" THEN answer \"billing\"";
pub const INITIAL_REPLY: &str = "I cannot tell.";

const CITIES: [&str; 6] = ["Oslo", "Lyon", "Porto", "Graz", "Kyoto", "Quito"];

/// `(text, label)` rows: 12 shipping tickets mention a package, 12 billing
/// tickets mention an invoice.
pub fn ticket_rows() -> Vec<(String, String)> {
    let mut rows = Vec::new();
    for i in 0..12 {
        let city = CITIES[i % CITIES.len()];
        let text = match i % 3 {
            0 => format!("My package for order {} is late", 100 + i),
            1 => format!("The package for order {} never arrived in {city}", 500 + i),
            _ => format!("Tracking shows my package stuck near {city} since week {i}"),
        };
        rows.push((text, "shipping".to_string()));
        let text = match i % 3 {
            0 => format!("The invoice for order {} lists the wrong amount", 200 + i),
            1 => format!("I was charged twice on invoice {} from {city}", 300 + i),
            _ => format!("Please resend invoice {} to our {city} office", 400 + i),
        };
        rows.push((text, "billing".to_string()));
    }
    rows
}

fn cached(slot: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    slot.get_or_init(|| Regex::new(pattern).unwrap())
}

fn quoted(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = cached(&RE, r#""([^"]+)""#);
    re.captures_iter(text).map(|c| c[1].to_string()).collect()
}

pub struct PromptRule {
    pub id: String,
    /// Any of these fires the rule...
    pub keywords: Vec<String>,
    /// ...unless one of these is present (quoted words after "unless").
    pub exclusions: Vec<String>,
    pub answer: String,
}

/// Rule lines `R<k>. IF ... THEN ...` of a rendered system prompt.
pub fn prompt_rules(system: &str) -> Vec<PromptRule> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = cached(&RE, r"^(R\d+)\. IF (.*) THEN (.*)$");
    system
        .lines()
        .filter_map(|l| {
            let c = re.captures(l)?;
            let answer = quoted(&c[3]).pop()?;
            let (when, unless) = c[2].split_once(" unless ").unwrap_or((&c[2], ""));
            Some(PromptRule {
                id: c[1].to_string(),
                keywords: quoted(when),
                exclusions: quoted(unless),
                answer,
            })
        })
        .collect()
}

/// Follows the prompt's keyword rules like a literal-minded base model.
pub fn apply_rules(system: &str, input: &str) -> (Option<String>, String) {
    let lower = input.to_lowercase();
    let has = |words: &[String]| words.iter().any(|k| lower.contains(&k.to_lowercase()));
    for rule in prompt_rules(system) {
        if has(&rule.keywords) && !has(&rule.exclusions) {
            return (Some(rule.id), rule.answer);
        }
    }
    (None, "unknown".to_string())
}

pub fn base_reply(req: &ChatRequest) -> String {
    if req.system.contains("\nRules:\n") {
        let (id, answer) = apply_rules(&req.system, &req.user);
        if req.system.contains("ANSWER: <prediction>") {
            return format!("RULES: {}\nANSWER: {answer}", id.as_deref().unwrap_or("none"));
        }
        return answer;
    }
    if req.system.contains("\n\nExamples:") {
        // copies the demonstration closest to the query
        return req
            .system
            .lines()
            .filter_map(|l| l.strip_prefix("Output: "))
            .next_back()
            .unwrap_or("unknown")
            .to_string();
    }
    INITIAL_REPLY.to_string()
}

fn section_outputs(user: &str, start: &str, end: &str) -> Vec<String> {
    let Some(from) = user.find(start) else { return Vec::new() };
    let rest = &user[from + start.len()..];
    let rest = rest.find(end).map_or(rest, |to| &rest[..to]);
    rest.lines().filter_map(|l| l.strip_prefix("Output: ")).map(str::to_string).collect()
}

/// Emits the two planted rules only when side A and side B are pure and
/// carry different labels among {shipping, billing}.
pub fn induction_reply(user: &str) -> String {
    let a = section_outputs(user, "Group A:\n", "Group B:");
    let b = section_outputs(user, "Group B:\n", "Infer at most");
    let pure = |side: &[String]| {
        let first = side.first()?;
        side.iter().all(|o| o == first).then(|| first.clone())
    };
    match (pure(&a), pure(&b)) {
        (Some(x), Some(y)) if x != y && [&x, &y].iter().all(|l| *l == "shipping" || *l == "billing") => {
            format!("Here are the rules.\n{SHIPPING_RULE}\n{BILLING_RULE}")
        }
        _ => "No clear pattern separates these groups.".to_string(),
    }
}

/// Deduplicates the raw rule lines listed in the compiler prompt.
pub fn compiler_reply(user: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = cached(&RE, r"^R\d+: IF (.*) THEN (.*)$");
    let mut seen: Vec<(String, String)> = Vec::new();
    for l in user.lines() {
        if let Some(c) = re.captures(l) {
            let pair = (c[1].to_string(), c[2].to_string());
            if !seen.contains(&pair) {
                seen.push(pair);
            }
        }
    }
    seen.iter()
        .enumerate()
        .map(|(i, (c, a))| format!("R{}: IF {c} THEN {a}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The `IF ... THEN ...` line under "Current rule:" in a revision prompt.
pub fn current_rule(user: &str) -> String {
    user.split("Current rule:\n").nth(1).and_then(|r| r.lines().next()).unwrap_or_default().to_string()
}

pub fn reflection_reply(user: &str) -> String {
    if user.contains("Group A:") {
        induction_reply(user)
    } else if user.contains("Raw rules (") {
        compiler_reply(user)
    } else if user.contains("Current rule:") {
        current_rule(user)
    } else {
        "?".to_string()
    }
}

pub fn ticket_reply(req: &ChatRequest) -> String {
    match req.role {
        ModelRole::Reflection => reflection_reply(&req.user),
        _ => base_reply(req),
    }
}

pub fn ticket_client() -> ModelClient {
    ModelClient::uniform(Arc::new(FnBackend::new(ticket_reply)))
}

/// Records every usage the wrapped backend reports, independent of the client's ledger.
pub struct Tally<B> {
    pub inner: B,
    pub calls: Mutex<Vec<(ModelRole, TokenCount)>>,
    pub embedded: Mutex<Vec<String>>,
}

impl<B> Tally<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: Mutex::new(Vec::new()),
            embedded: Mutex::new(Vec::new()),
        }
    }

    pub fn totals(&self, role: ModelRole) -> TokenCount {
        let calls = self.calls.lock().unwrap();
        calls.iter().filter(|(r, _)| *r == role).fold(TokenCount::default(), |acc, (_, t)| TokenCount {
            input_tokens: acc.input_tokens + t.input_tokens,
            output_tokens: acc.output_tokens + t.output_tokens,
        })
    }
}

impl<B: Backend> Backend for Tally<B> {
    fn chat(&self, model: &str, request: &ChatRequest) -> Result<Completion, BackendError> {
        let out = self.inner.chat(model, request)?;
        self.calls.lock().unwrap().push((request.role, out.tokens));
        Ok(out)
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<EmbeddingBatch, BackendError> {
        let out = self.inner.embed(model, texts)?;
        self.embedded.lock().unwrap().extend(texts.iter().cloned());
        self.calls.lock().unwrap().push((
            ModelRole::Embed,
            TokenCount {
                input_tokens: out.input_tokens,
                output_tokens: 0,
            },
        ));
        Ok(out)
    }
}

pub fn tallied_ticket_client() -> (ModelClient, Arc<Tally<FnBackend>>) {
    let tally = Arc::new(Tally::new(FnBackend::new(ticket_reply).with_embedder(MockEmbedder::default())));
    (ModelClient::uniform(tally.clone()), tally)
}

pub fn write_csv(path: &Path, rows: &[(String, String)]) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["text", "label"]).unwrap();
    for (t, l) in rows {
        w.write_record([t, l]).unwrap();
    }
    w.flush().unwrap();
}

/// Writes the ticket task (data, empty mock script, config) into `dir`.
/// `extra` is appended to the config file.
pub fn write_ticket_task(dir: &Path, extra: &str) -> PathBuf {
    write_csv(&dir.join("tickets.csv"), &ticket_rows());
    std::fs::write(dir.join("mock.toml"), "").unwrap();
    let config = format!(
        r#"task_description = "{TASK}"
metric = "exact_match"
seed = 11

[data]
path = "tickets.csv"
input_columns = ["text"]
output_columns = ["label"]

[split]
train = 16
test = 8

[models]
backend = "mock"
mock_script = "mock.toml"
concurrency = 3

[cluster]
k = 3

[paths]
artifacts = "runs"
{extra}"#
    );
    let path = dir.join("air.toml");
    std::fs::write(&path, config).unwrap();
    path
}
