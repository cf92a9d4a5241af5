//! Human-readable views of run artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use super::{HarnessError, RunReport};
use crate::clustering::ClusterReportLine;
use crate::induction::RulePool;
use crate::modelio::{ModelRole, Phase};
use crate::refinery::StepRecord;

const METHODS: [&str; 3] = ["air", "initial", "knn"];

fn read(path: &Path) -> Result<String, HarnessError> {
    if !path.is_file() {
        return Err(HarnessError::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn bad(path: &Path, e: impl ToString) -> HarnessError {
    HarnessError::BadArtifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    serde_json::from_str(&read(path)?).map_err(|e| bad(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    read(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| bad(path, e)))
        .collect()
}

/// An AIR run directory: `dir` itself or its `air/` child.
fn air_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("air");
    if !dir.join("rules_raw.json").exists() && nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn write_pool(out: &mut String, pool: &RulePool) {
    let _ = writeln!(out, "== rules ({}, {} rules) ==", pool.stage.as_str(), pool.len());
    for rule in &pool.rules {
        let origin = rule.source_cluster.map(|c| format!(", cluster {c}")).unwrap_or_default();
        let _ = writeln!(out, "{} [revision {}{origin}]: IF {} THEN {}", rule.id, rule.revision, rule.condition, rule.action);
        for (n, old) in rule.lineage.iter().enumerate() {
            let _ = writeln!(out, "    revision {n}: IF {} THEN {}", old.condition, old.action);
        }
    }
    out.push('\n');
}

/// Cluster report, rule pools per stage with lineage, step log and final prompt.
pub fn inspect(dir: &Path) -> Result<String, HarnessError> {
    let dir = air_dir(dir);
    let clusters: Vec<ClusterReportLine> = read_jsonl(&dir.join("clusters.jsonl"))?;
    let pools: Vec<RulePool> = ["rules_raw.json", "rules_compiled.json", "rules_refined.json"]
        .iter()
        .map(|name| read_json(&dir.join(name)))
        .collect::<Result<_, _>>()?;
    let steps: Vec<StepRecord> = read_jsonl(&dir.join("steps.jsonl"))?;
    let prompt = read(&dir.join("prompt_plain.txt"))?;

    let mut out = String::new();
    let _ = writeln!(out, "== clusters ==");
    for c in &clusters {
        let mse = c.mse_final.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into());
        let mut flags = String::new();
        if c.dissolved {
            flags.push_str(" dissolved");
        }
        if c.repair_warning {
            flags.push_str(" single-class");
        }
        let _ = writeln!(
            out,
            "cluster {}: {} members, groups {:?}, mse {mse}, moved in {} / out {}{flags}",
            c.cluster,
            c.members.len(),
            c.histogram,
            c.moved_in,
            c.moved_out
        );
    }
    out.push('\n');
    for pool in &pools {
        write_pool(&mut out, pool);
    }
    let _ = writeln!(out, "== refinement steps ==");
    let _ = writeln!(out, "{:>4} {:>9} {:>9} {:>8} {:>9} {:>5}", "step", "incumbent", "candidate", "accepted", "revisions", "stall");
    for s in &steps {
        let cand = s.candidate_score.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:>4} {:>9.4} {:>9} {:>8} {:>9} {:>5}",
            s.step,
            s.incumbent_score,
            cand,
            if s.accepted { "yes" } else { "no" },
            format!("{}/{}", s.revisions_accepted, s.revisions_attempted),
            s.stall
        );
    }
    out.push('\n');
    let _ = writeln!(out, "== final prompt ==");
    out.push_str(&prompt);
    Ok(out)
}

/// Score and token table for one run directory or every run under a root.
pub fn report(dir: &Path) -> Result<String, HarnessError> {
    let direct = dir.join("report.json");
    let paths: Vec<PathBuf> = if direct.is_file() {
        vec![direct.clone()]
    } else {
        METHODS
            .iter()
            .map(|m| dir.join(m).join("report.json"))
            .filter(|p| p.is_file())
            .collect()
    };
    if paths.is_empty() {
        return Err(HarnessError::MissingArtifact(direct));
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:<15} {:>7} {:>5} {:>12} {:>12} {:>12} {:>12}",
        "method", "metric", "score", "n", "train in", "train out", "infer in", "infer out"
    );
    let mut reports = Vec::new();
    for path in &paths {
        let r: RunReport = read_json(path)?;
        let phase = |p: Phase| {
            ModelRole::ALL.iter().fold((0u64, 0u64), |acc, &role| {
                let t = r.usage.get(p, role);
                (acc.0 + t.input_tokens, acc.1 + t.output_tokens)
            })
        };
        let (ti, to) = phase(Phase::Train);
        let (ii, io) = phase(Phase::Inference);
        let _ = writeln!(
            out,
            "{:<8} {:<15} {:>7.2} {:>5} {:>12} {:>12} {:>12} {:>12}",
            r.method,
            r.metric_kind.as_str(),
            r.metric,
            r.test_examples,
            ti,
            to,
            ii,
            io
        );
        reports.push(r);
    }
    if let [only] = reports.as_slice() {
        out.push('\n');
        out.push_str(&only.usage.to_string());
    }
    Ok(out)
}
