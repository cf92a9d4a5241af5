//! Dataset ingestion, canonical input/output columns, splits and task metrics.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding;

mod judge;
mod metrics;

pub use judge::{judge_subscores, parse_judge_reply, JudgeError};
pub use metrics::{
    entity_f1, exact_match, judge_rubric, mean_per_field, normalize, parse_entities,
    parse_fields, RubricScore, Scorer,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("record {index}: missing column {column:?}")]
    MissingColumn { index: usize, column: String },
    #[error("record {index}: empty {side} text")]
    EmptyText { index: usize, side: &'static str },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("dataset is empty")]
    Empty,
    #[error("split counts {train}+{dev}+{test} do not sum to dataset size {size}")]
    CountMismatch {
        train: usize,
        dev: usize,
        test: usize,
        size: usize,
    },
    #[error("embedding dimensionality mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rubric subscore {0} is not one of 0, 0.5, 1")]
    InvalidSubscore(f64),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("unsupported dataset format {0:?} (expected .csv or .jsonl)")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// One supervised case in canonical form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<usize>,
}

impl Example {
    pub fn new(id: impl Into<String>, input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            input: input.into(),
            output: output.into(),
            input_embedding: None,
            output_embedding: None,
            group_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ExactMatch,
    MeanPerField,
    EntityF1,
    JudgeRubric,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::ExactMatch => "exact_match",
            MetricKind::MeanPerField => "mean_per_field",
            MetricKind::EntityF1 => "entity_f1",
            MetricKind::JudgeRubric => "judge_rubric",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub task_description: String,
    pub metric_kind: MetricKind,
}

impl Dataset {
    /// Validates id uniqueness, non-empty texts, and uniform embedding width.
    pub fn new(
        examples: Vec<Example>,
        task_description: impl Into<String>,
        metric_kind: MetricKind,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(CorpusError::Empty);
        }
        let dataset = Self {
            examples,
            task_description: task_description.into(),
            metric_kind,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut input_dim = None;
        let mut output_dim = None;
        for (index, example) in self.examples.iter().enumerate() {
            if !seen.insert(example.id.as_str()) {
                return Err(CorpusError::DuplicateId(example.id.clone()));
            }
            if example.input.trim().is_empty() {
                return Err(CorpusError::EmptyText { index, side: "input" });
            }
            if example.output.trim().is_empty() {
                return Err(CorpusError::EmptyText { index, side: "output" });
            }
            check_dim(&mut input_dim, example.input_embedding.as_deref())?;
            check_dim(&mut output_dim, example.output_embedding.as_deref())?;
        }
        Ok(())
    }

    /// A subset sharing task description and metric; may be empty.
    fn subset(&self, examples: Vec<Example>) -> Self {
        Self {
            examples,
            task_description: self.task_description.clone(),
            metric_kind: self.metric_kind,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.id.as_str()).collect()
    }
}

fn check_dim(expected: &mut Option<usize>, vector: Option<&[f64]>) -> Result<()> {
    if let Some(v) = vector {
        match *expected {
            None => *expected = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(CorpusError::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// How declared output columns are rendered into the canonical output text.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    /// Column values joined with the output joiner.
    #[default]
    Joined,
    /// `column: value` lines joined with the output joiner (for per-field metrics).
    Labeled,
}

fn default_joiner() -> String {
    "\n".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub input_columns: Vec<String>,
    pub output_columns: Vec<String>,
    #[serde(default = "default_joiner")]
    pub input_joiner: String,
    #[serde(default = "default_joiner")]
    pub output_joiner: String,
    #[serde(default)]
    pub output_format: OutputFormat,
    /// Column holding a stable id; ordinals are assigned when absent.
    #[serde(default)]
    pub id_column: Option<String>,
}

impl ColumnMap {
    pub fn new(input_columns: &[&str], output_columns: &[&str]) -> Self {
        Self {
            input_columns: input_columns.iter().map(|s| s.to_string()).collect(),
            output_columns: output_columns.iter().map(|s| s.to_string()).collect(),
            input_joiner: default_joiner(),
            output_joiner: default_joiner(),
            output_format: OutputFormat::Joined,
            id_column: None,
        }
    }
}

pub type RawRecord = BTreeMap<String, String>;

fn ordinal_id(index: usize, count: usize) -> String {
    let width = count.saturating_sub(1).to_string().len().max(4);
    format!("{index:0width$}")
}

fn lookup<'a>(record: &'a RawRecord, index: usize, column: &str) -> Result<&'a str> {
    record
        .get(column)
        .map(String::as_str)
        .ok_or_else(|| CorpusError::MissingColumn {
            index,
            column: column.to_string(),
        })
}

/// Maps raw records into canonical input and output columns.
pub fn standardize(
    raw_records: &[RawRecord],
    column_map: &ColumnMap,
    task_description: &str,
    metric_kind: MetricKind,
) -> Result<Dataset> {
    let mut examples = Vec::with_capacity(raw_records.len());
    for (index, record) in raw_records.iter().enumerate() {
        let mut inputs = Vec::with_capacity(column_map.input_columns.len());
        for column in &column_map.input_columns {
            inputs.push(lookup(record, index, column)?);
        }
        let mut outputs = Vec::with_capacity(column_map.output_columns.len());
        for column in &column_map.output_columns {
            let value = lookup(record, index, column)?;
            outputs.push(match column_map.output_format {
                OutputFormat::Joined => value.to_string(),
                OutputFormat::Labeled => format!("{column}: {value}"),
            });
        }
        let input = inputs.join(&column_map.input_joiner);
        let output = outputs.join(&column_map.output_joiner);
        if input.trim().is_empty() {
            return Err(CorpusError::EmptyText { index, side: "input" });
        }
        if output.trim().is_empty() {
            return Err(CorpusError::EmptyText { index, side: "output" });
        }
        let id = match &column_map.id_column {
            Some(column) => lookup(record, index, column)?.to_string(),
            None => ordinal_id(index, raw_records.len()),
        };
        examples.push(Example::new(id, input, output));
    }
    Dataset::new(examples, task_description, metric_kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Seeded shuffle followed by a contiguous train/dev/test partition.
pub fn split(dataset: &Dataset, counts: SplitCounts, seed: u64) -> Result<Split> {
    let size = dataset.len();
    if counts.train + counts.dev + counts.test != size {
        return Err(CorpusError::CountMismatch {
            train: counts.train,
            dev: counts.dev,
            test: counts.test,
            size,
        });
    }
    let mut order: Vec<usize> = (0..size).collect();
    order.shuffle(&mut seeding::rng(seed, seeding::stream::SPLIT, 0));
    let take = |range: std::ops::Range<usize>| {
        dataset.subset(
            order[range]
                .iter()
                .map(|&i| dataset.examples[i].clone())
                .collect(),
        )
    };
    let dev_end = counts.train + counts.dev;
    Ok(Split {
        train: take(0..counts.train),
        dev: take(counts.train..dev_end),
        test: take(dev_end..size),
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    split: String,
    id: String,
}

impl Split {
    /// Writes one `{"split": ..., "id": ...}` line per example.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        for (name, part) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            for example in &part.examples {
                let line = ManifestLine {
                    split: name.to_string(),
                    id: example.id.clone(),
                };
                serde_json::to_writer(&mut file, &line).map_err(std::io::Error::from)?;
                file.write_all(b"\n")?;
            }
        }
        file.flush()?;
        Ok(())
    }
}

/// Reads `(split, id)` pairs from a manifest written by [`Split::write_manifest`].
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push((parsed.split, parsed.id));
    }
    Ok(out)
}

/// Loads flat records from a CSV file (header row) or JSONL file.
pub fn load_records(path: &Path) -> Result<Vec<RawRecord>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    match ext.as_str() {
        "csv" => load_csv(path),
        "jsonl" | "ndjson" => load_jsonl(path),
        _ => Err(CorpusError::UnsupportedFormat(path.display().to_string())),
    }
}

fn load_csv(path: &Path) -> Result<Vec<RawRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        records.push(
            headers
                .iter()
                .zip(row.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect(),
        );
    }
    Ok(records)
}

fn load_jsonl(path: &Path) -> Result<Vec<RawRecord>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CorpusError::Parse {
            path: path.display().to_string(),
            line: n + 1,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let object = value
            .as_object()
            .ok_or_else(|| parse_err("expected a JSON object".into()))?;
        let mut record = RawRecord::new();
        for (key, value) in object {
            let text = match value {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                serde_json::Value::Null => String::new(),
                _ => return Err(parse_err(format!("field {key:?} is not a flat value"))),
            };
            record.insert(key.clone(), text);
        }
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(pairs: &[(&str, &str)]) -> RawRecord {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn numbered(n: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| Example::new(format!("e{i:03}"), format!("in {i}"), format!("out {i}")))
            .collect();
        Dataset::new(examples, "task", MetricKind::ExactMatch).unwrap()
    }

    #[test]
    fn standardize_single_column_identity() {
        let records = vec![record(&[("q", "Who?"), ("a", "Bob")])];
        let ds = standardize(&records, &ColumnMap::new(&["q"], &["a"]), "t", MetricKind::ExactMatch)
            .unwrap();
        assert_eq!(ds.examples[0].input, "Who?");
        assert_eq!(ds.examples[0].output, "Bob");
        assert_eq!(ds.examples[0].id, "0000");
    }

    #[test]
    fn standardize_joins_output_columns() {
        let records = vec![record(&[("q", "?"), ("x", "x"), ("y", "y")])];
        let ds = standardize(
            &records,
            &ColumnMap::new(&["q"], &["x", "y"]),
            "t",
            MetricKind::ExactMatch,
        )
        .unwrap();
        assert_eq!(ds.examples[0].output, "x\ny");
    }

    #[test]
    fn standardize_labeled_outputs() {
        let records = vec![record(&[("q", "?"), ("x", "1"), ("y", "2")])];
        let mut map = ColumnMap::new(&["q"], &["x", "y"]);
        map.output_format = OutputFormat::Labeled;
        let ds = standardize(&records, &map, "t", MetricKind::MeanPerField).unwrap();
        assert_eq!(ds.examples[0].output, "x: 1\ny: 2");
    }

    #[test]
    fn standardize_missing_column_names_it() {
        let records = vec![record(&[("q", "Who?"), ("a", "Bob")]), record(&[("q", "Why?")])];
        let err = standardize(&records, &ColumnMap::new(&["q"], &["a"]), "t", MetricKind::ExactMatch)
            .unwrap_err();
        match &err {
            CorpusError::MissingColumn { index, column } => {
                assert_eq!(*index, 1);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("\"a\""));
    }

    #[test]
    fn standardize_rejects_empty_text() {
        let records = vec![record(&[("q", "  "), ("a", "Bob")])];
        assert!(matches!(
            standardize(&records, &ColumnMap::new(&["q"], &["a"]), "t", MetricKind::ExactMatch),
            Err(CorpusError::EmptyText { side: "input", .. })
        ));
    }

    #[test]
    fn split_sizes_match_counts() {
        let ds = numbered(240);
        let s = split(&ds, SplitCounts { train: 168, dev: 8, test: 64 }, 3).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (168, 8, 64));
        let mut all: Vec<_> = s
            .train
            .ids()
            .into_iter()
            .chain(s.dev.ids())
            .chain(s.test.ids())
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 240);
    }

    #[test]
    fn split_all_train() {
        let ds = numbered(10);
        let s = split(&ds, SplitCounts { train: 10, dev: 0, test: 0 }, 0).unwrap();
        assert_eq!(s.train.len(), 10);
        assert!(s.dev.is_empty() && s.test.is_empty());
    }

    #[test]
    fn split_is_deterministic() {
        let ds = numbered(30);
        let counts = SplitCounts { train: 20, dev: 5, test: 5 };
        let a = split(&ds, counts, 1).unwrap();
        let b = split(&ds, counts, 1).unwrap();
        assert_eq!(a.train.ids(), b.train.ids());
        assert_eq!(a.test.ids(), b.test.ids());
        let c = split(&ds, counts, 2).unwrap();
        assert_ne!(a.train.ids(), c.train.ids());
    }

    #[test]
    fn split_count_mismatch() {
        let ds = numbered(5);
        assert!(matches!(
            split(&ds, SplitCounts { train: 3, dev: 0, test: 1 }, 0),
            Err(CorpusError::CountMismatch { size: 5, .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let examples = vec![Example::new("a", "x", "y"), Example::new("a", "z", "w")];
        assert!(matches!(
            Dataset::new(examples, "t", MetricKind::ExactMatch),
            Err(CorpusError::DuplicateId(_))
        ));
    }

    #[test]
    fn manifest_and_loaders_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("d.csv");
        fs::write(&csv_path, "q,a\n\"Who, really?\",Bob\nWhy?,Because\n").unwrap();
        let records = load_records(&csv_path).unwrap();
        assert_eq!(records[0]["q"], "Who, really?");

        let jsonl_path = dir.path().join("d.jsonl");
        fs::write(&jsonl_path, "{\"q\":\"Who?\",\"a\":3}\n\n{\"q\":\"Why?\",\"a\":\"x\"}\n").unwrap();
        let records = load_records(&jsonl_path).unwrap();
        assert_eq!(records[0]["a"], "3");
        assert_eq!(records.len(), 2);

        fs::write(&jsonl_path, "{\"q\":{\"nested\":1}}\n").unwrap();
        assert!(matches!(load_records(&jsonl_path), Err(CorpusError::Parse { line: 1, .. })));

        let ds = numbered(6);
        let s = split(&ds, SplitCounts { train: 3, dev: 1, test: 2 }, 5).unwrap();
        let manifest = dir.path().join("splits.jsonl");
        s.write_manifest(&manifest).unwrap();
        let lines = read_manifest(&manifest).unwrap();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines.iter().filter(|(k, _)| k == "test").count(), 2);
    }
}
