//! Run configuration, read from TOML.
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::clustering::ClusterConfig;
use crate::corpus::{ColumnMap, MetricKind, SplitCounts};
use crate::induction::InductionConfig;
use crate::modelio::{Backend, EmbeddingCache, ModelClient, ModelRole, OpenAiBackend, RetryPolicy, ScriptedBackend};
use crate::refinery::RefineConfig;
use crate::templates::Templates;

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task_description: String,
    pub metric: MetricKind,
    /// Base seed; sections without their own seed use it.
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub models: ModelsConfig,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub induction: InductionSection,
    #[serde(default)]
    pub refine: RefineSection,
    #[serde(default)]
    pub knn: KnnConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(flatten)]
    pub columns: ColumnMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    #[serde(default)]
    pub dev: usize,
    pub test: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Openai,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub backend: BackendKind,
    /// TOML chat/embedding script for the mock backend.
    pub mock_script: Option<PathBuf>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_attempts")]
    pub retry_attempts: u32,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Defaults for every role of the OpenAI-compatible backend.
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub roles: BTreeMap<ModelRole, RoleConfig>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RoleConfig {
    pub model: String,
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
}

fn default_concurrency() -> usize {
    4
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub k: usize,
    pub max_iterations: usize,
    pub discrete_output_threshold: usize,
    pub seed: Option<u64>,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let d = ClusterConfig::default();
        Self {
            k: d.k,
            max_iterations: d.max_iterations,
            discrete_output_threshold: d.discrete_output_threshold,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct InductionSection {
    pub per_side_cap: usize,
    pub rules_per_set: usize,
    pub max_pairs: usize,
    pub seed: Option<u64>,
}

impl Default for InductionSection {
    fn default() -> Self {
        let d = InductionConfig::default();
        Self {
            per_side_cap: d.per_side_cap,
            rules_per_set: d.rules_per_set,
            max_pairs: d.max_pairs,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub max_steps: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub sample_size: Option<usize>,
    pub threshold: f64,
    pub seed: Option<u64>,
}

impl Default for RefineSection {
    fn default() -> Self {
        let d = RefineConfig::default();
        Self {
            max_steps: d.max_steps,
            patience: d.patience,
            batch_size: d.batch_size,
            sample_size: d.sample_size,
            threshold: d.threshold,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrder {
    /// Closest demonstration sits right before the query.
    #[default]
    NearestLast,
    NearestFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    pub order: DemoOrder,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 4,
            order: DemoOrder::NearestLast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub artifacts: PathBuf,
    /// JSONL embedding cache; in-memory when absent.
    pub cache: Option<PathBuf>,
    /// Directory of template overrides.
    pub templates: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            artifacts: PathBuf::from("runs"),
            cache: None,
            templates: None,
        }
    }
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        resolve(base_dir, &mut config.data.path);
        resolve(base_dir, &mut config.paths.artifacts);
        for p in [&mut config.models.mock_script, &mut config.paths.cache, &mut config.paths.templates]
            .into_iter()
            .flatten()
        {
            resolve(base_dir, p);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("reading {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !self.data.path.is_file() {
            return bad(format!("dataset not found: {}", self.data.path.display()));
        }
        if self.data.columns.input_columns.is_empty() || self.data.columns.output_columns.is_empty() {
            return bad("data.input_columns and data.output_columns must be non-empty".into());
        }
        if self.task_description.trim().is_empty() {
            return bad("task_description is empty".into());
        }
        if self.split.train == 0 || self.split.test == 0 {
            return bad("split.train and split.test must be positive".into());
        }
        if self.knn.k == 0 {
            return bad("knn.k must be positive".into());
        }
        if let Some(dir) = &self.paths.templates {
            if !dir.is_dir() {
                return bad(format!("template directory not found: {}", dir.display()));
            }
        }
        match self.models.backend {
            BackendKind::Mock => match &self.models.mock_script {
                Some(p) if p.is_file() => {}
                Some(p) => return bad(format!("mock script not found: {}", p.display())),
                None => return bad("models.mock_script is required for the mock backend".into()),
            },
            BackendKind::Openai => {
                for role in ModelRole::ALL {
                    let Some(rc) = self.models.roles.get(&role) else {
                        return bad(format!("models.roles.{role} is missing"));
                    };
                    if rc.base_url.is_none() && self.models.base_url.is_none() {
                        return bad(format!("no base_url for role {role}"));
                    }
                }
            }
        }
        self.refine_config().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.split.train,
            dev: self.split.dev,
            test: self.split.test,
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            k: self.cluster.k,
            max_iterations: self.cluster.max_iterations,
            seed: self.cluster.seed.unwrap_or(self.seed),
            discrete_output_threshold: self.cluster.discrete_output_threshold,
        }
    }

    pub fn induction_config(&self) -> InductionConfig {
        InductionConfig {
            per_side_cap: self.induction.per_side_cap,
            rules_per_set: self.induction.rules_per_set,
            max_pairs: self.induction.max_pairs,
        }
    }

    pub fn induction_seed(&self) -> u64 {
        self.induction.seed.unwrap_or(self.seed)
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            max_steps: self.refine.max_steps,
            patience: self.refine.patience,
            batch_size: self.refine.batch_size,
            sample_size: self.refine.sample_size,
            threshold: self.refine.threshold,
            seed: self.refine.seed.unwrap_or(self.seed),
        }
    }

    pub fn templates(&self) -> Result<Templates, HarnessError> {
        Templates::load(self.paths.templates.as_deref()).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// A fresh client (own usage ledger) for one run.
    pub fn client(&self) -> Result<ModelClient, HarnessError> {
        let m = &self.models;
        let mut client = match m.backend {
            BackendKind::Mock => {
                let path = m.mock_script.as_ref().expect("validated");
                let backend = ScriptedBackend::from_path(path).map_err(|e| HarnessError::Config(e.to_string()))?;
                ModelClient::uniform(Arc::new(backend))
            }
            BackendKind::Openai => {
                let mut client = ModelClient::new();
                for role in ModelRole::ALL {
                    let rc = &m.roles[&role];
                    let url = rc.base_url.as_ref().or(m.base_url.as_ref()).expect("validated");
                    let key = match rc.api_key_env.as_ref().or(m.api_key_env.as_ref()) {
                        Some(var) => Some(
                            std::env::var(var)
                                .map_err(|_| HarnessError::Config(format!("environment variable {var} is not set")))?,
                        ),
                        None => None,
                    };
                    let backend = OpenAiBackend::new(url, key, Duration::from_secs(m.timeout_secs))
                        .map_err(|e| HarnessError::Config(e.to_string()))?;
                    client = client.with_route(role, Arc::new(backend) as Arc<dyn Backend>, &rc.model);
                }
                client
            }
        };
        client = client
            .with_concurrency(m.concurrency)
            .with_retry(RetryPolicy {
                max_attempts: m.retry_attempts.max(1),
                base_backoff_ms: m.retry_backoff_ms,
            });
        let cache = match &self.paths.cache {
            Some(path) => EmbeddingCache::open(path).map_err(|e| HarnessError::Config(format!("opening cache: {e}")))?,
            None => EmbeddingCache::in_memory(),
        };
        Ok(client.with_cache(cache))
    }
}
