//! Deterministic mock backends.
//!
//! [`ScriptedBackend`] answers chat calls from a rule file: the first entry
//! whose role and text predicates match wins. [`FnBackend`] wraps a closure.
//! Both embed through [`MockEmbedder`], which maps each distinct text to a
//! seeded pseudo-random unit vector unless a vector was planted for it.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, ChatRequest, Completion, EmbeddingBatch, ModelRole, TokenCount};

/// Mock token count: whitespace-separated words.
pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Unit vector derived from `(seed, text)` only.
pub fn hash_embedding(text: &str, dimension: usize, seed: u64) -> Vec<f64> {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(text.as_bytes())
        .finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes));
    let mut v: Vec<f64> = (0..dimension).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockEmbedder {
    pub dimension: usize,
    pub seed: u64,
    pub planted: HashMap<String, Vec<f64>>,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(16, 0)
    }
}

impl MockEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        Self {
            dimension,
            seed,
            planted: HashMap::new(),
        }
    }

    pub fn plant(mut self, text: impl Into<String>, vector: Vec<f64>) -> Self {
        self.planted.insert(text.into(), vector);
        self
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        self.planted
            .get(text)
            .cloned()
            .unwrap_or_else(|| hash_embedding(text, self.dimension, self.seed))
    }

    fn embed(&self, texts: &[String]) -> EmbeddingBatch {
        EmbeddingBatch {
            vectors: texts.iter().map(|t| self.vector(t)).collect(),
            input_tokens: texts.iter().map(|t| count_tokens(t)).sum(),
        }
    }
}

fn completion(request: &ChatRequest, text: String) -> Completion {
    let tokens = TokenCount {
        input_tokens: count_tokens(&request.system) + count_tokens(&request.user),
        output_tokens: count_tokens(&text),
    };
    Completion { text, tokens }
}

type ChatFn = dyn Fn(&ChatRequest) -> String + Send + Sync;

/// Chat answered by a pure function of the request.
pub struct FnBackend {
    respond: Box<ChatFn>,
    embedder: MockEmbedder,
}

impl FnBackend {
    pub fn new(respond: impl Fn(&ChatRequest) -> String + Send + Sync + 'static) -> Self {
        Self {
            respond: Box::new(respond),
            embedder: MockEmbedder::default(),
        }
    }

    pub fn with_embedder(mut self, embedder: MockEmbedder) -> Self {
        self.embedder = embedder;
        self
    }
}

impl Backend for FnBackend {
    fn chat(&self, _model: &str, request: &ChatRequest) -> Result<Completion, BackendError> {
        Ok(completion(request, (self.respond)(request)))
    }

    fn embed(&self, _model: &str, texts: &[String]) -> Result<EmbeddingBatch, BackendError> {
        Ok(self.embedder.embed(texts))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    #[serde(default)]
    embedding: EmbeddingSection,
    #[serde(default)]
    chat: Vec<ScriptEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingSection {
    #[serde(default = "default_dimension")]
    dimension: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    planted: HashMap<String, Vec<f64>>,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            dimension: default_dimension(),
            seed: 0,
            planted: HashMap::new(),
        }
    }
}

fn default_dimension() -> usize {
    16
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptEntry {
    role: Option<ModelRole>,
    system_contains: Option<String>,
    user_contains: Option<String>,
    user_regex: Option<String>,
    response: String,
}

#[derive(Debug)]
struct CompiledEntry {
    role: Option<ModelRole>,
    system_contains: Option<String>,
    user_contains: Option<String>,
    user_regex: Option<Regex>,
    response: String,
}

impl CompiledEntry {
    fn respond(&self, request: &ChatRequest) -> Option<String> {
        if self.role.is_some_and(|r| r != request.role) {
            return None;
        }
        if let Some(needle) = &self.system_contains {
            if !request.system.contains(needle.as_str()) {
                return None;
            }
        }
        if let Some(needle) = &self.user_contains {
            if !request.user.contains(needle.as_str()) {
                return None;
            }
        }
        match &self.user_regex {
            Some(re) => {
                let caps = re.captures(&request.user)?;
                let mut out = String::new();
                caps.expand(&self.response, &mut out);
                Some(out)
            }
            None => Some(self.response.clone()),
        }
    }
}

/// Chat answered from a TOML rule file.
///
/// ```toml
/// [embedding]
/// dimension = 16
/// seed = 0
/// planted = { "exact text" = [1.0, 0.0] }
///
/// [[chat]]
/// role = "base"                 # optional
/// system_contains = "Rules:"    # optional
/// user_regex = "order (\\d+)"   # optional; captures expand into response
/// response = "order $1"
/// ```
#[derive(Debug)]
pub struct ScriptedBackend {
    entries: Vec<CompiledEntry>,
    embedder: MockEmbedder,
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("reading mock script: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing mock script: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("mock script entry {index}: {source}")]
    Regex {
        index: usize,
        #[source]
        source: regex::Error,
    },
}

impl ScriptedBackend {
    pub fn from_path(path: &Path) -> Result<Self, ScriptError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml(text: &str) -> Result<Self, ScriptError> {
        let file: ScriptFile = toml::from_str(text)?;
        let entries = file
            .chat
            .into_iter()
            .enumerate()
            .map(|(index, e)| {
                let user_regex = e
                    .user_regex
                    .as_deref()
                    .map(Regex::new)
                    .transpose()
                    .map_err(|source| ScriptError::Regex { index, source })?;
                Ok(CompiledEntry {
                    role: e.role,
                    system_contains: e.system_contains,
                    user_contains: e.user_contains,
                    user_regex,
                    response: e.response,
                })
            })
            .collect::<Result<_, ScriptError>>()?;
        Ok(Self {
            entries,
            embedder: MockEmbedder {
                dimension: file.embedding.dimension,
                seed: file.embedding.seed,
                planted: file.embedding.planted,
            },
        })
    }
}

impl Backend for ScriptedBackend {
    fn chat(&self, _model: &str, request: &ChatRequest) -> Result<Completion, BackendError> {
        self.entries
            .iter()
            .find_map(|e| e.respond(request))
            .map(|text| completion(request, text))
            .ok_or_else(|| BackendError::NoScript(request.role.to_string()))
    }

    fn embed(&self, _model: &str, texts: &[String]) -> Result<EmbeddingBatch, BackendError> {
        Ok(self.embedder.embed(texts))
    }
}
