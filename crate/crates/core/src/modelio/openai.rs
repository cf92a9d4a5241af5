//! OpenAI-compatible `/v1/chat/completions` and `/v1/embeddings` backend.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendError, ChatRequest, Completion, EmbeddingBatch, TokenCount};

#[derive(Debug, Clone)]
pub struct OpenAiBackend {
    base_url: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

impl OpenAiBackend {
    /// `base_url` may be the host root or end in `/v1`.
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, BackendError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            http,
        })
    }

    fn endpoint(&self, path: &str) -> String {
        if self.base_url.ends_with("/v1") {
            format!("{}/{path}", self.base_url)
        } else {
            format!("{}/v1/{path}", self.base_url)
        }
    }

    fn post<T: for<'de> Deserialize<'de>>(&self, path: &str, body: serde_json::Value) -> Result<T, BackendError> {
        let mut request = self.http.post(self.endpoint(path)).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Decode(e.to_string()))
    }
}

impl Backend for OpenAiBackend {
    fn chat(&self, model: &str, request: &ChatRequest) -> Result<Completion, BackendError> {
        let mut messages = Vec::with_capacity(2);
        if !request.system.is_empty() {
            messages.push(json!({"role": "system", "content": request.system}));
        }
        messages.push(json!({"role": "user", "content": request.user}));
        let body = json!({
            "model": model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        });
        let response: ChatResponse = self.post("chat/completions", body)?;
        let usage = response.usage.unwrap_or_default();
        let text = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Decode("no choices".into()))?
            .message
            .content
            .unwrap_or_default();
        Ok(Completion {
            text,
            tokens: TokenCount {
                input_tokens: usage.prompt_tokens,
                output_tokens: usage.completion_tokens,
            },
        })
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<EmbeddingBatch, BackendError> {
        let body = json!({"model": model, "input": texts});
        let response: EmbeddingResponse = self.post("embeddings", body)?;
        let mut data = response.data;
        data.sort_by_key(|item| item.index);
        Ok(EmbeddingBatch {
            vectors: data.into_iter().map(|item| item.embedding).collect(),
            input_tokens: response.usage.unwrap_or_default().prompt_tokens,
        })
    }
}
