//! Model access: one trait, an HTTP JSON chat-completion client, and
//! deterministic mock models for offline runs and tests.
//!
//! Every query is addressed by an idempotency key derived from
//! `(model_name, item_id, trial_index, protocol_tag, prompt_hash)`. The
//! harness logs completed request/response pairs under that key and replays
//! them on resume, so a query is issued to a live endpoint at most once per
//! key across any number of restarts.

mod http;
mod mock;
mod parse;

pub use http::HttpModel;
pub use mock::{MockBehavior, MockModel};
pub use parse::{
    letter_slot, option_letter, parse_option_answer, AnswerParse, ParseOptions, ParseOutcome,
    ParseRule,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("environment variable {env} is not set (API keys are read from the environment, never from config)")]
    MissingApiKey { env: String },
    #[error("transient failures exhausted {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("endpoint returned HTTP {status}: {body_snippet}")]
    HttpStatus { status: u16, body_snippet: String },
    #[error("malformed completion response: {message}")]
    MalformedResponse { message: String },
    #[error("scripted mock has no response for key {key}")]
    ScriptMissing { key: String },
    #[error("scripted mock exhausted responses for key {key}")]
    ScriptExhausted { key: String },
    #[error("sequence mock exhausted after {served} responses")]
    SequenceExhausted { served: usize },
    #[error("always_correct mock requires the correct displayed slot in request metadata")]
    MissingCorrectSlot,
    #[error("cannot read image {path}: {source}")]
    ImageRead {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unsupported image extension for {path} (expected .png, .jpg, or .jpeg)")]
    UnsupportedImage { path: PathBuf },
    #[error("invalid endpoint configuration: {0}")]
    BadEndpoint(String),
    #[error("query log writer is unavailable: {message}")]
    LogUnavailable { message: String },
}

/// Connection settings for one HTTP chat-completion endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEndpoint {
    /// API root, e.g. `http://localhost:8000/v1`; the client posts to
    /// `{base_url}/chat/completions`.
    pub base_url: String,
    pub model_name: String,
    /// Sampling temperature sent with every request. Defaults to 0 so that
    /// repeat queries measure presentation sensitivity, not sampling noise.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
    /// Retries after the first attempt on transient failures (HTTP 429, 5xx,
    /// timeouts, connection errors).
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Upper bound on simultaneous outstanding requests to this endpoint.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Name of the environment variable holding the API key; no
    /// Authorization header is sent when unset.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// First backoff delay; doubles per retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_max_tokens() -> u32 {
    512
}
fn default_timeout_s() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_in_flight() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    250
}

impl ModelEndpoint {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.base_url.is_empty() {
            return Err(GatewayError::BadEndpoint("empty base_url".into()));
        }
        if self.model_name.is_empty() {
            return Err(GatewayError::BadEndpoint("empty model_name".into()));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::BadEndpoint("max_in_flight must be >= 1".into()));
        }
        if self.timeout_s == 0 {
            return Err(GatewayError::BadEndpoint("timeout_s must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::BadEndpoint("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

/// Provenance fields identifying one query; these feed the idempotency key
/// and give mock models enough context to act without network access.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryMeta {
    pub model_name: String,
    pub item_id: String,
    /// Trial index for multi-trial protocols, repeat index for distribution
    /// estimation, step index for chained protocols.
    pub trial_index: u32,
    pub protocol_tag: String,
    /// Displayed slot of the correct option, populated for option questions.
    /// Only mock models read it; it is never serialized onto the wire.
    pub correct_displayed_slot: Option<usize>,
    /// Option texts in displayed order, for content-addressed mocks.
    pub displayed_options: Option<Vec<String>>,
}

/// One model query: prompt text plus image paths in presentation order.
/// Images are loaded and base64-encoded only when an HTTP endpoint needs
/// them; mocks never touch the files.
#[derive(Debug, Clone)]
pub struct QueryRequest {
    pub prompt: String,
    pub images: Vec<PathBuf>,
    pub meta: QueryMeta,
}

impl QueryRequest {
    /// Stable key identifying this query across runs: a hash of
    /// `(model_name, item_id, trial_index, protocol_tag, prompt_hash)`.
    pub fn idempotency_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"temporel.query.v1");
        for part in [
            self.meta.model_name.as_bytes(),
            self.meta.item_id.as_bytes(),
            self.meta.protocol_tag.as_bytes(),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.update(self.meta.trial_index.to_le_bytes());
        h.update(Sha256::digest(self.prompt.as_bytes()));
        hex::encode(h.finalize())
    }
}

/// A completed query.
#[derive(Debug, Clone)]
pub struct ModelResponse {
    pub text: String,
    /// Transient-failure retries spent obtaining this response.
    pub retries: u32,
}

/// Anything that can answer a query: HTTP endpoints, mocks, or test doubles.
pub trait Model: Send + Sync {
    fn name(&self) -> &str;
    fn query(&self, req: &QueryRequest) -> Result<ModelResponse, GatewayError>;
}
