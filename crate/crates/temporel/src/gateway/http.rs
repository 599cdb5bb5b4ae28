//! Blocking HTTP client for JSON chat-completion endpoints.
//!
//! Requests carry the prompt as a text part followed by one base64 data-URL
//! image part per frame, in presentation order. Transient failures (HTTP
//! 429, 5xx, timeouts, connection errors) are retried with exponential
//! backoff up to `max_retries`; anything else fails terminally. A
//! condition-variable gate caps simultaneous outstanding requests at
//! `max_in_flight` regardless of how many threads share the client.

use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{GatewayError, Model, ModelEndpoint, ModelResponse, QueryRequest};

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct WireMessage {
    role: &'static str,
    content: Vec<WirePart>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum WirePart {
    Text { text: String },
    ImageUrl { image_url: WireImageUrl },
}

#[derive(Serialize)]
struct WireImageUrl {
    url: String,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: String,
}

/// Counting gate: `acquire` blocks while `max_in_flight` permits are out.
struct Gate {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(permits: usize) -> Self {
        Gate {
            permits: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut permits = self.permits.lock().expect("gate poisoned");
        while *permits == 0 {
            permits = self.freed.wait(permits).expect("gate poisoned");
        }
        *permits -= 1;
        GatePermit { gate: self }
    }
}

struct GatePermit<'a> {
    gate: &'a Gate,
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut permits = self.gate.permits.lock().expect("gate poisoned");
        *permits += 1;
        self.gate.freed.notify_one();
    }
}

/// A live chat-completion endpoint.
pub struct HttpModel {
    endpoint: ModelEndpoint,
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    gate: Gate,
}

impl HttpModel {
    /// Builds the client, reading the API key from the environment variable
    /// named in the endpoint config (keys never live in config files).
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let api_key = match &endpoint.api_key_env {
            Some(env) => Some(std::env::var(env).map_err(|_| GatewayError::MissingApiKey {
                env: env.clone(),
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_s))
            .build()
            .map_err(|e| GatewayError::BadEndpoint(e.to_string()))?;
        let url = format!(
            "{}/chat/completions",
            endpoint.base_url.trim_end_matches('/')
        );
        let gate = Gate::new(endpoint.max_in_flight);
        Ok(HttpModel {
            endpoint,
            url,
            api_key,
            client,
            gate,
        })
    }

    fn build_body(&self, req: &QueryRequest) -> Result<String, GatewayError> {
        let mut content = vec![WirePart::Text {
            text: req.prompt.clone(),
        }];
        for path in &req.images {
            content.push(WirePart::ImageUrl {
                image_url: WireImageUrl {
                    url: image_data_url(path)?,
                },
            });
        }
        let wire = WireRequest {
            model: &self.endpoint.model_name,
            messages: vec![WireMessage {
                role: "user",
                content,
            }],
            temperature: self.endpoint.temperature,
            max_tokens: self.endpoint.max_tokens,
        };
        Ok(serde_json::to_string(&wire).expect("wire request serializes"))
    }
}

fn image_data_url(path: &Path) -> Result<String, GatewayError> {
    let media_type = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        _ => {
            return Err(GatewayError::UnsupportedImage {
                path: path.to_path_buf(),
            })
        }
    };
    let bytes = std::fs::read(path).map_err(|source| GatewayError::ImageRead {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(format!("data:{media_type};base64,{}", BASE64.encode(bytes)))
}

enum Attempt {
    Done(String),
    Transient(String),
    Fatal(GatewayError),
}

impl Model for HttpModel {
    fn name(&self) -> &str {
        &self.endpoint.model_name
    }

    fn query(&self, req: &QueryRequest) -> Result<ModelResponse, GatewayError> {
        let _permit = self.gate.acquire();
        let body = self.build_body(req)?;
        let mut last_transient = String::new();
        for attempt in 0..=self.endpoint.max_retries {
            if attempt > 0 {
                let delay = self.endpoint.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.send_once(&body) {
                Attempt::Done(text) => {
                    return Ok(ModelResponse {
                        text,
                        retries: attempt,
                    })
                }
                Attempt::Transient(msg) => last_transient = msg,
                Attempt::Fatal(err) => return Err(err),
            }
        }
        Err(GatewayError::RetriesExhausted {
            attempts: self.endpoint.max_retries + 1,
            last: last_transient,
        })
    }
}

impl HttpModel {
    fn send_once(&self, body: &str) -> Attempt {
        let mut builder = self
            .client
            .post(&self.url)
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(key) = &self.api_key {
            builder = builder.header("authorization", format!("Bearer {key}"));
        }
        let resp = match builder.send() {
            Ok(r) => r,
            // Connection refused, DNS, timeout: all worth retrying.
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Transient(format!("HTTP {}", status.as_u16()));
        }
        if !status.is_success() {
            return Attempt::Fatal(GatewayError::HttpStatus {
                status: status.as_u16(),
                body_snippet: snippet(&text),
            });
        }
        match serde_json::from_str::<WireResponse>(&text) {
            Ok(parsed) => match parsed.choices.into_iter().next() {
                Some(choice) => Attempt::Done(choice.message.content),
                None => Attempt::Fatal(GatewayError::MalformedResponse {
                    message: "empty choices array".into(),
                }),
            },
            Err(e) => Attempt::Fatal(GatewayError::MalformedResponse {
                message: format!("{e} in body {}", snippet(&text)),
            }),
        }
    }
}

fn snippet(text: &str) -> String {
    const LIMIT: usize = 200;
    if text.len() <= LIMIT {
        text.to_string()
    } else {
        let mut end = LIMIT;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &text[..end])
    }
}
