//! Minimal OpenAI-compatible chat client that records generated SQL together
//! with its per-token log probabilities.
//!
//! Network access goes through the [`Transport`] trait so that response
//! parsing and retry behaviour can be exercised against recorded payloads.

use std::time::Duration;

use probgate_core::{Alternative, GenerationRecord, ScoredToken};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use url::Url;

/// System prompt used for inference.
pub const SQLGPT_SYSTEM_PROMPT: &str = "You are `SQLgpt', an AI designed to convert natural language questions into their corresponding SQL queries. It is imperative that the generated SQL queries conform to the standard SQL format and are not enclosed within quotes (neither single ' nor double \"). Your primary objective is to precisely generate the exact SQL query for each presented question.";

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid client configuration: {0}")]
    Config(String),
    #[error("environment variable {0} is not set")]
    MissingKey(String),
    #[error("authentication rejected (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("request failed (HTTP {status}): {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed response, field `{field}`: {reason}; payload: {raw}")]
    Malformed {
        field: String,
        reason: String,
        raw: String,
    },
    #[error(transparent)]
    Record(#[from] probgate_core::Error),
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub system_prompt: String,
    pub max_retries: u32,
    pub request_timeout_ms: u64,
    /// First backoff delay; doubles on every retry.
    pub backoff_base_ms: u64,
    pub temperature: f64,
    /// Alternatives requested per position. 0 disables them.
    pub top_logprobs: u8,
    pub concurrency: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo-0125".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            system_prompt: SQLGPT_SYSTEM_PROMPT.into(),
            max_retries: 3,
            request_timeout_ms: 60_000,
            backoff_base_ms: 500,
            temperature: 0.0,
            top_logprobs: 5,
            concurrency: 1,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        let url = Url::parse(&self.base_url)
            .map_err(|e| ClientError::Config(format!("base_url {:?}: {e}", self.base_url)))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(ClientError::Config(format!("base_url scheme {:?} is not http(s)", url.scheme())));
        }
        if self.model.is_empty() {
            return Err(ClientError::Config("model is empty".into()));
        }
        if self.top_logprobs > 20 {
            return Err(ClientError::Config("top_logprobs must be at most 20".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ClientError::Config(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.concurrency == 0 {
            return Err(ClientError::Config("concurrency must be at least 1".into()));
        }
        Ok(())
    }

    pub fn endpoint(&self) -> Result<Url> {
        let mut base = self.base_url.clone();
        if !base.ends_with('/') {
            base.push('/');
        }
        Url::parse(&base)
            .and_then(|u| u.join("chat/completions"))
            .map_err(|e| ClientError::Config(format!("base_url {:?}: {e}", self.base_url)))
    }

    pub fn api_key(&self) -> Result<String> {
        match std::env::var(&self.api_key_env) {
            Ok(key) if !key.is_empty() => Ok(key),
            _ => Err(ClientError::MissingKey(self.api_key_env.clone())),
        }
    }

    pub fn request_body(&self, question: &str) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.system_prompt},
                {"role": "user", "content": question},
            ],
            "temperature": self.temperature,
            "logprobs": true,
        });
        if self.top_logprobs > 0 {
            body["top_logprobs"] = json!(self.top_logprobs);
        }
        body
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Sync {
    /// Transport-level failures (connect, timeout) are returned as `Err`
    /// and treated as transient.
    fn post_json(&self, url: &Url, api_key: &str, body: &Value) -> std::result::Result<HttpResponse, String>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout_ms: u64) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(timeout_ms))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &Url, api_key: &str, body: &Value) -> std::result::Result<HttpResponse, String> {
        let resp = self
            .client
            .post(url.clone())
            .bearer_auth(api_key)
            .json(body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

/// Input line for batch generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub question: String,
}

/// Reads `{"id", "question"}` lines; blank lines are skipped.
pub fn read_questions(path: &std::path::Path) -> Result<Vec<Question>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ClientError::Config(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| ClientError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fetched {
    pub record: GenerationRecord,
    pub retries: u32,
}

fn malformed(field: &str, reason: impl Into<String>, raw: &str) -> ClientError {
    ClientError::Malformed {
        field: field.into(),
        reason: reason.into(),
        raw: raw.into(),
    }
}

fn field<'a>(value: &'a Value, path: &str, key: &str, raw: &str) -> Result<&'a Value> {
    match value.get(key) {
        Some(v) if !v.is_null() => Ok(v),
        _ => Err(malformed(path, "missing", raw)),
    }
}

fn as_logprob(value: &Value, path: &str, raw: &str) -> Result<f64> {
    value.as_f64().ok_or_else(|| malformed(path, "not a number", raw))
}

/// Parses a chat completion body into a record. Pure function of `body`.
pub fn parse_response(id: &str, question: &str, body: &str) -> Result<GenerationRecord> {
    let root: Value = serde_json::from_str(body).map_err(|e| malformed("<body>", e.to_string(), body))?;
    let choice = field(&root, "choices", "choices", body)?
        .as_array()
        .and_then(|c| c.first())
        .ok_or_else(|| malformed("choices", "empty or not an array", body))?;
    let message = field(choice, "choices[0].message", "message", body)?;
    let sql = match message.get("content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(_) => return Err(malformed("choices[0].message.content", "not a string", body)),
    };
    let logprobs = field(choice, "choices[0].logprobs", "logprobs", body)?;
    let content = field(logprobs, "choices[0].logprobs.content", "content", body)?
        .as_array()
        .ok_or_else(|| malformed("choices[0].logprobs.content", "not an array", body))?;

    let mut tokens = Vec::with_capacity(content.len());
    for (i, entry) in content.iter().enumerate() {
        let path = format!("choices[0].logprobs.content[{i}]");
        let text = field(entry, &format!("{path}.token"), "token", body)?
            .as_str()
            .ok_or_else(|| malformed(&format!("{path}.token"), "not a string", body))?;
        let logprob = as_logprob(field(entry, &format!("{path}.logprob"), "logprob", body)?, &format!("{path}.logprob"), body)?;
        let alternatives = match entry.get("top_logprobs").and_then(Value::as_array) {
            Some(top) if !top.is_empty() => {
                let mut alts = Vec::with_capacity(top.len());
                for (j, alt) in top.iter().enumerate() {
                    let alt_path = format!("{path}.top_logprobs[{j}]");
                    let text = field(alt, &format!("{alt_path}.token"), "token", body)?
                        .as_str()
                        .ok_or_else(|| malformed(&format!("{alt_path}.token"), "not a string", body))?;
                    let lp = as_logprob(field(alt, &format!("{alt_path}.logprob"), "logprob", body)?, &alt_path, body)?;
                    alts.push(Alternative { text: text.to_owned(), logprob: lp });
                }
                Some(alts)
            }
            _ => None,
        };
        let token = ScoredToken::with_alternatives(text, logprob, alternatives).map_err(|e| malformed(&path, e, body))?;
        tokens.push(token);
    }
    Ok(GenerationRecord::new(id, question, sql, tokens)?)
}

fn is_transient(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

/// Sends one question, retrying transient failures with exponential backoff.
pub fn fetch_generation(
    transport: &dyn Transport,
    cfg: &ClientConfig,
    api_key: &str,
    id: &str,
    question: &str,
) -> Result<Fetched> {
    let url = cfg.endpoint()?;
    let body = cfg.request_body(question);
    let mut retries = 0;
    loop {
        let last = match transport.post_json(&url, api_key, &body) {
            Ok(resp) if (200..300).contains(&resp.status) => {
                let record = parse_response(id, question, &resp.body)?;
                if retries > 0 {
                    tracing::info!(id, retries, "request succeeded after retries");
                }
                return Ok(Fetched { record, retries });
            }
            Ok(resp) if resp.status == 401 || resp.status == 403 => {
                return Err(ClientError::Auth {
                    status: resp.status,
                    body: resp.body,
                })
            }
            Ok(resp) if is_transient(resp.status) => format!("HTTP {}: {}", resp.status, resp.body),
            Ok(resp) => {
                return Err(ClientError::Http {
                    status: resp.status,
                    body: resp.body,
                })
            }
            Err(e) => e,
        };
        if retries >= cfg.max_retries {
            return Err(ClientError::RetriesExhausted {
                attempts: retries + 1,
                last,
            });
        }
        let delay = cfg.backoff_base_ms.saturating_mul(1 << retries.min(16));
        retries += 1;
        tracing::warn!(id, retry = retries, delay_ms = delay, error = %last, "transient failure, retrying");
        std::thread::sleep(Duration::from_millis(delay));
    }
}

/// Fetches every question with at most `cfg.concurrency` requests in flight.
/// Results come back in input order.
pub fn fetch_all(transport: &dyn Transport, cfg: &ClientConfig, questions: &[Question]) -> Result<Vec<Fetched>> {
    use rayon::prelude::*;

    cfg.validate()?;
    let key = cfg.api_key()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency)
        .build()
        .map_err(|e| ClientError::Config(e.to_string()))?;
    pool.install(|| {
        questions
            .par_iter()
            .map(|q| fetch_generation(transport, cfg, &key, &q.id, &q.question))
            .collect()
    })
}
