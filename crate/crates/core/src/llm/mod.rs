//! Gateway to LLM-backed agents: dispatch, JSON extraction, schema checks and retries.

mod json;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifacts;
use crate::error::{io_err, Error, Result};

pub use json::extract_json_block;

pub const API_KEY_ENV: &str = "PROFAGENT_API_KEY";
pub const FALLBACK_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const BASE_URL_ENV: &str = "PROFAGENT_LLM_BASE_URL";
const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsonType {
    Object,
    Array,
    String,
    Number,
    Integer,
    Boolean,
    Null,
}

impl JsonType {
    pub fn matches(self, v: &Value) -> bool {
        match self {
            JsonType::Object => v.is_object(),
            JsonType::Array => v.is_array(),
            JsonType::String => v.is_string(),
            JsonType::Number => v.is_number(),
            JsonType::Integer => v.is_i64() || v.is_u64(),
            JsonType::Boolean => v.is_boolean(),
            JsonType::Null => v.is_null(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequiredKey {
    /// Dotted path; a `[]` suffix on a segment applies the rest to every element.
    pub path: String,
    pub types: Vec<JsonType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericBound {
    pub path: String,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonSchemaSpec {
    pub required_keys: Vec<RequiredKey>,
    pub bounds: Vec<NumericBound>,
}

/// Values reached by `path`; an object where a list is expected counts as a one-element list.
fn resolve<'a>(root: &'a Value, path: &str) -> std::result::Result<Vec<&'a Value>, String> {
    let mut current = vec![root];
    for seg in path.split('.') {
        let (name, each) = match seg.strip_suffix("[]") {
            Some(n) => (n, true),
            None => (seg, false),
        };
        let mut next = Vec::new();
        for v in current {
            let child = v.get(name).ok_or_else(|| format!("missing key `{path}`"))?;
            if each {
                match child {
                    Value::Array(items) => next.extend(items.iter()),
                    Value::Object(_) => next.push(child),
                    _ => return Err(format!("`{name}` in `{path}` is not a list")),
                }
            } else {
                next.push(child);
            }
        }
        current = next;
    }
    Ok(current)
}

impl JsonSchemaSpec {
    /// # Panics
    /// If `keys` is empty: a schema must require something.
    pub fn new<S: Into<String>>(keys: Vec<(S, Vec<JsonType>)>) -> Self {
        assert!(!keys.is_empty(), "schema needs at least one required key");
        Self {
            required_keys: keys.into_iter().map(|(p, types)| RequiredKey { path: p.into(), types }).collect(),
            bounds: Vec::new(),
        }
    }

    pub fn with_bounds(mut self, path: &str, min: Option<f64>, max: Option<f64>) -> Self {
        self.bounds.push(NumericBound { path: path.into(), min, max });
        self
    }

    pub fn validate(&self, value: &Value) -> std::result::Result<(), String> {
        if !value.is_object() {
            return Err("payload is not a JSON object".into());
        }
        for key in &self.required_keys {
            for v in resolve(value, &key.path)? {
                if !key.types.iter().any(|t| t.matches(v)) {
                    return Err(format!("`{}` has type {}, expected one of {:?}", key.path, type_name(v), key.types));
                }
            }
        }
        for b in &self.bounds {
            let Ok(values) = resolve(value, &b.path) else { continue };
            for x in values.into_iter().filter_map(Value::as_f64) {
                if b.min.is_some_and(|m| x < m) || b.max.is_some_and(|m| x > m) {
                    return Err(format!("`{}` = {x} outside [{:?}, {:?}]", b.path, b.min, b.max));
                }
            }
        }
        Ok(())
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Not worth retrying: no credentials, exhausted script, refused request.
    Unavailable(String),
    Timeout(Duration),
    Transient(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestOptions {
    pub model: String,
    pub temperature: f64,
    pub timeout: Duration,
}

pub trait LlmBackend {
    fn id(&self) -> String;
    fn complete(&mut self, prompt: &str, opts: &RequestOptions) -> std::result::Result<String, BackendError>;
}

/// Replays canned responses in order; single consumer.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    responses: VecDeque<String>,
    served: usize,
}

impl ScriptedBackend {
    pub fn new<S: Into<String>>(fixtures: Vec<S>) -> Result<Self> {
        if fixtures.is_empty() {
            return Err(Error::BackendUnavailable("scripted backend needs at least one fixture".into()));
        }
        Ok(Self { responses: fixtures.into_iter().map(Into::into).collect(), served: 0 })
    }

    /// Fixtures from a JSON array of strings, or every file of a directory in name order.
    pub fn from_path(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(io_err(path))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            let texts = files
                .iter()
                .map(|p| std::fs::read_to_string(p).map_err(io_err(p)))
                .collect::<Result<Vec<_>>>()?;
            return Self::new(texts);
        }
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let items: Vec<Value> = serde_json::from_str(&text)?;
        let texts = items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => s,
                other => other.to_string(),
            })
            .collect();
        Self::new(texts)
    }

    /// Drop the first `n` fixtures, e.g. when resuming a run that already consumed them.
    pub fn skip(mut self, n: usize) -> Self {
        for _ in 0..n.min(self.responses.len()) {
            self.responses.pop_front();
            self.served += 1;
        }
        self
    }

    pub fn remaining(&self) -> usize {
        self.responses.len()
    }
}

impl LlmBackend for ScriptedBackend {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn complete(&mut self, _prompt: &str, _opts: &RequestOptions) -> std::result::Result<String, BackendError> {
        match self.responses.pop_front() {
            Some(r) => {
                self.served += 1;
                Ok(r)
            }
            None => Err(BackendError::Unavailable(format!(
                "scripted fixtures exhausted after {} response(s)",
                self.served
            ))),
        }
    }
}

/// Backend that is never reachable.
#[derive(Debug, Clone, Default)]
pub struct OfflineBackend;

impl LlmBackend for OfflineBackend {
    fn id(&self) -> String {
        "offline".into()
    }

    fn complete(&mut self, _prompt: &str, _opts: &RequestOptions) -> std::result::Result<String, BackendError> {
        Err(BackendError::Unavailable("no LLM backend configured".into()))
    }
}

/// OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn from_env() -> Self {
        let api_key = std::env::var(API_KEY_ENV)
            .or_else(|_| std::env::var(FALLBACK_API_KEY_ENV))
            .ok()
            .filter(|k| !k.is_empty());
        let base_url = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        Self { base_url: base_url.trim_end_matches('/').to_string(), api_key }
    }
}

impl LlmBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.base_url)
    }

    fn complete(&mut self, prompt: &str, opts: &RequestOptions) -> std::result::Result<String, BackendError> {
        let key = self
            .api_key
            .as_deref()
            .ok_or_else(|| BackendError::Unavailable(format!("set {API_KEY_ENV} to use the live backend")))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(opts.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let body = json!({
            "model": opts.model,
            "temperature": opts.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut resp = agent
            .post(&format!("{}/chat/completions", self.base_url))
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(&body)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => BackendError::Timeout(opts.timeout),
                other => BackendError::Transient(other.to_string()),
            })?;
        let status = resp.status().as_u16();
        let payload: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transient(format!("unreadable response: {e}")))?;
        match status {
            200..=299 => payload["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| BackendError::Transient("response has no message content".into())),
            408 | 429 | 500..=599 => Err(BackendError::Transient(format!("HTTP {status}: {payload}"))),
            _ => Err(BackendError::Unavailable(format!("HTTP {status}: {payload}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Scripted,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub backend: BackendKind,
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_s: f64,
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Offline,
            model: "gpt-4o".into(),
            temperature: 0.0,
            max_retries: 2,
            timeout_s: 60.0,
            fixtures: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub raw_response: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub prompt: String,
    /// Last raw response received, empty if none arrived.
    pub raw_response: String,
    pub parsed_payload: Option<Value>,
    pub backend_id: String,
    pub attempts: u32,
    pub timestamp: DateTime<Utc>,
    pub attempt_log: Vec<AttemptRecord>,
}

pub struct LlmGateway {
    backend: Box<dyn LlmBackend>,
    config: LlmConfig,
    log_dir: Option<PathBuf>,
    next_index: usize,
    exchanges: Vec<LlmExchange>,
}

impl LlmGateway {
    pub fn new(backend: Box<dyn LlmBackend>, config: LlmConfig) -> Self {
        Self { backend, config, log_dir: None, next_index: 0, exchanges: Vec::new() }
    }

    pub fn scripted<S: Into<String>>(fixtures: Vec<S>) -> Result<Self> {
        let config = LlmConfig { backend: BackendKind::Scripted, ..LlmConfig::default() };
        Ok(Self::new(Box::new(ScriptedBackend::new(fixtures)?), config))
    }

    pub fn offline() -> Self {
        Self::new(Box::new(OfflineBackend), LlmConfig::default())
    }

    /// Build the backend a config asks for; `skip` drops already-consumed scripted fixtures.
    pub fn from_config(config: &LlmConfig, skip: usize) -> Result<Self> {
        let backend: Box<dyn LlmBackend> = match config.backend {
            BackendKind::Live => Box::new(HttpBackend::from_env()),
            BackendKind::Offline => Box::new(OfflineBackend),
            BackendKind::Scripted => {
                let path = config
                    .fixtures
                    .as_ref()
                    .ok_or_else(|| Error::Config("scripted backend requires a fixtures path".into()))?;
                Box::new(ScriptedBackend::from_path(path)?.skip(skip))
            }
        };
        Ok(Self::new(backend, config.clone()))
    }

    /// Persist every exchange to `<dir>/<n>.json`, numbering after existing files.
    pub fn with_log_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        self.next_index = count_exchanges(&dir);
        self.log_dir = Some(dir);
        Ok(self)
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    pub fn exchanges(&self) -> &[LlmExchange] {
        &self.exchanges
    }

    fn record(&mut self, ex: LlmExchange) -> Result<LlmExchange> {
        if let Some(dir) = &self.log_dir {
            artifacts::write_json(&dir.join(format!("{}.json", self.next_index)), &ex)?;
        }
        self.next_index += 1;
        self.exchanges.push(ex.clone());
        Ok(ex)
    }

    /// Send `prompt` until a response carries a JSON object satisfying `schema`.
    ///
    /// `max_retries` defaults to the configured value; at most `max_retries + 1` attempts are made.
    pub fn complete_json(
        &mut self,
        prompt: &str,
        schema: &JsonSchemaSpec,
        max_retries: Option<u32>,
    ) -> Result<(Value, LlmExchange)> {
        let retries = max_retries.unwrap_or(self.config.max_retries);
        let opts = RequestOptions {
            model: self.config.model.clone(),
            temperature: self.config.temperature,
            timeout: Duration::from_secs_f64(self.config.timeout_s.max(0.001)),
        };
        let mut log = Vec::new();
        let mut last_raw = String::new();
        let mut failure = Error::SchemaViolation { attempts: 0, detail: "no attempt made".into() };
        for attempt in 1..=retries + 1 {
            match self.backend.complete(prompt, &opts) {
                Ok(raw) => {
                    let checked = extract_json_block(&raw)
                        .map_err(|e| e.to_string())
                        .and_then(|v| schema.validate(&v).map(|_| v));
                    last_raw = raw.clone();
                    match checked {
                        Ok(value) => {
                            log.push(AttemptRecord { raw_response: Some(raw), error: None });
                            let ex = self.record(LlmExchange {
                                prompt: prompt.to_string(),
                                raw_response: last_raw,
                                parsed_payload: Some(value.clone()),
                                backend_id: self.backend.id(),
                                attempts: attempt,
                                timestamp: Utc::now(),
                                attempt_log: log,
                            })?;
                            return Ok((value, ex));
                        }
                        Err(detail) => {
                            log.push(AttemptRecord { raw_response: Some(raw), error: Some(detail.clone()) });
                            failure = Error::SchemaViolation { attempts: attempt, detail };
                        }
                    }
                }
                Err(BackendError::Unavailable(msg)) => {
                    log.push(AttemptRecord { raw_response: None, error: Some(msg.clone()) });
                    failure = Error::BackendUnavailable(msg);
                    break;
                }
                Err(BackendError::Timeout(d)) => {
                    log.push(AttemptRecord { raw_response: None, error: Some(format!("timeout after {d:?}")) });
                    failure = Error::Timeout(d);
                }
                Err(BackendError::Transient(msg)) => {
                    log.push(AttemptRecord { raw_response: None, error: Some(msg.clone()) });
                    failure = Error::BackendUnavailable(msg);
                }
            }
        }
        let attempts = log.len() as u32;
        self.record(LlmExchange {
            prompt: prompt.to_string(),
            raw_response: last_raw,
            parsed_payload: None,
            backend_id: self.backend.id(),
            attempts,
            timestamp: Utc::now(),
            attempt_log: log,
        })?;
        Err(failure)
    }
}

/// Number of exchange records already stored in `dir`.
pub fn count_exchanges(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                .count()
        })
        .unwrap_or(0)
}

/// Scripted responses consumed by the exchanges logged in `dir` (one per attempt that got a response).
pub fn consumed_responses(dir: &Path) -> usize {
    let mut n = 0;
    for i in 0..count_exchanges(dir) {
        let Ok(text) = std::fs::read_to_string(dir.join(format!("{i}.json"))) else { continue };
        if let Ok(ex) = serde_json::from_str::<LlmExchange>(&text) {
            n += ex.attempt_log.iter().filter(|a| a.raw_response.is_some()).count();
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_x() -> JsonSchemaSpec {
        JsonSchemaSpec::new(vec![("x", vec![JsonType::Integer])])
    }

    #[test]
    fn first_attempt_success() {
        let mut g = LlmGateway::scripted(vec![r#"{"x":1}"#]).unwrap();
        let (v, ex) = g.complete_json("p", &schema_x(), Some(1)).unwrap();
        assert_eq!(v, json!({"x": 1}));
        assert_eq!(ex.attempts, 1);
    }

    #[test]
    fn garbage_then_valid() {
        let mut g = LlmGateway::scripted(vec!["garbage", r#"{"x":2}"#]).unwrap();
        let (v, ex) = g.complete_json("p", &schema_x(), Some(2)).unwrap();
        assert_eq!(v["x"], 2);
        assert_eq!(ex.attempts, 2);
        assert_eq!(ex.attempt_log.len(), 2);
        assert!(ex.attempt_log[0].error.is_some());
    }

    #[test]
    fn exhausted_retries_is_schema_violation() {
        let mut g = LlmGateway::scripted(vec![r#"{"y":1}"#, r#"{"x":"one"}"#, "{}"]).unwrap();
        let err = g.complete_json("p", &schema_x(), Some(2)).unwrap_err();
        assert!(matches!(err, Error::SchemaViolation { attempts: 3, .. }));
        assert!(g.exchanges()[0].parsed_payload.is_none());
    }

    #[test]
    fn scripted_exhaustion() {
        let mut b = ScriptedBackend::new(vec!["a"]).unwrap();
        let o = RequestOptions { model: "m".into(), temperature: 0.0, timeout: Duration::from_secs(1) };
        assert_eq!(b.complete("p", &o).unwrap(), "a");
        assert!(matches!(b.complete("p", &o), Err(BackendError::Unavailable(_))));
        assert!(ScriptedBackend::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn unavailable_is_not_retried() {
        let mut g = LlmGateway::offline();
        let err = g.complete_json("p", &schema_x(), Some(5)).unwrap_err();
        assert!(matches!(err, Error::BackendUnavailable(_)));
        assert_eq!(g.exchanges()[0].attempts, 1);
    }

    #[test]
    fn list_paths_and_bounds() {
        let s = JsonSchemaSpec::new(vec![("items[].r", vec![JsonType::Number])]).with_bounds(
            "items[].r",
            Some(0.0),
            Some(1.0),
        );
        assert!(s.validate(&json!({"items": [{"r": 0.5}, {"r": 0.1}]})).is_ok());
        assert!(s.validate(&json!({"items": {"r": 0.5}})).is_ok());
        assert!(s.validate(&json!({"items": [{"r": 1.5}]})).is_err());
        assert!(s.validate(&json!({"items": [{"q": 0.5}]})).is_err());
    }
}
