//! Chat-completion execution and explanation records.
//!
//! Prompts go to an OpenAI-compatible endpoint or to [`MockBackend`], a
//! scripted stand-in keyed by prompt digest that keeps whole experiments
//! deterministic. Every response is stored verbatim before validation.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

use crate::corpus::{Label, PairKey};
use crate::detector::Prediction;
use crate::kln::{ClassBalance, KlnSize, NeighborhoodSet};
use crate::prompt::parse_rendered_target;

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_CREDENTIAL_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LlmError {
    #[error("credential environment variable `{0}` is not set")]
    MissingCredential(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("prompt of ~{estimated} tokens exceeds the budget of {budget}")]
    ContextLength { estimated: usize, budget: usize },
    #[error("request rejected: {0}")]
    BadRequest(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl LlmError {
    /// Whether another attempt may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            LlmError::RateLimited(_) | LlmError::Timeout | LlmError::Transport(_) | LlmError::Server { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureMode {
    /// Provider default: the parameter is left out of the request.
    Default,
    Zero,
}

impl TemperatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TemperatureMode::Default => "default",
            TemperatureMode::Zero => "zero",
        }
    }

    pub fn temperature(self) -> Option<f64> {
        match self {
            TemperatureMode::Default => None,
            TemperatureMode::Zero => Some(0.0),
        }
    }
}

impl fmt::Display for TemperatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemperatureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "default" => Ok(TemperatureMode::Default),
            "zero" | "0" => Ok(TemperatureMode::Zero),
            other => Err(format!("unknown temperature mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub model_name: String,
    pub temperature_mode: TemperatureMode,
    pub max_retries: u32,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub endpoint: String,
    /// Name of the environment variable holding the API key. The key itself
    /// is never stored.
    pub credential_env: String,
    /// Upper bound on the estimated prompt size, in tokens.
    pub token_budget: usize,
    /// First retry delay; doubles on each further retry.
    pub backoff_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            model_name: "gpt-4".into(),
            temperature_mode: TemperatureMode::Default,
            max_retries: 3,
            timeout: Duration::from_secs(120),
            endpoint: DEFAULT_ENDPOINT.into(),
            credential_env: DEFAULT_CREDENTIAL_ENV.into(),
            token_budget: 8192,
            backoff_ms: 1000,
        }
    }
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// Rough token count: one token per four bytes, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// A single-message chat request.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: Option<f64>,
}

impl ChatRequest {
    /// OpenAI-compatible request body. The temperature key is absent in
    /// default mode.
    pub fn body(&self) -> serde_json::Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": self.prompt}],
        });
        if let Some(t) = self.temperature {
            body["temperature"] = json!(t);
        }
        body
    }
}

/// Something that answers chat requests.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

/// Sends `prompt` and returns the assistant message text, retrying
/// transient failures up to `config.max_retries` times.
pub fn complete(prompt: &str, config: &LlmConfig, backend: &dyn ChatBackend) -> Result<String, LlmError> {
    let estimated = estimate_tokens(prompt);
    if estimated > config.token_budget {
        return Err(LlmError::ContextLength {
            estimated,
            budget: config.token_budget,
        });
    }
    let request = ChatRequest {
        model: config.model_name.clone(),
        prompt: prompt.to_string(),
        temperature: config.temperature_mode.temperature(),
    };
    let mut attempt = 0;
    loop {
        match backend.send(&request) {
            Ok(text) => return Ok(text),
            Err(err) if err.is_transient() && attempt < config.max_retries => {
                let delay = config.backoff_ms.saturating_mul(1 << attempt.min(16));
                warn!(attempt = attempt + 1, %err, delay_ms = delay, "retrying chat completion");
                std::thread::sleep(Duration::from_millis(delay));
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}

/// OpenAI-compatible HTTP backend.
pub struct OpenAiBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
}

impl fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpenAiBackend")
            .field("endpoint", &self.endpoint)
            .field("api_key", &"<redacted>")
            .finish()
    }
}

impl OpenAiBackend {
    /// Reads the API key from `config.credential_env`.
    pub fn from_env(config: &LlmConfig) -> Result<Self, LlmError> {
        let api_key = std::env::var(&config.credential_env)
            .map_err(|_| LlmError::MissingCredential(config.credential_env.clone()))?;
        Self::new(config, api_key)
    }

    pub fn new(config: &LlmConfig, api_key: String) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(OpenAiBackend {
            client,
            endpoint: config.endpoint.clone(),
            api_key,
        })
    }
}

impl ChatBackend for OpenAiBackend {
    fn send(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&request.body())
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    LlmError::Timeout
                } else {
                    LlmError::Transport(e.to_string())
                }
            })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        debug!(status, bytes = body.len(), "chat completion response");
        match status {
            200..=299 => {
                let value: serde_json::Value =
                    serde_json::from_str(&body).map_err(|e| LlmError::Malformed(e.to_string()))?;
                value["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| LlmError::Malformed("missing choices[0].message.content".into()))
            }
            401 | 403 => Err(LlmError::Auth(error_message(&body))),
            429 => Err(LlmError::RateLimited(error_message(&body))),
            400 if body.contains("context_length_exceeded") => Err(LlmError::ContextLength {
                estimated: estimate_tokens(&request.prompt),
                budget: 0,
            }),
            400..=499 => Err(LlmError::BadRequest(error_message(&body))),
            _ => Err(LlmError::Server {
                status,
                body: error_message(&body),
            }),
        }
    }
}

fn error_message(body: &str) -> String {
    serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v["error"]["message"].as_str().map(str::to_string))
        .unwrap_or_else(|| body.chars().take(200).collect())
}

/// Hex SHA-256 of a prompt; the key of scripted mock responses.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Failure kinds a mock can be scripted to return before succeeding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScriptedFailure {
    RateLimit,
    Timeout,
    Transport,
    Server,
    Auth,
}

impl ScriptedFailure {
    fn error(self) -> LlmError {
        match self {
            ScriptedFailure::RateLimit => LlmError::RateLimited("scripted".into()),
            ScriptedFailure::Timeout => LlmError::Timeout,
            ScriptedFailure::Transport => LlmError::Transport("scripted".into()),
            ScriptedFailure::Server => LlmError::Server {
                status: 503,
                body: "scripted".into(),
            },
            ScriptedFailure::Auth => LlmError::Auth("scripted".into()),
        }
    }
}

/// Settings of the mock's built-in explainer, which answers any rendered
/// prompt with a well-formed explanation of the target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticExplainer {
    pub lines_per_snippet: usize,
    /// Probability that the stated verdict contradicts the prediction.
    pub wrong_verdict_rate: f64,
    /// Probability that a cited line is altered by one token.
    pub altered_line_rate: f64,
}

impl Default for SyntheticExplainer {
    fn default() -> Self {
        SyntheticExplainer {
            lines_per_snippet: 5,
            wrong_verdict_rate: 0.0,
            altered_line_rate: 0.0,
        }
    }
}

/// Mock script, usually read from JSON.
///
/// Resolution order per call: queued failures, then a response scripted for
/// the prompt digest, then the synthetic explainer, then `default`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockScript {
    pub failures: Vec<ScriptedFailure>,
    pub responses: BTreeMap<String, String>,
    pub synthetic: Option<SyntheticExplainer>,
    pub default: Option<String>,
}

impl MockScript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RecordError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RecordError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| RecordError::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Deterministic chat backend.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    failures: Mutex<VecDeque<ScriptedFailure>>,
    calls: AtomicUsize,
    requests: Mutex<Vec<ChatRequest>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let failures = Mutex::new(script.failures.iter().copied().collect());
        MockBackend {
            script,
            failures,
            calls: AtomicUsize::new(0),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Always answers `text`.
    pub fn echo(text: impl Into<String>) -> Self {
        Self::new(MockScript {
            default: Some(text.into()),
            ..MockScript::default()
        })
    }

    pub fn synthetic(settings: SyntheticExplainer) -> Self {
        Self::new(MockScript {
            synthetic: Some(settings),
            ..MockScript::default()
        })
    }

    /// Number of `send` calls, failed ones included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Requests seen so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("mock lock").clone()
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, request: &ChatRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.requests.lock().expect("mock lock").push(request.clone());
        if let Some(failure) = self.failures.lock().expect("mock lock").pop_front() {
            return Err(failure.error());
        }
        let digest = prompt_digest(&request.prompt);
        if let Some(text) = self.script.responses.get(&digest) {
            return Ok(text.clone());
        }
        if let Some(settings) = &self.script.synthetic {
            if let Some(text) = synthetic_explanation(&request.prompt, &digest, settings) {
                return Ok(text);
            }
        }
        self.script
            .default
            .clone()
            .ok_or_else(|| LlmError::Malformed(format!("no scripted response for prompt {digest}")))
    }
}

fn synthetic_explanation(prompt: &str, digest: &str, settings: &SyntheticExplainer) -> Option<String> {
    let target = parse_rendered_target(prompt)?;
    let seed = u64::from_str_radix(&digest[..16], 16).ok()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let verdict = if rng.gen_bool(settings.wrong_verdict_rate.clamp(0.0, 1.0)) {
        target.label.flipped()
    } else {
        target.label
    };
    let mut cite = |code: &[String]| -> Vec<String> {
        let candidates: Vec<&String> = code.iter().filter(|l| !l.trim().is_empty()).collect();
        let n = settings.lines_per_snippet.min(candidates.len());
        let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), n).into_vec();
        picked.sort_unstable();
        picked
            .into_iter()
            .map(|i| {
                let line = candidates[i].trim().to_string();
                if rng.gen_bool(settings.altered_line_rate.clamp(0.0, 1.0)) {
                    format!("{line} extra")
                } else {
                    line
                }
            })
            .collect()
    };
    let lines_a = cite(&target.code_a);
    let lines_b = cite(&target.code_b);
    let summary = match verdict {
        Label::Clone => "The model considers the target code pair a clone: both snippets read the \
                         number of test cases, loop over them, and compute the answer with the same \
                         arithmetic structure.",
        Label::NonClone => "The model considers the target code pair a non-clone: the snippets solve \
                            different problems and their core loops compute unrelated results.",
    };
    let list = |lines: &[String]| {
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{}. `{l}`", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    };
    Some(format!(
        "{summary}\n\n### Code 1\n\n{}\n\n### Code 2\n\n{}\n",
        list(&lines_a),
        list(&lines_b)
    ))
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema mismatch in {path}: {message}")]
    Schema { path: PathBuf, message: String },
}

/// One explanation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationRecord {
    pub record_id: String,
    pub pair_key: PairKey,
    pub size: KlnSize,
    pub temperature_mode: TemperatureMode,
    pub run_index: u32,
    pub seed: u64,
    pub target_prediction: Prediction,
    pub neighborhood: NeighborhoodSet,
    pub class_balance: ClassBalance,
    pub prompt_text: String,
    pub raw_response: String,
    pub model_name: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

pub fn record_path(dir: &Path, record_id: &str) -> PathBuf {
    dir.join(format!("{record_id}.json"))
}

pub fn response_path(dir: &Path, record_id: &str) -> PathBuf {
    dir.join(format!("{record_id}.md"))
}

/// Writes `<record_id>.json` and the Markdown sidecar `<record_id>.md` into
/// `dir`. Each file appears atomically.
pub fn save_record(record: &ExplanationRecord, dir: &Path) -> Result<PathBuf, RecordError> {
    let json = serde_json::to_vec_pretty(record).expect("records serialize");
    write_atomic(&response_path(dir, &record.record_id), record.raw_response.as_bytes())?;
    let path = record_path(dir, &record.record_id);
    write_atomic(&path, &json)?;
    Ok(path)
}

pub fn load_record(path: impl AsRef<Path>) -> Result<ExplanationRecord, RecordError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| RecordError::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// The record as JSON without its timestamps, for reproducibility checks.
pub fn canonical_json(record: &ExplanationRecord) -> String {
    let mut value = serde_json::to_value(record).expect("records serialize");
    if let Some(map) = value.as_object_mut() {
        map.remove("started_at");
        map.remove("finished_at");
    }
    serde_json::to_string(&value).expect("values serialize")
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RecordError> {
    let io = |source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
