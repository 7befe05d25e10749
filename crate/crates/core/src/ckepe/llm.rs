use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::error::{MerlError, Result};
use crate::text::normalize_term;

const QUERY_HEAD: &str = "Which attributes and subtypes does ";
const QUERY_TAIL: &str = " have? If this condition specifically describes symptoms or a subtype, please refrain from answering; otherwise, generate all possible scenarios.";

/// Appended to every query so responses follow a fixed two-line grammar.
pub const FORMAT_INSTRUCTIONS: &str = "\n\nAnswer with exactly two lines:\nSubtypes: <term>; <term>; ...\nAttributes: <term>; <term>; ...\nWrite NONE after a label when the list is empty. If you refrain from answering, reply with the single word NONE.";

/// Query for one condition, instructions included.
pub fn query_text(condition: &str) -> String {
    format!("{QUERY_HEAD}{condition}{QUERY_TAIL}{FORMAT_INSTRUCTIONS}")
}

/// Recovers the condition from a query built by [`query_text`].
pub fn condition_of(query: &str) -> Option<&str> {
    let rest = query.strip_prefix(QUERY_HEAD)?;
    let end = rest.find(QUERY_TAIL)?;
    Some(&rest[..end])
}

pub trait LlmClient: Send + Sync {
    fn send(&self, prompt: &str) -> Result<String>;
}

/// Replays recorded responses keyed by (normalised) condition.
#[derive(Debug, Clone, Default)]
pub struct FixtureClient {
    responses: BTreeMap<String, String>,
}

impl FixtureClient {
    pub fn new(responses: impl IntoIterator<Item = (String, String)>) -> Self {
        FixtureClient {
            responses: responses.into_iter().map(|(k, v)| (normalize_term(&k), v)).collect(),
        }
    }

    /// JSON object mapping condition to raw response text.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MerlError::io(path, e))?;
        let map: BTreeMap<String, String> = serde_json::from_str(&text)?;
        Ok(Self::new(map))
    }
}

impl LlmClient for FixtureClient {
    fn send(&self, prompt: &str) -> Result<String> {
        let condition = condition_of(prompt)
            .ok_or_else(|| MerlError::LlmTransport("fixture client only answers condition queries".into()))?;
        self.responses
            .get(&normalize_term(condition))
            .cloned()
            .ok_or_else(|| MerlError::LlmTransport(format!("no recorded response for {condition:?}")))
    }
}

/// Chat-completions style HTTP client. The key is read from the named
/// environment variable at request time and never stored.
pub struct LiveClient {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout: Duration,
    pub min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl LiveClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        LiveClient {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: api_key_env.into(),
            timeout: Duration::from_secs(60),
            min_interval: Duration::from_secs(1),
            last: Mutex::new(None),
        }
    }

    fn throttle(&self) {
        let mut last = self.last.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(t) = *last {
            let wait = self.min_interval.saturating_sub(t.elapsed());
            if !wait.is_zero() {
                std::thread::sleep(wait);
            }
        }
        *last = Some(Instant::now());
    }
}

impl LlmClient for LiveClient {
    fn send(&self, prompt: &str) -> Result<String> {
        let key = std::env::var(&self.api_key_env)
            .map_err(|_| MerlError::LlmTransport(format!("environment variable {} is not set", self.api_key_env)))?;
        self.throttle();
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let resp: serde_json::Value = ureq::post(&self.endpoint)
            .timeout(self.timeout)
            .set("Authorization", &format!("Bearer {key}"))
            .send_json(body)
            .map_err(|e| MerlError::LlmTransport(e.to_string()))?
            .into_json()
            .map_err(|e| MerlError::LlmTransport(e.to_string()))?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(String::from)
            .ok_or_else(|| MerlError::LlmTransport("response has no choices[0].message.content".into()))
    }
}
