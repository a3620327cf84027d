//! Chat-completions client with retries, client-side rate limiting and
//! bounded concurrency.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::prompt::PromptBundle;
use crate::{GatewayError, Result};

pub const ANSWER_MARKER: &str = "Answers:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL; `/chat/completions` is appended unless already present.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: usize,
    pub backoff_ms: u64,
    /// Requests per second across all workers; `None` disables the limit.
    pub qps: Option<f64>,
    pub concurrency: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8089/v1".into(),
            model: "reader".into(),
            token_env: None,
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 250,
            qps: None,
            concurrency: 4,
        }
    }
}

impl EndpointConfig {
    pub fn url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_owned()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerOutcome {
    pub answers: Vec<String>,
    pub parse_failed: bool,
    pub response: String,
    pub retries: usize,
}

/// Audit record, one JSON line per query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub query_id: String,
    pub prompt: String,
    pub response: String,
    pub answers: Vec<String>,
}

impl Transcript {
    pub fn write_jsonl(items: &[Transcript], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e: std::io::Error| GatewayError::Io { path: path.display().to_string(), source: e };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for t in items {
            let line = serde_json::to_string(t).map_err(|e| GatewayError::Response(e.to_string()))?;
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Answers listed after the last `Answers:` marker, one per line. Text on
/// the marker line itself counts as the first answer. Bullets are stripped
/// and duplicates dropped. Returns `(answers, parse_failed)`.
pub fn parse_answers(text: &str) -> (Vec<String>, bool) {
    let Some(pos) = text.rfind(ANSWER_MARKER) else {
        return (Vec::new(), true);
    };
    let mut out: Vec<String> = Vec::new();
    for line in text[pos + ANSWER_MARKER.len()..].lines() {
        let a = line.trim().trim_start_matches(['-', '*', '•']).trim();
        if !a.is_empty() && !out.iter().any(|o| o == a) {
            out.push(a.to_owned());
        }
    }
    (out, false)
}

enum Attempt {
    Retry(String),
    Fatal(GatewayError),
}

pub struct Client {
    config: EndpointConfig,
    agent: ureq::Agent,
    token: Option<String>,
    next_slot: Mutex<Instant>,
    retries_logged: AtomicUsize,
}

impl Client {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        if config.concurrency == 0 {
            return Err(GatewayError::Config("concurrency must be at least 1".into()));
        }
        if config.qps.is_some_and(|q| !(q > 0.0)) {
            return Err(GatewayError::Config("qps must be positive".into()));
        }
        let token = match &config.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::Config(format!("environment variable {var} is not set")))?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, agent, token, next_slot: Mutex::new(Instant::now()), retries_logged: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// Retries performed so far by this client.
    pub fn retries(&self) -> usize {
        self.retries_logged.load(Ordering::Relaxed)
    }

    fn wait_for_slot(&self) {
        let Some(qps) = self.config.qps else { return };
        let wait = {
            let mut next = self.next_slot.lock().expect("rate limiter lock");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + Duration::from_secs_f64(1.0 / qps);
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    fn request_body(&self, bundle: &PromptBundle) -> String {
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": bundle.system},
                {"role": "user", "content": bundle.user},
            ],
            "temperature": bundle.decoding.temperature,
            "top_p": bundle.decoding.top_p,
            "max_tokens": bundle.decoding.max_tokens,
        })
        .to_string()
    }

    fn attempt(&self, body: &str) -> std::result::Result<String, Attempt> {
        self.wait_for_slot();
        let mut req = self.agent.post(self.config.url()).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => return Err(Attempt::Retry(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => Ok(text),
            429 | 500..=599 => Err(Attempt::Retry(format!("HTTP {status}"))),
            _ => Err(Attempt::Fatal(GatewayError::Http { status, body: text })),
        }
    }

    /// Sends one prompt and parses the reply. Transport errors, timeouts,
    /// 429 and 5xx are retried with exponential backoff; other 4xx are not.
    pub fn answer(&self, query_id: &str, bundle: &PromptBundle) -> Result<AnswerOutcome> {
        let body = self.request_body(bundle);
        let mut retries = 0;
        loop {
            match self.attempt(&body) {
                Ok(text) => {
                    let content = extract_content(&text)?;
                    let (answers, parse_failed) = parse_answers(&content);
                    if parse_failed {
                        log::warn!("{query_id}: no {ANSWER_MARKER:?} marker in response");
                    }
                    return Ok(AnswerOutcome { answers, parse_failed, response: content, retries });
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(why)) => {
                    if retries >= self.config.max_retries {
                        return Err(GatewayError::Exhausted { attempts: retries + 1, last: why });
                    }
                    let delay = self.config.backoff_ms.saturating_mul(1 << retries.min(16));
                    retries += 1;
                    self.retries_logged.fetch_add(1, Ordering::Relaxed);
                    log::warn!("{query_id}: {why}; retry {retries}/{} in {delay} ms", self.config.max_retries);
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
        }
    }
}

fn extract_content(body: &str) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| GatewayError::Response(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_owned)
        .ok_or_else(|| GatewayError::Response("missing choices[0].message.content".into()))
}

/// Answers every `(query_id, bundle)` with at most `concurrency` requests in
/// flight. Results come back in input order.
pub fn answer_all(client: &Client, items: &[(String, PromptBundle)]) -> Vec<Result<AnswerOutcome>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<AnswerOutcome>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let workers = client.config.concurrency.min(items.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((id, bundle)) = items.get(i) else { break };
                let r = client.answer(id, bundle);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every item answered"))
        .collect()
}
