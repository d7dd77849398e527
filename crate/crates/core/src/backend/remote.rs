//! OpenAI-compatible HTTP backends.
//!
//! Actions are sampled from `POST {base_url}/chat/completions` with token
//! logprobs. Counterfactual action scores come either from the legacy
//! `POST {base_url}/completions` endpoint with `echo` (exact teacher forcing)
//! or from a chat request asking the model to repeat the action verbatim
//! (approximate).

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    action_span, ActionPolicy, ActionSample, ActionScore, BackendError, DoctorRequest, Embedder, EvolveRequest,
    Guidance, PromptTemplates, SkillDoctor, SkillEvolver, TerminationJudge, TrajectorySummarizer,
};
use crate::env::EnvState;
use crate::skill::Skill;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogprobMode {
    /// No scoring; the gate cannot run.
    None,
    /// Ask the chat endpoint to reproduce the action and read its logprobs.
    #[default]
    ChatApproximate,
    /// Teacher-forced scoring through `/completions` with `echo`.
    CompletionsEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub backoff_ms: u64,
    pub logprob_mode: LogprobMode,
    pub max_tokens: Option<u32>,
    pub max_in_flight: usize,
    pub embedding_model: Option<String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key_env: None,
            temperature: 0.7,
            max_retries: 3,
            timeout_secs: 60.0,
            backoff_ms: 250,
            logprob_mode: LogprobMode::default(),
            max_tokens: None,
            max_in_flight: 8,
            embedding_model: None,
        }
    }
}

impl RemoteConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.base_url.trim().is_empty() {
            return Err("base_url must not be empty".into());
        }
        if self.model.trim().is_empty() {
            return Err("model must not be empty".into());
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(format!("timeout_secs must be positive, got {}", self.timeout_secs));
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        Ok(())
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub content: String,
    pub logprobs: Option<Vec<TokenLogprob>>,
}

/// Sum of logprobs of tokens overlapping the byte range `span`, with token
/// offsets taken from the running concatenation of token texts.
pub fn span_logprob(tokens: &[TokenLogprob], span: (usize, usize)) -> f64 {
    let mut offset = 0;
    let mut sum = 0.0;
    for t in tokens {
        let end = offset + t.token.len();
        if end > span.0 && offset < span.1 {
            sum += t.logprob;
        }
        offset = end;
    }
    sum
}

pub struct ChatClient {
    config: RemoteConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    limit: Semaphore,
}

impl ChatClient {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        config.validate().map_err(BackendError::Capability)?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| BackendError::Capability(format!("API key variable {var} is not set")))?,
            ),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let limit = Semaphore::new(config.max_in_flight);
        Ok(Self {
            config,
            api_key,
            http,
            limit,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// POST with retries on connection failures, 429 and 5xx.
    pub fn post_json(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let _permit = self.limit.acquire();
        let url = self.url(path);
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1u64 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            let mut req = self.http.post(&url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
                    if status.is_success() {
                        return serde_json::from_str(&text)
                            .map_err(|e| BackendError::protocol(format!("response is not JSON: {e}"), text));
                    }
                    last = format!("HTTP {status}: {text}");
                    if !(status.as_u16() == 429 || status.is_server_error()) {
                        return Err(BackendError::Transport(last));
                    }
                }
                Err(e) => last = e.to_string(),
            }
            log::debug!("request to {url} failed (attempt {}): {last}", attempt + 1);
        }
        Err(BackendError::Transport(format!(
            "{} attempt(s) to {url} failed: {last}",
            self.config.max_retries + 1
        )))
    }

    pub fn chat(&self, prompt: &str, temperature: f64, logprobs: bool) -> Result<ChatReply, BackendError> {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "logprobs": logprobs,
        });
        if let Some(max) = self.config.max_tokens {
            body["max_tokens"] = json!(max);
        }
        let resp = self.post_json("chat/completions", &body)?;
        let raw = resp.to_string();
        let choice = &resp["choices"][0];
        let content = choice["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::protocol("no message content", raw.clone()))?
            .to_string();
        let logprobs = match choice["logprobs"]["content"].as_array() {
            Some(items) => Some(
                items
                    .iter()
                    .map(|t| {
                        Some(TokenLogprob {
                            token: t["token"].as_str()?.to_string(),
                            logprob: t["logprob"].as_f64()?,
                        })
                    })
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| BackendError::protocol("malformed token logprobs", raw.clone()))?,
            ),
            None => None,
        };
        Ok(ChatReply { content, logprobs })
    }

    /// Teacher-forced token logprobs of `text`. The first token usually has
    /// no logprob and counts as 0.
    pub fn echo_logprobs(&self, text: &str) -> Result<Vec<TokenLogprob>, BackendError> {
        let body = json!({
            "model": self.config.model,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let resp = self.post_json("completions", &body)?;
        let raw = resp.to_string();
        let lp = &resp["choices"][0]["logprobs"];
        let tokens = lp["tokens"]
            .as_array()
            .ok_or_else(|| BackendError::Capability("completions endpoint returned no echoed tokens".into()))?;
        let values = lp["token_logprobs"]
            .as_array()
            .ok_or_else(|| BackendError::protocol("no token_logprobs", raw.clone()))?;
        if tokens.len() != values.len() {
            return Err(BackendError::protocol("token and logprob counts differ", raw));
        }
        tokens
            .iter()
            .zip(values)
            .map(|(t, v)| {
                Ok(TokenLogprob {
                    token: t
                        .as_str()
                        .ok_or_else(|| BackendError::protocol("non-string token", raw.clone()))?
                        .to_string(),
                    logprob: v.as_f64().unwrap_or(0.0),
                })
            })
            .collect()
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let model = self
            .config
            .embedding_model
            .as_ref()
            .ok_or_else(|| BackendError::Capability("no embedding_model configured".into()))?;
        let resp = self.post_json("embeddings", &json!({"model": model, "input": text}))?;
        resp["data"][0]["embedding"]
            .as_array()
            .and_then(|v| v.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
            .ok_or_else(|| BackendError::protocol("no embedding vector", resp.to_string()))
    }
}

pub struct RemotePolicy {
    client: Arc<ChatClient>,
    templates: PromptTemplates,
    name: String,
}

impl RemotePolicy {
    pub fn new(client: Arc<ChatClient>, templates: PromptTemplates) -> Self {
        let name = client.config.model.clone();
        Self {
            client,
            templates,
            name,
        }
    }
}

impl ActionPolicy for RemotePolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn sample_action(&self, state: &EnvState, skill: &Skill) -> Result<ActionSample, BackendError> {
        let prompt = self.templates.decision_prompt(state, skill);
        let mode = self.client.config.logprob_mode;
        let want_logprobs = mode != LogprobMode::None;
        let mut last_raw = String::new();
        for _ in 0..=self.client.config.max_retries {
            let reply = self
                .client
                .chat(&prompt, self.client.config.temperature, want_logprobs)?;
            let Some(span) = action_span(&reply.content) else {
                last_raw = reply.content;
                continue;
            };
            let logprob = if want_logprobs {
                let tokens = reply
                    .logprobs
                    .as_deref()
                    .ok_or_else(|| BackendError::protocol("reply carries no token logprobs", reply.content.clone()))?;
                span_logprob(tokens, span)
            } else {
                0.0
            };
            return Ok(ActionSample {
                action: reply.content[span.0..span.1].to_string(),
                logprob,
                raw: reply.content,
                prompt,
            });
        }
        Err(BackendError::protocol("no <action> span in reply", last_raw))
    }

    fn action_logprob(&self, state: &EnvState, skill: &Skill, action: &str) -> Result<ActionScore, BackendError> {
        let prompt = self.templates.decision_prompt(state, skill);
        match self.client.config.logprob_mode {
            LogprobMode::None => Err(BackendError::Capability(format!(
                "backend {} is configured without logprobs",
                self.name
            ))),
            LogprobMode::CompletionsEcho => {
                let prefix = format!("{prompt}\n<action>");
                let text = format!("{prefix}{action}</action>");
                let tokens = self.client.echo_logprobs(&text)?;
                Ok(ActionScore {
                    logprob: span_logprob(&tokens, (prefix.len(), prefix.len() + action.len())),
                    approximate: false,
                })
            }
            LogprobMode::ChatApproximate => {
                let forced =
                    format!("{prompt}\n\nReply with exactly this line and nothing else:\n<action>{action}</action>");
                let reply = self.client.chat(&forced, 0.0, true)?;
                let span = action_span(&reply.content)
                    .filter(|(a, b)| &reply.content[*a..*b] == action)
                    .ok_or_else(|| {
                        BackendError::protocol("model did not reproduce the action", reply.content.clone())
                    })?;
                let tokens = reply
                    .logprobs
                    .as_deref()
                    .ok_or_else(|| BackendError::protocol("reply carries no token logprobs", reply.content.clone()))?;
                Ok(ActionScore {
                    logprob: span_logprob(tokens, span),
                    approximate: true,
                })
            }
        }
    }
}

pub struct RemoteJudge {
    client: Arc<ChatClient>,
    templates: PromptTemplates,
}

impl RemoteJudge {
    pub fn new(client: Arc<ChatClient>, templates: PromptTemplates) -> Self {
        Self { client, templates }
    }
}

impl TerminationJudge for RemoteJudge {
    fn judge_raw(&self, state: &EnvState, skill: &Skill) -> Result<String, BackendError> {
        let prompt = self.templates.termination_prompt(state, skill);
        Ok(self.client.chat(&prompt, 0.0, false)?.content)
    }
}

pub struct RemoteDoctor {
    client: Arc<ChatClient>,
    templates: PromptTemplates,
}

impl RemoteDoctor {
    pub fn new(client: Arc<ChatClient>, templates: PromptTemplates) -> Self {
        Self { client, templates }
    }
}

impl SkillDoctor for RemoteDoctor {
    fn diagnose(&self, request: &DoctorRequest<'_>) -> Result<String, BackendError> {
        let prompt = self
            .templates
            .doctor_prompt(request.skill, request.transcript, request.reward);
        Ok(self
            .client
            .chat(&prompt, self.client.config.temperature, false)?
            .content)
    }
}

pub struct RemoteEvolver {
    client: Arc<ChatClient>,
    templates: PromptTemplates,
}

impl RemoteEvolver {
    pub fn new(client: Arc<ChatClient>, templates: PromptTemplates) -> Self {
        Self { client, templates }
    }
}

impl SkillEvolver for RemoteEvolver {
    fn evolve(&self, request: &EvolveRequest<'_>) -> Result<String, BackendError> {
        let prompt = match request.guidance {
            Guidance::Gradient(g) => self.templates.evolver_prompt(
                request.parent,
                &g.describe(),
                request.candidate_index,
                request.n_candidates,
            ),
            Guidance::Summaries { summaries } => self.templates.evolver_no_sg_prompt(request.parent, summaries),
        };
        Ok(self
            .client
            .chat(&prompt, self.client.config.temperature, false)?
            .content)
    }
}

pub struct RemoteSummarizer {
    client: Arc<ChatClient>,
    templates: PromptTemplates,
}

impl RemoteSummarizer {
    pub fn new(client: Arc<ChatClient>, templates: PromptTemplates) -> Self {
        Self { client, templates }
    }
}

impl TrajectorySummarizer for RemoteSummarizer {
    fn summarize(&self, transcript: &str, reward: f64) -> Result<String, BackendError> {
        let prompt = self.templates.summarizer_prompt(transcript, reward);
        Ok(self.client.chat(&prompt, 0.0, false)?.content)
    }
}

pub struct RemoteEmbedder {
    client: Arc<ChatClient>,
}

impl RemoteEmbedder {
    pub fn new(client: Arc<ChatClient>) -> Self {
        Self { client }
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.client.embed(text)
    }
}
