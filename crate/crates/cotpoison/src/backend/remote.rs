//! HTTP chat-completion backend.
//!
//! Speaks the de-facto hosted-model wire shape: POST a JSON body with a
//! `messages` array (system + user roles) and read back `choices` with
//! message content, a finish reason, and optional per-token logprobs.
//! Endpoint, credential, and model name come from config or environment:
//!
//! - `COTPOISON_ENDPOINT` — chat completions URL
//! - `COTPOISON_API_KEY` — bearer credential (optional)
//! - `COTPOISON_MODEL` — model name
//! - `COTPOISON_SCORING_ENDPOINT` — completions-style endpoint used for
//!   token scoring via `echo` + `logprobs`; scoring is unsupported without it.

use serde::{Deserialize, Serialize};

use super::{BackendError, GenerationRequest, RawGeneration, TextBackend};

pub const ENV_ENDPOINT: &str = "COTPOISON_ENDPOINT";
pub const ENV_API_KEY: &str = "COTPOISON_API_KEY";
pub const ENV_MODEL: &str = "COTPOISON_MODEL";
pub const ENV_SCORING_ENDPOINT: &str = "COTPOISON_SCORING_ENDPOINT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring_endpoint: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

impl RemoteConfig {
    /// Read endpoint, credential, and model from the environment.
    pub fn from_env() -> Result<Self, BackendError> {
        let endpoint = std::env::var(ENV_ENDPOINT).map_err(|_| {
            BackendError::InvalidRequest(format!("{ENV_ENDPOINT} is not set"))
        })?;
        let model = std::env::var(ENV_MODEL).map_err(|_| {
            BackendError::InvalidRequest(format!("{ENV_MODEL} is not set"))
        })?;
        Ok(RemoteConfig {
            endpoint,
            api_key: std::env::var(ENV_API_KEY).ok(),
            model,
            scoring_endpoint: std::env::var(ENV_SCORING_ENDPOINT).ok(),
            timeout_secs: default_timeout_secs(),
        })
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: usize,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    logprobs: bool,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessageBody,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChatMessageBody {
    content: String,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Vec<TokenLogprob>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    logprob: f64,
}

#[derive(Serialize)]
struct ScoringRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    echo: bool,
    logprobs: u32,
}

#[derive(Deserialize)]
struct ScoringResponse {
    choices: Vec<ScoringChoice>,
}

#[derive(Deserialize)]
struct ScoringChoice {
    logprobs: ScoringLogprobs,
}

#[derive(Deserialize)]
struct ScoringLogprobs {
    /// First entry is null: the first token has no conditional probability.
    token_logprobs: Vec<Option<f64>>,
}

pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::InvalidRequest(format!("http client: {e}")))?;
        Ok(RemoteBackend { config, client })
    }

    fn post_json<B: Serialize>(
        &self,
        url: &str,
        body: &B,
    ) -> Result<serde_json::Value, BackendError> {
        let mut request = self.client.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| BackendError::Transient(format!("request failed: {e}")))?;

        let status = response.status();
        let text = response
            .text()
            .map_err(|e| BackendError::Transient(format!("unreadable body: {e}")))?;

        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(BackendError::AuthFailure(format!("http {status}: {text}")));
        }
        if status.as_u16() == 408 || status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("http {status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendError::InvalidRequest(format!("http {status}: {text}")));
        }
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Transient(format!("unparseable reply: {e}")))
    }
}

impl TextBackend for RemoteBackend {
    fn backend_id(&self) -> String {
        format!("remote:{}:{}", self.config.endpoint, self.config.model)
    }

    fn generate_once(&self, request: &GenerationRequest) -> Result<RawGeneration, BackendError> {
        let mut messages = Vec::with_capacity(2);
        if !request.system_instruction.is_empty() {
            messages.push(WireMessage {
                role: "system",
                content: &request.system_instruction,
            });
        }
        messages.push(WireMessage {
            role: "user",
            content: &request.user_message,
        });

        let body = ChatRequest {
            model: &self.config.model,
            messages,
            temperature: request.sampling.temperature,
            max_tokens: request.sampling.max_tokens,
            logprobs: request.want_logprobs,
        };

        let value = self.post_json(&self.config.endpoint, &body)?;
        let parsed: ChatResponse = serde_json::from_value(value)
            .map_err(|e| BackendError::Transient(format!("bad chat reply shape: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Transient("no choices in reply".into()))?;

        let truncated = choice.finish_reason.as_deref() == Some("length");
        let token_logprobs = choice
            .logprobs
            .map(|lp| lp.content.into_iter().map(|t| t.logprob).collect());

        Ok(RawGeneration {
            text: choice.message.content,
            token_logprobs,
            truncated,
        })
    }

    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let Some(scoring_url) = &self.config.scoring_endpoint else {
            return Err(BackendError::ScoringUnsupported(
                "no scoring endpoint configured".into(),
            ));
        };
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let body = ScoringRequest {
            model: &self.config.model,
            prompt: text,
            max_tokens: 0,
            echo: true,
            logprobs: 0,
        };
        let value = self.post_json(scoring_url, &body)?;
        let parsed: ScoringResponse = serde_json::from_value(value)
            .map_err(|e| BackendError::Transient(format!("bad scoring reply shape: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Transient("no choices in scoring reply".into()))?;
        Ok(choice
            .logprobs
            .token_logprobs
            .into_iter()
            .flatten()
            .collect())
    }
}
