//! Deterministic scripted backend for tests and offline pipeline runs.
//!
//! A [`MockScript`] is a table of replies keyed by the exact
//! `(system_instruction, user_message)` pair, with optional substring rules
//! as a fallback for fixtures that cannot spell out full prompts. Each entry
//! holds an ordered reply list: calls consume replies in order and repeat
//! the last one once exhausted, which makes fail-then-succeed retry tests
//! and repeated identical calls both expressible.
//!
//! Token scoring is deterministic: the script assigns a log-probability per
//! whitespace token, with substring-matched overrides so fixtures can give
//! chosen texts distinctive perplexities.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, GenerationRequest, RawGeneration, TextBackend};
use crate::hashing::sha256_hex;

/// One scripted reply: a text (possibly marked truncated), a transient
/// failure, or an authentication failure.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text {
        text: String,
        #[serde(default)]
        truncated: bool,
    },
    Fail { fail: String },
    AuthFail { auth_fail: String },
}

impl MockReply {
    pub fn text(text: impl Into<String>) -> Self {
        MockReply::Text {
            text: text.into(),
            truncated: false,
        }
    }

    pub fn truncated_text(text: impl Into<String>) -> Self {
        MockReply::Text {
            text: text.into(),
            truncated: true,
        }
    }

    pub fn fail(message: impl Into<String>) -> Self {
        MockReply::Fail {
            fail: message.into(),
        }
    }

    pub fn auth_fail(message: impl Into<String>) -> Self {
        MockReply::AuthFail {
            auth_fail: message.into(),
        }
    }
}

/// Exact-match script entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(default)]
    pub system: String,
    pub user: String,
    pub replies: Vec<MockReply>,
}

/// Substring-match script entry; both `contains` filters must hit (an absent
/// filter always hits). Rules are tried in file order after exact entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub system_contains: Option<String>,
    #[serde(default)]
    pub user_contains: Option<String>,
    pub replies: Vec<MockReply>,
}

/// Per-token log-probability override for texts containing a marker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogprobRule {
    pub contains: String,
    pub per_token: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogprobConfig {
    #[serde(default = "default_per_token")]
    pub default_per_token: f64,
    #[serde(default)]
    pub rules: Vec<LogprobRule>,
}

fn default_per_token() -> f64 {
    -0.5
}

impl Default for LogprobConfig {
    fn default() -> Self {
        LogprobConfig {
            default_per_token: default_per_token(),
            rules: Vec::new(),
        }
    }
}

/// Full mock configuration, loadable from a JSON file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub entries: Vec<MockEntry>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub logprobs: LogprobConfig,
}

impl MockScript {
    pub fn add_exact(&mut self, system: &str, user: &str, replies: Vec<MockReply>) {
        self.entries.push(MockEntry {
            system: system.into(),
            user: user.into(),
            replies,
        });
    }

    pub fn add_rule(
        &mut self,
        system_contains: Option<&str>,
        user_contains: Option<&str>,
        replies: Vec<MockReply>,
    ) {
        self.rules.push(MockRule {
            system_contains: system_contains.map(str::to_string),
            user_contains: user_contains.map(str::to_string),
            replies,
        });
    }
}

/// Scripted deterministic [`TextBackend`].
pub struct MockBackend {
    script: MockScript,
    exact_index: HashMap<(String, String), usize>,
    /// Reply cursor per entry; rules are indexed after exact entries.
    cursors: Mutex<HashMap<usize, usize>>,
    id: String,
}

impl MockBackend {
    pub fn from_script(script: MockScript) -> Self {
        let exact_index = script
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.system.clone(), e.user.clone()), i))
            .collect();
        let fingerprint =
            sha256_hex(serde_json::to_string(&script).expect("script serializes").as_bytes());
        MockBackend {
            script,
            exact_index,
            cursors: Mutex::new(HashMap::new()),
            id: format!("mock:{}", &fingerprint[..12]),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            BackendError::InvalidRequest(format!("cannot read mock script {}: {e}", path.display()))
        })?;
        let script: MockScript = serde_json::from_str(&raw).map_err(|e| {
            BackendError::InvalidRequest(format!("bad mock script {}: {e}", path.display()))
        })?;
        Ok(MockBackend::from_script(script))
    }

    fn replies_for(&self, request: &GenerationRequest) -> Option<(usize, &[MockReply])> {
        let key = (
            request.system_instruction.clone(),
            request.user_message.clone(),
        );
        if let Some(&i) = self.exact_index.get(&key) {
            return Some((i, &self.script.entries[i].replies));
        }
        for (j, rule) in self.script.rules.iter().enumerate() {
            let sys_ok = rule
                .system_contains
                .as_deref()
                .is_none_or(|needle| request.system_instruction.contains(needle));
            let user_ok = rule
                .user_contains
                .as_deref()
                .is_none_or(|needle| request.user_message.contains(needle));
            if sys_ok && user_ok {
                return Some((self.script.entries.len() + j, &rule.replies));
            }
        }
        None
    }

    fn take_reply(&self, entry_idx: usize, replies: &[MockReply]) -> MockReply {
        let mut cursors = self.cursors.lock().expect("cursor lock poisoned");
        let cursor = cursors.entry(entry_idx).or_insert(0);
        let reply = replies[(*cursor).min(replies.len() - 1)].clone();
        *cursor += 1;
        reply
    }

    fn logprobs_for(&self, text: &str) -> Vec<f64> {
        let per_token = self
            .script
            .logprobs
            .rules
            .iter()
            .find(|r| text.contains(r.contains.as_str()))
            .map(|r| r.per_token)
            .unwrap_or(self.script.logprobs.default_per_token);
        text.split_whitespace().map(|_| per_token).collect()
    }
}

fn prefix(s: &str) -> String {
    s.chars().take(40).collect()
}

impl TextBackend for MockBackend {
    fn backend_id(&self) -> String {
        self.id.clone()
    }

    fn generate_once(&self, request: &GenerationRequest) -> Result<RawGeneration, BackendError> {
        let Some((idx, replies)) = self.replies_for(request) else {
            return Err(BackendError::Unscripted {
                system_prefix: prefix(&request.system_instruction),
                user_prefix: prefix(&request.user_message),
            });
        };
        if replies.is_empty() {
            return Err(BackendError::Unscripted {
                system_prefix: prefix(&request.system_instruction),
                user_prefix: prefix(&request.user_message),
            });
        }
        match self.take_reply(idx, replies) {
            MockReply::Text { text, truncated } => Ok(RawGeneration {
                token_logprobs: request.want_logprobs.then(|| self.logprobs_for(&text)),
                text,
                truncated,
            }),
            MockReply::Fail { fail } => Err(BackendError::Transient(fail)),
            MockReply::AuthFail { auth_fail } => Err(BackendError::AuthFailure(auth_fail)),
        }
    }

    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        Ok(self.logprobs_for(text))
    }
}
