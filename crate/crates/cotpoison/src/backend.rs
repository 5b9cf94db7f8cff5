//! Gateway to text-generation and token-scoring capabilities.
//!
//! Two backends live behind the [`TextBackend`] trait: a remote
//! chat-completion client ([`remote`]) and a deterministic scripted mock
//! ([`mock`]). The [`Gateway`] wraps a backend with retry-on-transient
//! semantics, a concurrency limit for batch calls, and request validation.
//!
//! Raw generations from reasoning backends carry the chain of thought
//! between configurable delimiters; [`split_thought`] separates it from the
//! final response.

pub mod mock;
pub mod remote;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    /// All retries exhausted; `message` describes the last failure.
    #[error("backend unavailable after {attempts} attempts: {message}")]
    BackendUnavailable { attempts: u32, message: String },
    /// A retryable failure (timeout, 429/5xx, scripted fault).
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    /// The generation hit the token budget and truncation is disallowed.
    #[error("response exceeded the {max_tokens}-token budget and was truncated")]
    ResponseTooLong { max_tokens: usize },
    #[error("backend does not support token scoring: {0}")]
    ScoringUnsupported(String),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("no scripted reply for system '{system_prefix}…' / user '{user_prefix}…'")]
    Unscripted {
        system_prefix: String,
        user_prefix: String,
    },
    #[error("missing {which} delimiter in raw generation")]
    MissingDelimiter { which: DelimiterSide },
    #[error("nested open delimiter inside the thought section")]
    NestedDelimiter,
    #[error("invalid delimiters: {0}")]
    InvalidDelimiters(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelimiterSide {
    Open,
    Close,
}

impl std::fmt::Display for DelimiterSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DelimiterSide::Open => write!(f, "open"),
            DelimiterSide::Close => write!(f, "close"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.7,
            max_tokens: 8192,
        }
    }
}

/// One generation call: a system instruction (may be empty), a user message,
/// and sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    #[serde(default)]
    pub system_instruction: String,
    pub user_message: String,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default)]
    pub want_logprobs: bool,
    /// Accept generations cut off at the token budget instead of failing
    /// with `ResponseTooLong`.
    #[serde(default)]
    pub allow_truncated: bool,
}

impl GenerationRequest {
    pub fn new(system_instruction: impl Into<String>, user_message: impl Into<String>) -> Self {
        GenerationRequest {
            system_instruction: system_instruction.into(),
            user_message: user_message.into(),
            sampling: SamplingParams::default(),
            want_logprobs: false,
            allow_truncated: false,
        }
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.user_message.is_empty() {
            return Err(BackendError::InvalidRequest("empty user message".into()));
        }
        if self.sampling.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.sampling.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "negative temperature {}",
                self.sampling.temperature
            )));
        }
        Ok(())
    }
}

/// One backend reply before retry bookkeeping.
#[derive(Debug, Clone)]
pub struct RawGeneration {
    pub text: String,
    /// Natural-log probabilities per emitted token, when the backend
    /// supports scoring; values above zero are clamped to 0.
    pub token_logprobs: Option<Vec<f64>>,
    pub truncated: bool,
}

/// Final result of a gateway call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    pub backend_id: String,
    pub attempt_count: u32,
}

/// Retry schedule for transient failures: exponential backoff with optional
/// jitter, clamped so delays never decrease across attempts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 250,
            max_delay_ms: 4_000,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// No-delay policy for tests and mock-only pipelines.
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
            jitter: false,
        }
    }
}

/// Backoff delay before retrying `failed_attempt` (1-based), given the
/// previous delay. `jitter_factor` is drawn from `[1.0, 1.5]`; the result is
/// clamped below by `prev_ms` so the schedule is non-decreasing.
fn backoff_ms(policy: &RetryPolicy, failed_attempt: u32, prev_ms: u64, jitter_factor: f64) -> u64 {
    let exp = failed_attempt.saturating_sub(1).min(20);
    let base = policy.base_delay_ms.saturating_mul(1u64 << exp);
    let jittered = (base as f64 * jitter_factor) as u64;
    jittered.min(policy.max_delay_ms).max(prev_ms)
}

/// Generation/scoring backend interface. Implementations must be safe for
/// concurrent calls.
pub trait TextBackend: Send + Sync {
    fn backend_id(&self) -> String;
    /// One generation attempt, no retries.
    fn generate_once(&self, request: &GenerationRequest) -> Result<RawGeneration, BackendError>;
    /// Natural-log probability per token of `text` under the backend's own
    /// tokenization. Empty text yields an empty list.
    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

fn is_retryable(err: &BackendError) -> bool {
    matches!(err, BackendError::Transient(_))
}

/// Retry-aware, concurrency-limited front door to a [`TextBackend`].
pub struct Gateway {
    backend: Arc<dyn TextBackend>,
    pub retry: RetryPolicy,
    /// Maximum in-flight requests for batch calls.
    pub in_flight: usize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn TextBackend>) -> Self {
        Gateway {
            backend,
            retry: RetryPolicy::default(),
            in_flight: 8,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_in_flight(mut self, in_flight: usize) -> Self {
        self.in_flight = in_flight.max(1);
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.backend_id()
    }

    /// Generate with retries on transient failures. Permanent failures
    /// (auth, unscripted, invalid request) surface immediately.
    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        let max_attempts = self.retry.max_attempts.max(1);
        let mut prev_delay = 0u64;
        let mut last_error = String::new();

        for attempt in 1..=max_attempts {
            match self.backend.generate_once(request) {
                Ok(raw) => {
                    if raw.truncated && !request.allow_truncated {
                        return Err(BackendError::ResponseTooLong {
                            max_tokens: request.sampling.max_tokens,
                        });
                    }
                    let token_logprobs = if request.want_logprobs {
                        raw.token_logprobs
                            .map(|v| v.into_iter().map(|x| x.min(0.0)).collect())
                    } else {
                        None
                    };
                    return Ok(GenerationResult {
                        raw_text: raw.text,
                        token_logprobs,
                        backend_id: self.backend.backend_id(),
                        attempt_count: attempt,
                    });
                }
                Err(err) if is_retryable(&err) => {
                    last_error = err.to_string();
                    if attempt < max_attempts {
                        let jitter = if self.retry.jitter {
                            rand::thread_rng().gen_range(1.0..=1.5)
                        } else {
                            1.0
                        };
                        let delay = backoff_ms(&self.retry, attempt, prev_delay, jitter);
                        prev_delay = delay;
                        if delay > 0 {
                            std::thread::sleep(Duration::from_millis(delay));
                        }
                    }
                }
                Err(err) => return Err(err),
            }
        }
        Err(BackendError::BackendUnavailable {
            attempts: max_attempts,
            message: last_error,
        })
    }

    pub fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let max_attempts = self.retry.max_attempts.max(1);
        let mut prev_delay = 0u64;
        let mut last_error = String::new();
        for attempt in 1..=max_attempts {
            match self.backend.token_logprobs(text) {
                Ok(values) => return Ok(values.into_iter().map(|x| x.min(0.0)).collect()),
                Err(err) if is_retryable(&err) => {
                    last_error = err.to_string();
                    if attempt < max_attempts {
                        let delay = backoff_ms(&self.retry, attempt, prev_delay, 1.0);
                        prev_delay = delay;
                        if delay > 0 {
                            std::thread::sleep(Duration::from_millis(delay));
                        }
                    }
                }
                Err(err) => return Err(err),
            }
        }
        Err(BackendError::BackendUnavailable {
            attempts: max_attempts,
            message: last_error,
        })
    }

    /// Apply `f` to every item with at most `in_flight` worker threads.
    /// Results come back in item order regardless of completion order.
    pub fn map_concurrent<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync,
    {
        map_concurrent(items, self.in_flight, f)
    }
}

/// Order-preserving bounded parallel map over a slice.
pub fn map_concurrent<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let workers = limit.max(1).min(n);
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let result = f(i, &items[i]);
                *slots[i].lock().expect("result slot poisoned") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("result slot poisoned")
                .expect("worker filled every slot")
        })
        .collect()
}

/// Delimiters separating the chain of thought from the final response in a
/// raw generation, plus whether to trim leading whitespace off the response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delimiters {
    pub open: String,
    pub close: String,
    #[serde(default = "default_trim")]
    pub trim_response: bool,
}

fn default_trim() -> bool {
    true
}

impl Default for Delimiters {
    fn default() -> Self {
        Delimiters {
            open: "<think>".into(),
            close: "</think>".into(),
            trim_response: true,
        }
    }
}

/// A raw generation separated into its CoT and final response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtSplit {
    pub cot: String,
    pub response: String,
}

/// Split a raw generation at its thinking delimiters. The text must begin
/// with the open delimiter; the CoT runs to the first close delimiter and
/// the response is everything after it. With `trim_response` off,
/// `open + cot + close + response` reconstructs the input exactly.
pub fn split_thought(raw_text: &str, delimiters: &Delimiters) -> Result<ThoughtSplit, BackendError> {
    if delimiters.open.is_empty() || delimiters.close.is_empty() {
        return Err(BackendError::InvalidDelimiters("empty delimiter".into()));
    }
    if delimiters.open == delimiters.close {
        return Err(BackendError::InvalidDelimiters(
            "open and close delimiters must differ".into(),
        ));
    }

    let Some(rest) = raw_text.strip_prefix(delimiters.open.as_str()) else {
        return Err(BackendError::MissingDelimiter {
            which: DelimiterSide::Open,
        });
    };
    let Some(close_at) = rest.find(delimiters.close.as_str()) else {
        return Err(BackendError::MissingDelimiter {
            which: DelimiterSide::Close,
        });
    };
    let cot = &rest[..close_at];
    if cot.contains(delimiters.open.as_str()) {
        return Err(BackendError::NestedDelimiter);
    }
    let response = &rest[close_at + delimiters.close.len()..];
    let response = if delimiters.trim_response {
        response.trim_start()
    } else {
        response
    };
    Ok(ThoughtSplit {
        cot: cot.to_string(),
        response: response.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::mock::{MockBackend, MockReply, MockScript};
    use super::*;
    use proptest::prelude::*;

    fn gateway_for(script: MockScript, attempts: u32) -> Gateway {
        Gateway::new(Arc::new(MockBackend::from_script(script)))
            .with_retry(RetryPolicy::immediate(attempts))
    }

    #[test]
    fn identical_requests_get_identical_replies() {
        let mut script = MockScript::default();
        script.add_exact("sys", "hello", vec![MockReply::text("<think>a</think>b")]);
        let gw = gateway_for(script, 3);
        let req = GenerationRequest::new("sys", "hello");
        let first = gw.generate(&req).unwrap();
        let second = gw.generate(&req).unwrap();
        assert_eq!(first.raw_text, second.raw_text);
        assert_eq!(first.attempt_count, 1);
    }

    #[test]
    fn fail_twice_then_succeed_counts_attempts() {
        let mut script = MockScript::default();
        script.add_exact(
            "",
            "q",
            vec![
                MockReply::fail("scripted outage"),
                MockReply::fail("scripted outage"),
                MockReply::text("ok"),
            ],
        );
        let gw = gateway_for(script, 3);
        let result = gw.generate(&GenerationRequest::new("", "q")).unwrap();
        assert_eq!(result.raw_text, "ok");
        assert_eq!(result.attempt_count, 3);
    }

    #[test]
    fn permanent_failure_exhausts_single_attempt() {
        let mut script = MockScript::default();
        script.add_exact("", "q", vec![MockReply::fail("down")]);
        let gw = gateway_for(script, 1);
        match gw.generate(&GenerationRequest::new("", "q")).unwrap_err() {
            BackendError::BackendUnavailable { attempts, .. } => assert_eq!(attempts, 1),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let mut script = MockScript::default();
        script.add_exact(
            "",
            "q",
            vec![MockReply::auth_fail("bad key"), MockReply::text("never")],
        );
        let gw = gateway_for(script, 5);
        assert!(matches!(
            gw.generate(&GenerationRequest::new("", "q")),
            Err(BackendError::AuthFailure(_))
        ));
    }

    #[test]
    fn truncated_reply_is_rejected_unless_allowed() {
        let mut script = MockScript::default();
        script.add_exact("", "q", vec![MockReply::truncated_text("partial")]);
        let gw = gateway_for(script, 2);
        let mut req = GenerationRequest::new("", "q");
        assert!(matches!(
            gw.generate(&req),
            Err(BackendError::ResponseTooLong { .. })
        ));
        req.allow_truncated = true;
        assert_eq!(gw.generate(&req).unwrap().raw_text, "partial");
    }

    #[test]
    fn empty_user_message_rejected() {
        let gw = gateway_for(MockScript::default(), 1);
        assert!(matches!(
            gw.generate(&GenerationRequest::new("s", "")),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn split_basic() {
        let split = split_thought("<think>abc</think>xyz", &Delimiters::default()).unwrap();
        assert_eq!(split.cot, "abc");
        assert_eq!(split.response, "xyz");
    }

    #[test]
    fn split_missing_close() {
        match split_thought("<think>abc", &Delimiters::default()).unwrap_err() {
            BackendError::MissingDelimiter { which } => assert_eq!(which, DelimiterSide::Close),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn split_missing_open() {
        match split_thought("abc</think>xyz", &Delimiters::default()).unwrap_err() {
            BackendError::MissingDelimiter { which } => assert_eq!(which, DelimiterSide::Open),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn split_empty_cot() {
        let split = split_thought("<think></think>final", &Delimiters::default()).unwrap();
        assert_eq!(split.cot, "");
        assert_eq!(split.response, "final");
    }

    #[test]
    fn split_nested_open_rejected() {
        assert!(matches!(
            split_thought("<think>a<think>b</think>c", &Delimiters::default()),
            Err(BackendError::NestedDelimiter)
        ));
    }

    #[test]
    fn split_trims_leading_response_whitespace_by_default() {
        let split = split_thought("<think>a</think>\n  resp", &Delimiters::default()).unwrap();
        assert_eq!(split.response, "resp");
    }

    #[test]
    fn mock_logprobs_fixed_value() {
        let mut script = MockScript::default();
        script.logprobs.default_per_token = -0.5;
        let backend = MockBackend::from_script(script);
        assert_eq!(
            backend.token_logprobs("one two three four").unwrap(),
            vec![-0.5, -0.5, -0.5, -0.5]
        );
        assert!(backend.token_logprobs("").unwrap().is_empty());
    }

    #[test]
    fn map_concurrent_preserves_order() {
        let items: Vec<usize> = (0..100).collect();
        let doubled = map_concurrent(&items, 8, |_, &x| x * 2);
        assert_eq!(doubled, (0..100).map(|x| x * 2).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn split_round_trip(cot in "[a-z 0-9]{0,60}", resp in "[a-z 0-9]{0,60}") {
            let delimiters = Delimiters {
                open: "<think>".into(),
                close: "</think>".into(),
                trim_response: false,
            };
            let raw = format!("<think>{cot}</think>{resp}");
            let split = split_thought(&raw, &delimiters).unwrap();
            let rebuilt = format!(
                "{}{}{}{}",
                delimiters.open, split.cot, delimiters.close, split.response
            );
            prop_assert_eq!(rebuilt, raw);
        }

        #[test]
        fn backoff_is_non_decreasing(
            base in 1u64..1000,
            max in 1000u64..10_000,
            jitters in proptest::collection::vec(1.0f64..=1.5, 1..8),
        ) {
            let policy = RetryPolicy {
                max_attempts: jitters.len() as u32 + 1,
                base_delay_ms: base,
                max_delay_ms: max,
                jitter: true,
            };
            let mut prev = 0u64;
            for (i, j) in jitters.iter().enumerate() {
                let d = backoff_ms(&policy, i as u32 + 1, prev, *j);
                prop_assert!(d >= prev, "delay {d} < previous {prev}");
                prev = d;
            }
        }
    }
}
