//! Text-judge and audio-QA backends behind one client.
//!
//! A [`Client`] owns a [`BackendProfile`] and a [`Transport`]. It formats
//! requests in chat-completions shape, limits concurrency per profile,
//! retries transient failures, and counts calls. Transports are swappable:
//! HTTP for real servers, deterministic mocks for offline runs, and a
//! record/replay pair for fixtures.

pub mod choice;
pub mod http;
pub mod mock;
pub mod replay;
pub mod wav;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use choice::{extract_choice, format_question, PromptStyle};
pub use wav::make_silent_wav;

use crate::hash::{canonical_json, content_hash};
use crate::model::AudioRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    TextJudge,
    AudioQA,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_s: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, backoff_s: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    pub kind: BackendKind,
    /// `http(s)://…` for a chat-completions server, `mock://judge`,
    /// `mock://audio`, `canned://<file>` or `replay://<file>`.
    pub endpoint: String,
    pub model_id: String,
    #[serde(default = "default_style")]
    pub prompt_style: PromptStyle,
    #[serde(default = "one")]
    pub max_concurrency: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// API key, after `${VAR}` substitution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
}

fn default_style() -> PromptStyle {
    PromptStyle::OmniAnswerTags
}
fn one() -> usize {
    1
}
fn default_timeout() -> f64 {
    60.0
}

impl BackendProfile {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_concurrency < 1 {
            return Err(format!("backend `{}`: max_concurrency must be >= 1", self.name));
        }
        if self.retry.max_attempts < 1 {
            return Err(format!("backend `{}`: retry.max_attempts must be >= 1", self.name));
        }
        if !(self.timeout_s > 0.0) {
            return Err(format!("backend `{}`: timeout_s must be positive", self.name));
        }
        if !(self.retry.backoff_s >= 0.0) {
            return Err(format!("backend `{}`: retry.backoff_s must be >= 0", self.name));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 1024, seed: 0 }
    }
}

/// One model answer to an audio MCQ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub raw_text: String,
    pub choice_index: Option<u8>,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// WAV bytes attached to a request, with their digest computed once.
#[derive(Debug, Clone)]
pub struct AudioAttachment {
    pub base64: Arc<String>,
    pub sha256: String,
}

impl AudioAttachment {
    pub fn from_wav(bytes: &[u8]) -> Self {
        Self {
            base64: Arc::new(base64::engine::general_purpose::STANDARD.encode(bytes)),
            sha256: content_hash(bytes),
        }
    }
}

/// A transport-independent chat request.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
    pub audio: Option<AudioAttachment>,
}

impl ChatRequest {
    /// Text of the last user message.
    pub fn user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    /// Chat-completions JSON body. Audio travels as an `input_audio` content
    /// part holding base64 WAV.
    pub fn wire_body(&self) -> Value {
        self.body_with_audio(|a| json!({"data": a.base64.as_str(), "format": "wav"}))
    }

    /// Same as [`wire_body`](Self::wire_body) with the audio payload replaced
    /// by its digest; used as the record/replay key.
    pub fn fingerprint_body(&self) -> Value {
        self.body_with_audio(|a| json!({"sha256": a.sha256, "format": "wav"}))
    }

    pub fn fingerprint(&self) -> String {
        content_hash(canonical_json(&self.fingerprint_body()).as_bytes())
    }

    fn body_with_audio(&self, audio: impl Fn(&AudioAttachment) -> Value) -> Value {
        let last_user = self.messages.iter().rposition(|m| m.role == "user");
        let messages: Vec<Value> = self
            .messages
            .iter()
            .enumerate()
            .map(|(i, m)| match (&self.audio, Some(i) == last_user) {
                (Some(a), true) => json!({
                    "role": m.role,
                    "content": [
                        {"type": "input_audio", "input_audio": audio(a)},
                        {"type": "text", "text": m.content},
                    ],
                }),
                _ => json!({"role": m.role, "content": m.content}),
            })
            .collect();
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("undecodable response: {0}")]
    Decode(String),
    #[error("interrupted")]
    Interrupted,
}

impl TransportError {
    fn retryable(&self) -> bool {
        match self {
            TransportError::Timeout | TransportError::Connect(_) => true,
            TransportError::Status { status, .. } => matches!(status, 408 | 429 | 500..=599),
            TransportError::Decode(_) | TransportError::Interrupted => false,
        }
    }
}

/// Delivers one request and returns the completion text.
pub trait Transport: Send + Sync {
    fn send(&self, req: &ChatRequest, timeout: Duration) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend `{backend}` failed after {attempts} attempt(s): {last}")]
    Transport {
        backend: String,
        attempts: u32,
        last: TransportError,
    },
    #[error("backend `{backend}` returned HTTP {status}: {body}")]
    Protocol {
        backend: String,
        status: u16,
        body: String,
    },
    #[error("backend `{backend}` is {actual:?}, not {expected:?}")]
    WrongKind {
        backend: String,
        expected: BackendKind,
        actual: BackendKind,
    },
    #[error("cannot read audio `{path}`: {message}")]
    Audio { path: String, message: String },
    #[error("interrupted: call budget exhausted")]
    Interrupted,
    #[error("unknown backend `{0}`")]
    Unknown(String),
    #[error("backend setup failed: {0}")]
    Setup(String),
}

/// Counting semaphore for per-profile concurrency limits.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Audio for a question: a file under the audio root or a prepared clip.
#[derive(Debug, Clone)]
pub enum AudioInput {
    File(AudioRef),
    Clip(AudioAttachment),
}

/// Shareable backend client.
pub struct Client {
    profile: BackendProfile,
    transport: Arc<dyn Transport>,
    permits: Semaphore,
    audio_root: PathBuf,
    calls: AtomicU64,
    retries: AtomicU64,
    budget: Option<Arc<AtomicI64>>,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client")
            .field("profile", &self.profile.name)
            .field("calls", &self.calls())
            .finish()
    }
}

impl Client {
    pub fn new(profile: BackendProfile, transport: Arc<dyn Transport>) -> Self {
        let permits = Semaphore::new(profile.max_concurrency.max(1));
        Self {
            profile,
            transport,
            permits,
            audio_root: PathBuf::from("."),
            calls: AtomicU64::new(0),
            retries: AtomicU64::new(0),
            budget: None,
        }
    }

    /// Builds the transport named by `profile.endpoint`.
    pub fn from_profile(profile: BackendProfile) -> Result<Self, BackendError> {
        let transport = transport_for(&profile)?;
        Ok(Self::new(profile, transport))
    }

    pub fn with_audio_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.audio_root = root.into();
        self
    }

    /// Shared call budget; once it reaches zero every send fails with
    /// [`BackendError::Interrupted`]. Used to simulate a killed run.
    pub fn with_budget(mut self, budget: Arc<AtomicI64>) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    pub fn name(&self) -> &str {
        &self.profile.name
    }

    /// Requests handed to the transport, including retries.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    fn expect_kind(&self, expected: BackendKind) -> Result<(), BackendError> {
        if self.profile.kind == expected {
            Ok(())
        } else {
            Err(BackendError::WrongKind {
                backend: self.profile.name.clone(),
                expected,
                actual: self.profile.kind,
            })
        }
    }

    fn send_with_retry(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let timeout = Duration::from_secs_f64(self.profile.timeout_s);
        let max = self.profile.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(b) = &self.budget {
                if b.fetch_sub(1, Ordering::SeqCst) <= 0 {
                    return Err(BackendError::Interrupted);
                }
            }
            self.calls.fetch_add(1, Ordering::Relaxed);
            let result = {
                let _permit = self.permits.acquire();
                self.transport.send(req, timeout)
            };
            let err = match result {
                Ok(text) => return Ok(text),
                Err(TransportError::Interrupted) => return Err(BackendError::Interrupted),
                Err(e) => e,
            };
            if !err.retryable() || attempt >= max {
                return Err(match err {
                    TransportError::Status { status, body } => BackendError::Protocol {
                        backend: self.profile.name.clone(),
                        status,
                        body,
                    },
                    last => BackendError::Transport {
                        backend: self.profile.name.clone(),
                        attempts: attempt,
                        last,
                    },
                });
            }
            self.retries.fetch_add(1, Ordering::Relaxed);
            tracing::warn!(backend = %self.profile.name, attempt, error = %err, "retrying");
            let wait = self.profile.retry.backoff_s * f64::from(1u32 << (attempt - 1).min(6));
            if wait > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(wait));
            }
        }
    }

    pub fn generate_text(&self, prompt: &str, params: &GenParams) -> Result<String, BackendError> {
        self.expect_kind(BackendKind::TextJudge)?;
        let req = ChatRequest {
            model: self.profile.model_id.clone(),
            messages: vec![ChatMessage { role: "user".into(), content: prompt.to_string() }],
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            seed: params.seed,
            audio: None,
        };
        self.send_with_retry(&req)
    }

    /// Request an audio-QA backend would receive for this question.
    pub fn audio_request(
        &self,
        audio: &AudioInput,
        question: &str,
        options: &[String; 4],
        params: &GenParams,
    ) -> Result<ChatRequest, BackendError> {
        let attachment = match audio {
            AudioInput::Clip(a) => a.clone(),
            AudioInput::File(r) => {
                let path = self.audio_root.join(&r.path);
                let bytes = std::fs::read(&path).map_err(|e| BackendError::Audio {
                    path: r.path.clone(),
                    message: e.to_string(),
                })?;
                AudioAttachment::from_wav(&bytes)
            }
        };
        let style = self.profile.prompt_style;
        let mut messages = Vec::new();
        if let Some(sys) = choice::system_prompt(style) {
            messages.push(ChatMessage { role: "system".into(), content: sys.into() });
        }
        messages.push(ChatMessage {
            role: "user".into(),
            content: format_question(style, question, options),
        });
        Ok(ChatRequest {
            model: self.profile.model_id.clone(),
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            seed: params.seed,
            audio: Some(attachment),
        })
    }

    pub fn answer_audio_mcq(
        &self,
        audio: &AudioInput,
        question: &str,
        options: &[String; 4],
        params: &GenParams,
    ) -> Result<Prediction, BackendError> {
        self.expect_kind(BackendKind::AudioQA)?;
        let req = self.audio_request(audio, question, options, params)?;
        let started = Instant::now();
        let raw_text = self.send_with_retry(&req)?;
        let choice_index = extract_choice(&raw_text, options, self.profile.prompt_style);
        Ok(Prediction {
            raw_text,
            choice_index,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Text generation as seen by the generation stages.
pub trait TextGenerator: Sync {
    fn generate_text(&self, prompt: &str, params: &GenParams) -> Result<String, BackendError>;
}

impl TextGenerator for Client {
    fn generate_text(&self, prompt: &str, params: &GenParams) -> Result<String, BackendError> {
        Client::generate_text(self, prompt, params)
    }
}

/// Picks the transport for an endpoint scheme.
pub fn transport_for(profile: &BackendProfile) -> Result<Arc<dyn Transport>, BackendError> {
    let ep = profile.endpoint.as_str();
    if ep.starts_with("http://") || ep.starts_with("https://") {
        return Ok(Arc::new(http::HttpTransport::new(ep, profile.api_key.clone())?));
    }
    if let Some(kind) = ep.strip_prefix("mock://") {
        return match kind {
            "judge" => Ok(Arc::new(mock::MockJudge::default())),
            "audio" => Ok(Arc::new(mock::MockAudioQa::new(&profile.name, profile.prompt_style))),
            other => Err(BackendError::Setup(format!("unknown mock `{other}`"))),
        };
    }
    if let Some(path) = ep.strip_prefix("replay://") {
        return Ok(Arc::new(replay::ReplayTransport::load(Path::new(path))?));
    }
    if let Some(path) = ep.strip_prefix("canned://") {
        return Ok(Arc::new(mock::CannedTransport::load(Path::new(path))?));
    }
    Err(BackendError::Setup(format!("unsupported endpoint `{ep}`")))
}

/// Replaces `${VAR}` with the environment value; unset variables are an error.
pub fn substitute_env(value: &str) -> Result<String, String> {
    let mut out = String::new();
    let mut rest = value;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find('}').ok_or_else(|| format!("unterminated `${{` in `{value}`"))?;
        let var = &after[..end];
        let v = std::env::var(var).map_err(|_| format!("environment variable `{var}` is not set"))?;
        out.push_str(&v);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    pub(crate) fn profile(kind: BackendKind, attempts: u32) -> BackendProfile {
        BackendProfile {
            name: "t".into(),
            kind,
            endpoint: "mock://judge".into(),
            model_id: "m".into(),
            prompt_style: PromptStyle::R1AqaAnswerTags,
            max_concurrency: 2,
            timeout_s: 5.0,
            retry: RetryPolicy { max_attempts: attempts, backoff_s: 0.0 },
            api_key: None,
        }
    }

    /// Fails the first `fail` sends with `err`, then echoes the prompt.
    struct Flaky {
        fail: usize,
        err: TransportError,
        seen: AtomicUsize,
    }

    impl Transport for Flaky {
        fn send(&self, req: &ChatRequest, _t: Duration) -> Result<String, TransportError> {
            let n = self.seen.fetch_add(1, Ordering::SeqCst);
            if n < self.fail {
                Err(self.err.clone())
            } else {
                Ok(format!("echo:{}", req.user_text()))
            }
        }
    }

    fn flaky(fail: usize, err: TransportError) -> Arc<Flaky> {
        Arc::new(Flaky { fail, err, seen: AtomicUsize::new(0) })
    }

    #[test]
    fn retry_then_success() {
        let c = Client::new(profile(BackendKind::TextJudge, 3), flaky(1, TransportError::Timeout));
        assert_eq!(c.generate_text("hi", &GenParams::default()).unwrap(), "echo:hi");
        assert_eq!(c.retries(), 1);
        assert_eq!(c.calls(), 2);
    }

    #[test]
    fn exhausted_retries() {
        let c = Client::new(profile(BackendKind::TextJudge, 2), flaky(2, TransportError::Timeout));
        let err = c.generate_text("hi", &GenParams::default()).unwrap_err();
        assert!(matches!(err, BackendError::Transport { attempts: 2, .. }), "{err:?}");
    }

    #[test]
    fn client_errors_are_not_retried() {
        let t = flaky(5, TransportError::Status { status: 400, body: "bad".into() });
        let c = Client::new(profile(BackendKind::TextJudge, 3), t);
        let err = c.generate_text("hi", &GenParams::default()).unwrap_err();
        assert!(matches!(err, BackendError::Protocol { status: 400, .. }));
        assert_eq!(c.calls(), 1);
    }

    #[test]
    fn server_errors_are_retried() {
        let t = flaky(1, TransportError::Status { status: 503, body: "busy".into() });
        let c = Client::new(profile(BackendKind::TextJudge, 3), t);
        assert!(c.generate_text("hi", &GenParams::default()).is_ok());
    }

    #[test]
    fn wrong_kind() {
        let c = Client::new(profile(BackendKind::AudioQA, 1), flaky(0, TransportError::Timeout));
        assert!(matches!(
            c.generate_text("x", &GenParams::default()),
            Err(BackendError::WrongKind { .. })
        ));
    }

    #[test]
    fn budget_interrupts() {
        let c = Client::new(profile(BackendKind::TextJudge, 1), flaky(0, TransportError::Timeout))
            .with_budget(Arc::new(AtomicI64::new(1)));
        assert!(c.generate_text("a", &GenParams::default()).is_ok());
        assert_eq!(c.generate_text("b", &GenParams::default()), Err(BackendError::Interrupted));
    }

    #[test]
    fn wire_body_shape_and_no_paths() {
        let dir = tempfile::tempdir().unwrap();
        let wav = make_silent_wav(0.5, 8000).unwrap();
        std::fs::write(dir.path().join("clip.wav"), &wav).unwrap();
        let c = Client::new(profile(BackendKind::AudioQA, 1), flaky(0, TransportError::Timeout))
            .with_audio_root(dir.path());
        let audio = AudioInput::File(AudioRef {
            id: "clip".into(),
            path: "clip.wav".into(),
            duration_s: Some(0.5),
        });
        let opts: [String; 4] = ["a".into(), "b".into(), "c".into(), "d".into()];
        let req = c.audio_request(&audio, "Q?", &opts, &GenParams::default()).unwrap();
        let body = req.wire_body();
        let text = body.to_string();
        assert!(!text.contains(&dir.path().display().to_string()));
        assert!(!text.contains("clip.wav"));
        assert_eq!(body["messages"][0]["content"][0]["type"], "input_audio");
        assert_eq!(body["messages"][0]["content"][0]["input_audio"]["format"], "wav");
        assert_eq!(body["model"], "m");
        let fp = req.fingerprint_body().to_string();
        assert!(fp.contains(&content_hash(&wav)));
        assert!(fp.len() < 1000);
    }

    #[test]
    fn semaphore_limits_concurrency() {
        struct Slow {
            live: AtomicUsize,
            peak: AtomicUsize,
        }
        impl Transport for Slow {
            fn send(&self, _r: &ChatRequest, _t: Duration) -> Result<String, TransportError> {
                let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                self.live.fetch_sub(1, Ordering::SeqCst);
                Ok(String::new())
            }
        }
        let t = Arc::new(Slow { live: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
        let c = Client::new(profile(BackendKind::TextJudge, 1), t.clone());
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| c.generate_text("x", &GenParams::default()).unwrap());
            }
        });
        assert!(t.peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn env_substitution() {
        std::env::set_var("ACFFORGE_TEST_KEY", "sk-123");
        assert_eq!(substitute_env("Bearer ${ACFFORGE_TEST_KEY}").unwrap(), "Bearer sk-123");
        assert!(substitute_env("${ACFFORGE_DEFINITELY_UNSET}").is_err());
        assert_eq!(substitute_env("plain").unwrap(), "plain");
    }
}
