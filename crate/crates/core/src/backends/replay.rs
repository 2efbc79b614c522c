//! Record/replay transports. A recording is JSONL of
//! `{"key": <fingerprint>, "request": <fingerprint body>, "response": <text>}`.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BackendError, ChatRequest, Transport, TransportError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exchange {
    pub key: String,
    pub request: Value,
    pub response: String,
}

/// Serves responses from a recording; a request with no recorded
/// fingerprint is an HTTP 404.
#[derive(Debug, Clone, Default)]
pub struct ReplayTransport {
    table: HashMap<String, String>,
}

impl ReplayTransport {
    pub fn from_exchanges(exchanges: impl IntoIterator<Item = Exchange>) -> Self {
        Self {
            table: exchanges.into_iter().map(|e| (e.key, e.response)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Setup(format!("{}: {e}", path.display())))?;
        let mut exchanges = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: Exchange = serde_json::from_str(line)
                .map_err(|e| BackendError::Setup(format!("{}:{}: {e}", path.display(), n + 1)))?;
            exchanges.push(e);
        }
        Ok(Self::from_exchanges(exchanges))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Transport for ReplayTransport {
    fn send(&self, req: &ChatRequest, _timeout: Duration) -> Result<String, TransportError> {
        let key = req.fingerprint();
        self.table.get(&key).cloned().ok_or(TransportError::Status {
            status: 404,
            body: format!("no recorded exchange for {key}"),
        })
    }
}

/// Wraps another transport and appends every successful exchange to a
/// JSONL file.
pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    path: PathBuf,
    lock: Mutex<()>,
}

impl RecordingTransport {
    pub fn new(inner: Arc<dyn Transport>, path: impl Into<PathBuf>) -> Self {
        Self { inner, path: path.into(), lock: Mutex::new(()) }
    }
}

impl Transport for RecordingTransport {
    fn send(&self, req: &ChatRequest, timeout: Duration) -> Result<String, TransportError> {
        let response = self.inner.send(req, timeout)?;
        let line = serde_json::to_string(&Exchange {
            key: req.fingerprint(),
            request: req.fingerprint_body(),
            response: response.clone(),
        })
        .expect("exchange serializes");
        let _g = self.lock.lock().expect("recording lock poisoned");
        let write = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .and_then(|mut f| writeln!(f, "{line}"));
        if let Err(e) = write {
            tracing::warn!(path = %self.path.display(), error = %e, "could not record exchange");
        }
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockAudioQa;
    use crate::backends::{AudioAttachment, ChatMessage, PromptStyle};

    fn request(seed: u64) -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage { role: "user".into(), content: "Q? A. x B. y C. z D. w".into() }],
            temperature: 0.0,
            max_tokens: 16,
            seed,
            audio: Some(AudioAttachment::from_wav(b"RIFF fake")),
        }
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.jsonl");
        let mock: Arc<dyn Transport> = Arc::new(MockAudioQa::new("m", PromptStyle::KimiLetterDot));
        let rec = RecordingTransport::new(mock.clone(), &path);
        let t = Duration::from_secs(1);
        let a = rec.send(&request(1), t).unwrap();
        let b = rec.send(&request(2), t).unwrap();

        let replay = ReplayTransport::load(&path).unwrap();
        assert_eq!(replay.len(), 2);
        assert_eq!(replay.send(&request(1), t).unwrap(), a);
        assert_eq!(replay.send(&request(2), t).unwrap(), b);
        assert!(matches!(
            replay.send(&request(3), t),
            Err(TransportError::Status { status: 404, .. })
        ));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains(request(1).audio.unwrap().base64.as_str()));
    }
}
