//! Chat-completions over HTTP.

use std::time::Duration;

use serde_json::Value;

use super::{BackendError, ChatRequest, Transport, TransportError};

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: &str, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Setup(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: endpoint.to_string(),
            api_key,
        })
    }
}

/// `choices[0].message.content` of a chat-completions response. Content may
/// be a string or a list of text parts.
pub fn completion_text(body: &Value) -> Result<String, TransportError> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| TransportError::Decode("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        Value::Null => Ok(String::new()),
        other => Err(TransportError::Decode(format!("unexpected content: {other}"))),
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &ChatRequest, timeout: Duration) -> Result<String, TransportError> {
        let mut builder = self
            .client
            .post(&self.endpoint)
            .timeout(timeout)
            .json(&req.wire_body());
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Decode(e.to_string())
            }
        })?;
        if !status.is_success() {
            let body: String = text.chars().take(512).collect();
            return Err(TransportError::Status { status: status.as_u16(), body });
        }
        let json: Value =
            serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))?;
        completion_text(&json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn completion_text_variants() {
        let s = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(completion_text(&s).unwrap(), "hi");
        let parts = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]});
        assert_eq!(completion_text(&parts).unwrap(), "ab");
        assert!(completion_text(&json!({"error": "x"})).is_err());
    }
}
