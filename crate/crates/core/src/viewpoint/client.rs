//! Chat-completion clients: a scripted mock and an OpenAI-style HTTP client.

use std::collections::VecDeque;
use std::path::Path;

use base64::Engine;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("mock client has no scripted responses left")]
    Exhausted,
    #[error("could not load mock responses from {path}: {reason}")]
    MockScript { path: String, reason: String },
    #[error("environment variable {0} holding the API key is not set")]
    MissingKey(String),
    #[error("request failed: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    Malformed(String),
    #[error("endpoint `{0}` needs the http-client feature")]
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Text(String),
    /// PNG-encoded image.
    Image(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: String,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn text(role: &str, text: impl Into<String>) -> Self {
        Self { role: role.into(), parts: vec![Part::Text(text.into())] }
    }
}

pub trait ChatClient {
    /// Sends the conversation so far and returns the first choice's text.
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, ClientError>;
}

/// Replays scripted responses in order.
#[derive(Debug, Clone, Default)]
pub struct MockClient {
    responses: VecDeque<String>,
    pub calls: usize,
}

impl MockClient {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self { responses: responses.into_iter().map(Into::into).collect(), calls: 0 }
    }

    /// Loads a JSON list of strings.
    pub fn from_file(path: &Path) -> Result<Self, ClientError> {
        let err = |reason: String| ClientError::MockScript { path: path.display().to_string(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let list: Vec<String> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Ok(Self::new(list))
    }
}

impl ChatClient for MockClient {
    fn complete(&mut self, _messages: &[ChatMessage]) -> Result<String, ClientError> {
        self.calls += 1;
        self.responses.pop_front().ok_or(ClientError::Exhausted)
    }
}

/// OpenAI-style request body; images travel as base64 PNG data URLs.
pub fn request_body(model: &str, messages: &[ChatMessage]) -> Value {
    let messages: Vec<Value> = messages
        .iter()
        .map(|m| {
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text(t) => json!({"type": "text", "text": t}),
                    Part::Image(png) => {
                        let b64 = base64::engine::general_purpose::STANDARD.encode(png);
                        json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}})
                    }
                })
                .collect();
            json!({"role": m.role, "content": content})
        })
        .collect();
    json!({"model": model, "messages": messages})
}

/// Extracts `choices[0].message.content`, accepting either a string or a list
/// of text parts.
pub fn response_text(body: &Value) -> Result<String, ClientError> {
    let content = body.pointer("/choices/0/message/content").ok_or_else(|| ClientError::Malformed("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join("")),
        other => Err(ClientError::Malformed(format!("unexpected content {other}"))),
    }
}

#[cfg(feature = "http-client")]
pub struct HttpChatClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

#[cfg(feature = "http-client")]
impl HttpChatClient {
    /// An empty `api_key_env` sends no authorization header.
    pub fn new(endpoint: &str, model: &str, api_key_env: &str) -> Result<Self, ClientError> {
        let api_key = if api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(api_key_env).map_err(|_| ClientError::MissingKey(api_key_env.to_string()))?)
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self { endpoint: endpoint.to_string(), model: model.to_string(), api_key, http })
    }
}

#[cfg(feature = "http-client")]
impl ChatClient for HttpChatClient {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let mut req = self.http.post(&self.endpoint).json(&request_body(&self.model, messages));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ClientError::Status { status: status.as_u16(), body: text });
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| ClientError::Malformed(e.to_string()))?;
        response_text(&body)
    }
}

/// `mock:<path>` loads a scripted [`MockClient`]; anything else is an HTTP
/// endpoint.
pub fn client_for_endpoint(endpoint: &str, model: &str, api_key_env: &str) -> Result<Box<dyn ChatClient>, ClientError> {
    if let Some(path) = endpoint.strip_prefix("mock:") {
        return Ok(Box::new(MockClient::from_file(Path::new(path))?));
    }
    #[cfg(feature = "http-client")]
    {
        Ok(Box::new(HttpChatClient::new(endpoint, model, api_key_env)?))
    }
    #[cfg(not(feature = "http-client"))]
    {
        let _ = (model, api_key_env);
        Err(ClientError::Unsupported(endpoint.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_shape() {
        let msgs = vec![ChatMessage { role: "user".into(), parts: vec![Part::Text("hi".into()), Part::Image(vec![1, 2, 3])] }];
        let body = request_body("m", &msgs);
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["content"][0]["text"], "hi");
        assert_eq!(body["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,AQID");
    }

    #[test]
    fn content_variants() {
        assert_eq!(response_text(&json!({"choices": [{"message": {"content": "ELEV=1; AZIM=2"}}]})).unwrap(), "ELEV=1; AZIM=2");
        let parts = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]});
        assert_eq!(response_text(&parts).unwrap(), "ab");
        assert!(response_text(&json!({"choices": []})).is_err());
    }

    #[test]
    fn mock_runs_dry() {
        let mut m = MockClient::new(["a"]);
        assert_eq!(m.complete(&[]).unwrap(), "a");
        assert!(matches!(m.complete(&[]), Err(ClientError::Exhausted)));
        assert_eq!(m.calls, 2);
    }
}
