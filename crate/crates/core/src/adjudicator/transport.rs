//! Chat-completion transport: the trait the negotiation talks to, and the
//! live HTTP implementation.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompt::AgentRole;
use crate::data::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
            image_ref: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    Review,
}

/// Out-of-band facts about a call. Never sent over the wire; scripted
/// transports use them to decide what to answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallContext {
    pub sample_id: String,
    pub agent: AgentRole,
    pub phase: Phase,
    pub classifier_label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub context: CallContext,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying: timeouts, connection resets, 429 and 5xx.
    #[error("transient transport failure: {0}")]
    Transient(String),
    /// Misconfiguration (bad endpoint, auth, missing script entry). Aborts the batch.
    #[error("transport configuration error: {0}")]
    Fatal(String),
}

pub trait Transport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        (**self).complete(request)
    }
}

/// Live chat-completion endpoint (OpenAI-compatible wire format).
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    max_tokens: u32,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        HttpTransport {
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            temperature: 0.0,
            max_tokens: 512,
        }
    }

    pub fn with_sampling(mut self, temperature: f64, max_tokens: u32) -> Self {
        self.temperature = temperature;
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.agent = ureq::AgentBuilder::new().timeout(timeout).build();
        self
    }

    pub fn request_body(&self, messages: &[ChatMessage]) -> Value {
        request_body(&self.model, messages, self.temperature, self.max_tokens)
    }
}

/// JSON body of a chat-completion request. A message carrying an image is
/// sent as text + image_url content parts.
pub fn request_body(model: &str, messages: &[ChatMessage], temperature: f64, max_tokens: u32) -> Value {
    let messages: Vec<Value> = messages
        .iter()
        .map(|m| match &m.image_ref {
            None => json!({ "role": m.role, "content": m.content }),
            Some(url) => json!({
                "role": m.role,
                "content": [
                    { "type": "text", "text": m.content },
                    { "type": "image_url", "image_url": { "url": url } },
                ],
            }),
        })
        .collect();
    json!({
        "model": model,
        "messages": messages,
        "temperature": temperature,
        "max_tokens": max_tokens,
    })
}

/// Content of the first choice of a chat-completion response.
pub fn response_content(body: &Value) -> Option<String> {
    let content = body.get("choices")?.get(0)?.get("message")?.get("content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

impl Transport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut req = self.agent.post(&self.endpoint).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(self.request_body(&request.messages)) {
            Ok(resp) => resp,
            Err(ureq::Error::Status(code, resp)) => {
                let detail = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code} from {}: {}", self.endpoint, detail.chars().take(200).collect::<String>());
                return Err(if code == 408 || code == 429 || code >= 500 {
                    TransportError::Transient(msg)
                } else {
                    TransportError::Fatal(msg)
                });
            }
            Err(ureq::Error::Transport(t)) => {
                return Err(TransportError::Transient(format!("{}: {t}", self.endpoint)));
            }
        };
        let body: Value = resp
            .into_json()
            .map_err(|e| TransportError::Transient(format!("unreadable response body: {e}")))?;
        response_content(&body).ok_or_else(|| TransportError::Transient("response has no choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_shape() {
        let mut msgs = vec![ChatMessage::new(Role::System, "sys"), ChatMessage::new(Role::User, "hi")];
        let body = request_body("qwen", &msgs, 0.0, 64);
        assert_eq!(body["model"], "qwen");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "hi");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["max_tokens"], 64);

        msgs[1].image_ref = Some("img/1.png".into());
        let body = request_body("qwen", &msgs, 0.0, 64);
        assert_eq!(body["messages"][1]["content"][1]["image_url"]["url"], "img/1.png");
    }

    #[test]
    fn reads_first_choice() {
        let body = json!({"choices": [{"message": {"role": "assistant", "content": "DECISION: NEGATIVE"}}]});
        assert_eq!(response_content(&body).as_deref(), Some("DECISION: NEGATIVE"));
        assert_eq!(response_content(&json!({"choices": []})), None);
    }
}
