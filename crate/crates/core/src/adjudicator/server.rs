//! Standalone mock chat-completion server speaking the live wire format.
//!
//! Routes are `POST /{moderator|user}/v1/chat/completions`. The sample id is
//! read from the `Item ID:` line of the first user message and the phase
//! from the number of user turns, so the server can answer in oracle or
//! fixed mode. Adversarial mode needs the classifier label and is not
//! servable.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};
use tiny_http::{Header, Method, Response, Server};

use super::mock::MockAgent;
use super::prompt::AgentRole;
use super::transport::{CallContext, Phase, TransportError};

pub struct MockServer {
    server: Arc<Server>,
    addr: SocketAddr,
    worker: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves on a
    /// background thread until dropped.
    pub fn start(addr: &str, agent: MockAgent) -> std::io::Result<Self> {
        let server = Server::http(addr).map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))?;
        let server = Arc::new(server);
        let bound = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::Other, "not an IP listener"))?;
        let worker_server = Arc::clone(&server);
        let worker = std::thread::spawn(move || {
            for mut request in worker_server.incoming_requests() {
                let mut body = String::new();
                let (status, payload) = if request.as_reader().read_to_string(&mut body).is_err() {
                    (400, json!({"error": {"message": "unreadable body"}}))
                } else {
                    handle(request.method(), request.url(), &body, &agent)
                };
                let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
                let response = Response::from_string(payload.to_string())
                    .with_status_code(status)
                    .with_header(header);
                if let Err(e) = request.respond(response) {
                    tracing::debug!(error = %e, "mock server failed to respond");
                }
            }
        });
        Ok(MockServer {
            server,
            addr: bound,
            worker: Some(worker),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Endpoint URL for one agent.
    pub fn endpoint(&self, agent: AgentRole) -> String {
        format!("http://{}/{}/v1/chat/completions", self.addr, agent.name())
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn error(status: u16, message: impl Into<String>) -> (u16, Value) {
    (status, json!({"error": {"message": message.into()}}))
}

fn handle(method: &Method, url: &str, body: &str, agent: &MockAgent) -> (u16, Value) {
    if *method != Method::Post {
        return error(405, "only POST is supported");
    }
    let role = match url.trim_end_matches('/') {
        "/moderator/v1/chat/completions" => AgentRole::Moderator,
        "/user/v1/chat/completions" => AgentRole::User,
        other => return error(404, format!("unknown route {other}")),
    };
    let request: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(e) => return error(400, format!("invalid JSON: {e}")),
    };
    let Some(messages) = request.get("messages").and_then(Value::as_array) else {
        return error(400, "missing messages");
    };
    let user_turns: Vec<String> = messages
        .iter()
        .filter(|m| m.get("role").and_then(Value::as_str) == Some("user"))
        .map(message_text)
        .collect();
    let Some(sample_id) = user_turns.first().and_then(|t| item_id(t)) else {
        return error(400, "first user message has no `Item ID:` line");
    };
    let ctx = CallContext {
        sample_id,
        agent: role,
        phase: if user_turns.len() >= 2 { Phase::Review } else { Phase::Initial },
        classifier_label: None,
    };
    match agent.respond(&ctx) {
        Ok(content) => (
            200,
            json!({
                "id": format!("mock-{}-{}", role.name(), ctx.sample_id),
                "object": "chat.completion",
                "model": request.get("model").cloned().unwrap_or(Value::Null),
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": content},
                    "finish_reason": "stop",
                }],
            }),
        ),
        Err(TransportError::Transient(m)) => error(503, m),
        Err(TransportError::Fatal(m)) => error(400, m),
    }
}

fn message_text(message: &Value) -> String {
    match message.get("content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("\n"),
        _ => String::new(),
    }
}

fn item_id(text: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.trim().strip_prefix("Item ID:"))
        .map(|id| id.trim().to_string())
        .filter(|id| !id.is_empty())
}
