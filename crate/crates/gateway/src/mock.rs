//! Local chat-completions endpoint for offline evaluation and client tests.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::json;
use tiny_http::{Header, Response, Server};

use crate::client::ANSWER_MARKER;
use crate::{GatewayError, Result};

#[derive(Clone, Debug)]
pub enum MockMode {
    /// Replies with the gold answers of the question found in the prompt.
    EchoGold(HashMap<String, Vec<String>>),
    /// Replies with answers that match nothing.
    Garbage,
    /// Replies without the answer marker.
    NoMarker,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Failure {
    Status(u16),
    /// Holds the request this long before answering normally.
    Stall(Duration),
}

pub struct MockServer {
    server: Arc<Server>,
    handle: Option<JoinHandle<()>>,
    port: u16,
    requests: Arc<AtomicUsize>,
}

/// Text after the last `Question:` line of the user prompt.
pub fn extract_question(prompt: &str) -> Option<&str> {
    prompt.lines().rev().find_map(|l| l.strip_prefix("Question:")).map(str::trim)
}

fn reply(mode: &MockMode, body: &str, n: usize) -> std::result::Result<String, String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| e.to_string())?;
    let user = v
        .get("messages")
        .and_then(|m| m.as_array())
        .and_then(|m| m.iter().rev().find(|x| x.get("role").and_then(|r| r.as_str()) == Some("user")))
        .and_then(|x| x.get("content"))
        .and_then(|c| c.as_str())
        .ok_or("request has no user message")?;
    Ok(match mode {
        MockMode::EchoGold(gold) => {
            let answers = extract_question(user).and_then(|q| gold.get(q)).cloned().unwrap_or_default();
            format!("Looking at the evidence.\n{ANSWER_MARKER}\n{}", answers.join("\n"))
        }
        MockMode::Garbage => format!("{ANSWER_MARKER}\nzz-not-an-entity-{n}"),
        MockMode::NoMarker => "I cannot tell from the evidence.".into(),
    })
}

impl MockServer {
    /// Binds to `addr` (port 0 picks a free one). The first `fail_first`
    /// requests get `failure`.
    pub fn start(addr: &str, mode: MockMode, fail_first: usize, failure: Failure) -> Result<Self> {
        let server = Arc::new(Server::http(addr).map_err(|e| GatewayError::Transport(e.to_string()))?);
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| GatewayError::Transport("mock server has no IP address".into()))?;
        let requests = Arc::new(AtomicUsize::new(0));
        let (srv, count) = (server.clone(), requests.clone());
        let handle = std::thread::spawn(move || {
            let mode = Arc::new(mode);
            for mut req in srv.incoming_requests() {
                let n = count.fetch_add(1, Ordering::SeqCst);
                let mode = mode.clone();
                std::thread::spawn(move || {
                    let mut body = String::new();
                    let _ = req.as_reader().read_to_string(&mut body);
                    if n < fail_first {
                        match failure {
                            Failure::Status(code) => {
                                let _ = req.respond(Response::from_string("injected failure").with_status_code(code));
                                return;
                            }
                            Failure::Stall(d) => std::thread::sleep(d),
                        }
                    }
                    let resp = match reply(&mode, &body, n) {
                        Ok(content) => {
                            let payload = json!({
                                "id": format!("mock-{n}"),
                                "object": "chat.completion",
                                "choices": [{
                                    "index": 0,
                                    "message": {"role": "assistant", "content": content},
                                    "finish_reason": "stop",
                                }],
                            });
                            let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
                            Response::from_string(payload.to_string()).with_header(header)
                        }
                        Err(e) => Response::from_string(e).with_status_code(400),
                    };
                    let _ = req.respond(resp);
                });
            }
        });
        Ok(Self { server, handle: Some(handle), port, requests })
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn base_url(&self) -> String {
        format!("http://127.0.0.1:{}/v1", self.port)
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Blocks until the server is stopped from another thread or the process ends.
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
