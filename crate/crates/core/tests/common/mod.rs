#![allow(dead_code)]

pub mod oracle;

use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::Value;
use tiny_http::{Header, Response, Server};

pub struct Reply {
    pub status: u16,
    pub body: String,
    pub headers: Vec<(String, String)>,
}

impl Reply {
    pub fn json(body: Value) -> Self {
        Self {
            status: 200,
            body: body.to_string(),
            headers: Vec::new(),
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            body: "{}".into(),
            headers: Vec::new(),
        }
    }

    pub fn header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }
}

#[derive(Debug, Clone)]
pub struct Recorded {
    pub path: String,
    pub authorization: Option<String>,
    pub body: Value,
}

/// Local HTTP server that records every JSON request body and answers with
/// whatever the handler returns. Stops when dropped.
pub struct Stub {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
    server: Arc<Server>,
    thread: Option<JoinHandle<()>>,
}

impl Stub {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(usize, &Value) -> Reply + Send + 'static,
    {
        let server = Arc::new(Server::http("127.0.0.1:0").unwrap());
        let url = format!("http://{}", server.server_addr().to_ip().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let (srv, log) = (server.clone(), requests.clone());
        let thread = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let mut raw = String::new();
                let _ = req.as_reader().read_to_string(&mut raw);
                let body: Value = serde_json::from_str(&raw).unwrap_or(Value::Null);
                let authorization = req
                    .headers()
                    .iter()
                    .find(|h| h.field.equiv("Authorization"))
                    .map(|h| h.value.to_string());
                let n = {
                    let mut log = log.lock().unwrap();
                    log.push(Recorded {
                        path: req.url().to_string(),
                        authorization,
                        body: body.clone(),
                    });
                    log.len() - 1
                };
                let reply = handler(n, &body);
                let mut resp = Response::from_string(reply.body).with_status_code(reply.status);
                resp.add_header(Header::from_bytes("Content-Type", "application/json").unwrap());
                for (k, v) in reply.headers {
                    resp.add_header(Header::from_bytes(k.as_bytes(), v.as_bytes()).unwrap());
                }
                let _ = req.respond(resp);
            }
        });
        Self {
            url,
            requests,
            server,
            thread: Some(thread),
        }
    }

    pub fn recorded(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn chat_reply(content: &str) -> Reply {
    Reply::json(serde_json::json!({
        "choices": [{ "index": 0, "message": { "role": "assistant", "content": content } }]
    }))
}

/// Chat stub that answers "T" unless the prompt contains "answer F".
pub fn chat_stub() -> Stub {
    Stub::start(|_, body| {
        let prompt = body
            .pointer("/messages/0/content")
            .and_then(Value::as_str)
            .unwrap_or("");
        chat_reply(if prompt.contains("answer F") { "F" } else { "T" })
    })
}

pub fn fast_retry_toml() -> &'static str {
    "max_retries = 2\ninitial_backoff_ms = 10\nmax_backoff_ms = 50\ntimeout_secs = 10\n"
}
