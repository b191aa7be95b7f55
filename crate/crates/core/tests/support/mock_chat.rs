//! A local chat-completion server answering with the scripted rules.

#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use equicrew_core::agents::prompt::parse_rendered;
use equicrew_core::agents::scripted;
use equicrew_core::agents::InvocationMeta;
use serde_json::{json, Value};

pub const TOKEN: &str = "mock-key";

#[derive(Default)]
pub struct Counters {
    pub requests: AtomicU64,
    pub served: AtomicU64,
    pub prompt_tokens: AtomicU64,
    pub completion_tokens: AtomicU64,
    /// Number of upcoming requests to answer with HTTP 500.
    pub fail_next: AtomicU64,
    pub failures: AtomicU64,
    /// Arrival time of every request, in order.
    pub arrivals: Mutex<Vec<Instant>>,
    pub models: Mutex<Vec<String>>,
}

pub struct MockChat {
    pub addr: SocketAddr,
    pub counters: Arc<Counters>,
}

impl MockChat {
    pub fn endpoint(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }
}

fn tokens(text: &str) -> u64 {
    text.chars().count().div_ceil(4) as u64
}

async fn complete(State(c): State<Arc<Counters>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    c.requests.fetch_add(1, Ordering::SeqCst);
    c.arrivals.lock().unwrap().push(Instant::now());
    if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some(&format!("Bearer {TOKEN}")) {
        return (StatusCode::UNAUTHORIZED, Json(json!({"error": "bad key"})));
    }
    let injected = c
        .fail_next
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    if injected {
        c.failures.fetch_add(1, Ordering::SeqCst);
        return (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": "injected"})));
    }
    c.models.lock().unwrap().push(body["model"].as_str().unwrap_or_default().to_string());
    let messages = body["messages"].as_array().cloned().unwrap_or_default();
    let text = |i: usize| messages.get(i).and_then(|m| m["content"].as_str()).unwrap_or_default().to_string();
    let Some((agent_id, view)) = parse_rendered(&text(0), &text(1)) else {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": "unrecognized prompt"})));
    };
    let reply = match scripted::respond(&agent_id, &view, InvocationMeta { seed: 0, attempt: 1 }) {
        Ok(r) => r,
        Err(e) => format!("I could not comply: {e}"),
    };
    let prompt_tokens: u64 = messages.iter().map(|m| tokens(m["content"].as_str().unwrap_or_default())).sum();
    let completion_tokens = tokens(&reply);
    c.prompt_tokens.fetch_add(prompt_tokens, Ordering::SeqCst);
    c.completion_tokens.fetch_add(completion_tokens, Ordering::SeqCst);
    c.served.fetch_add(1, Ordering::SeqCst);
    (
        StatusCode::OK,
        Json(json!({
            "id": "cmpl-mock",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": reply}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens,
                      "total_tokens": prompt_tokens + completion_tokens},
        })),
    )
}

/// Starts the server on an ephemeral port; it lives until the process exits.
pub fn start() -> MockChat {
    let counters = Arc::new(Counters::default());
    let app = Router::new().route("/v1/chat/completions", post(complete)).with_state(counters.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    MockChat {
        addr: rx.recv().unwrap(),
        counters,
    }
}
