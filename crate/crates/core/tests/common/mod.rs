#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::Router;
use serde_json::Value;

pub type Handler = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

#[derive(Clone)]
struct Shared {
    handler: Arc<Handler>,
    log: Arc<Mutex<Vec<(HeaderMap, Value)>>>,
    hits: Arc<AtomicUsize>,
    delay: Duration,
    in_flight: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

/// A local chat-completions endpoint whose replies come from a closure of
/// `(request index, request body)`.
pub struct MockServer {
    pub addr: SocketAddr,
    shared: Shared,
    _shutdown: mpsc::Sender<()>,
}

impl MockServer {
    pub fn start(handler: impl Fn(usize, &Value) -> (u16, String) + Send + Sync + 'static) -> Self {
        Self::start_with_delay(Duration::ZERO, handler)
    }

    pub fn start_with_delay(
        delay: Duration,
        handler: impl Fn(usize, &Value) -> (u16, String) + Send + Sync + 'static,
    ) -> Self {
        let shared = Shared {
            handler: Arc::new(handler),
            log: Default::default(),
            hits: Default::default(),
            delay,
            in_flight: Default::default(),
            peak: Default::default(),
        };
        let (addr_tx, addr_rx) = mpsc::channel();
        let (stop_tx, stop_rx) = mpsc::channel::<()>();
        let state = shared.clone();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
            rt.block_on(async move {
                let app = Router::new().route("/v1/chat/completions", post(handle)).with_state(state);
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                let stop = async move {
                    let _ = tokio::task::spawn_blocking(move || stop_rx.recv()).await;
                };
                axum::serve(listener, app).with_graceful_shutdown(stop).await.unwrap();
            });
        });
        let addr = addr_rx.recv_timeout(Duration::from_secs(10)).expect("mock server starts");
        MockServer { addr, shared, _shutdown: stop_tx }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn hits(&self) -> usize {
        self.shared.hits.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.shared.peak.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<Value> {
        self.shared.log.lock().unwrap().iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn headers(&self) -> Vec<HeaderMap> {
        self.shared.log.lock().unwrap().iter().map(|(h, _)| h.clone()).collect()
    }
}

async fn handle(State(s): State<Shared>, headers: HeaderMap, body: String) -> (StatusCode, String) {
    let i = s.hits.fetch_add(1, Ordering::SeqCst);
    let now = s.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    s.peak.fetch_max(now, Ordering::SeqCst);
    if !s.delay.is_zero() {
        tokio::time::sleep(s.delay).await;
    }
    let value: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
    s.log.lock().unwrap().push((headers, value.clone()));
    let (code, text) = (s.handler)(i, &value);
    s.in_flight.fetch_sub(1, Ordering::SeqCst);
    (StatusCode::from_u16(code).unwrap(), text)
}

/// A chat-completions body with one choice per text.
pub fn chat_body(texts: &[&str], completion_tokens: u64) -> String {
    let choices: Vec<Value> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            serde_json::json!({
                "index": i,
                "message": {"role": "assistant", "content": t},
                "finish_reason": "stop"
            })
        })
        .collect();
    serde_json::json!({
        "id": "mock",
        "object": "chat.completion",
        "choices": choices,
        "usage": {"prompt_tokens": 11, "completion_tokens": completion_tokens, "total_tokens": 11 + completion_tokens}
    })
    .to_string()
}
