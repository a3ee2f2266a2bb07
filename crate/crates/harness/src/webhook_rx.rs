//! Webhook receiver that records deliveries per RP.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};

use ztf_cap::webhook::WebhookEvent;

use crate::server::{spawn, ServerHandle};

#[derive(Default)]
struct RxState {
    events: Mutex<BTreeMap<String, Vec<WebhookEvent>>>,
    fail_next: AtomicU32,
    attempts: AtomicU32,
}

pub struct WebhookReceiver {
    state: Arc<RxState>,
    pub server: ServerHandle,
}

async fn receive(State(s): State<Arc<RxState>>, Path(rp): Path<String>, Json(ev): Json<WebhookEvent>) -> StatusCode {
    s.attempts.fetch_add(1, Ordering::SeqCst);
    if s
        .fail_next
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok()
    {
        return StatusCode::SERVICE_UNAVAILABLE;
    }
    s.events.lock().unwrap().entry(rp).or_default().push(ev);
    StatusCode::NO_CONTENT
}

impl WebhookReceiver {
    pub async fn start() -> std::io::Result<Self> {
        let state = Arc::new(RxState::default());
        let router = Router::new().route("/hook/{rp}", post(receive)).with_state(state.clone());
        Ok(Self { state, server: spawn(router).await? })
    }

    pub fn url_for(&self, rp_id: &str) -> String {
        format!("{}/hook/{rp_id}", self.server.url())
    }

    pub fn events(&self, rp_id: &str) -> Vec<WebhookEvent> {
        self.state.events.lock().unwrap().get(rp_id).cloned().unwrap_or_default()
    }

    /// The next `n` deliveries answer 503.
    pub fn fail_next(&self, n: u32) {
        self.state.fail_next.store(n, Ordering::SeqCst);
    }

    pub fn attempts(&self) -> u32 {
        self.state.attempts.load(Ordering::SeqCst)
    }
}
