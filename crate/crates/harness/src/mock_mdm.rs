//! Mock MDM inventory API with managedDevice-style records.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use ztf_cap::mdm::MdmCertificate;

use crate::server::{spawn, ServerHandle};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MockDevice {
    pub id: String,
    pub os_version: String,
    pub compliance_state: String,
    pub lost_mode_state: String,
    pub jail_broken: String,
    pub certificate: MdmCertificate,
}

impl MockDevice {
    pub fn compliant(id: impl Into<String>, cert: MdmCertificate) -> Self {
        Self {
            id: id.into(),
            os_version: "17.4.1".into(),
            compliance_state: "compliant".into(),
            lost_mode_state: "disabled".into(),
            jail_broken: "False".into(),
            certificate: cert,
        }
    }
}

struct MdmState {
    devices: Mutex<BTreeMap<String, Value>>,
    page_size: usize,
    token: String,
    fail_next: AtomicU32,
    requests: AtomicU32,
}

pub struct MockMdm {
    state: Arc<MdmState>,
    pub server: ServerHandle,
}

#[derive(Deserialize)]
struct PageParams {
    page: Option<usize>,
}

async fn list(State(s): State<Arc<MdmState>>, headers: HeaderMap, Query(p): Query<PageParams>) -> impl IntoResponse {
    s.requests.fetch_add(1, Ordering::SeqCst);
    let authorized = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v == format!("Bearer {}", s.token));
    if !authorized {
        return (StatusCode::UNAUTHORIZED, Json(json!({ "error": "unauthorized" })));
    }
    if s
        .fail_next
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok()
    {
        return (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": "injected failure" })));
    }
    let page = p.page.unwrap_or(1).max(1);
    let devices = s.devices.lock().unwrap();
    let all: Vec<&Value> = devices.values().collect();
    let start = (page - 1) * s.page_size;
    let chunk: Vec<&Value> = all.iter().skip(start).take(s.page_size).copied().collect();
    let next = (start + s.page_size < all.len()).then(|| format!("/managedDevices?page={}", page + 1));
    (StatusCode::OK, Json(json!({ "devices": chunk, "next": next })))
}

impl MockMdm {
    pub async fn start(token: impl Into<String>, page_size: usize) -> std::io::Result<Self> {
        let state = Arc::new(MdmState {
            devices: Mutex::new(BTreeMap::new()),
            page_size: page_size.max(1),
            token: token.into(),
            fail_next: AtomicU32::new(0),
            requests: AtomicU32::new(0),
        });
        let router = Router::new().route("/managedDevices", get(list)).with_state(state.clone());
        Ok(Self { state, server: spawn(router).await? })
    }

    pub fn url(&self) -> String {
        self.server.url()
    }

    pub fn set_device(&self, device: &MockDevice) {
        let value = serde_json::to_value(device).expect("device serializes");
        self.state.devices.lock().unwrap().insert(device.id.clone(), value);
    }

    /// Inserts an arbitrary raw object, e.g. one missing required fields.
    pub fn set_raw(&self, key: impl Into<String>, value: Value) {
        self.state.devices.lock().unwrap().insert(key.into(), value);
    }

    pub fn remove(&self, id: &str) {
        self.state.devices.lock().unwrap().remove(id);
    }

    /// The next `n` requests answer 500.
    pub fn fail_next(&self, n: u32) {
        self.state.fail_next.store(n, Ordering::SeqCst);
    }

    pub fn requests(&self) -> u32 {
        self.state.requests.load(Ordering::SeqCst)
    }
}
