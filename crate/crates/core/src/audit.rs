//! Append-only audit trail for security-relevant events.

use std::collections::BTreeSet;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::CapId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleaseChannel {
    Query,
    Webhook,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    BindingCreated {
        key: String,
        cap_id: CapId,
        method: String,
    },
    BindingReplaced {
        key: String,
        old_cap_id: CapId,
        new_cap_id: CapId,
    },
    BindingRevoked {
        key: String,
        cap_id: CapId,
    },
    ConsentGranted {
        cap_id: CapId,
        rp_id: String,
        prefixes: BTreeSet<String>,
        expires_at: Option<DateTime<Utc>>,
    },
    ConsentRevoked {
        cap_id: CapId,
        rp_id: String,
    },
    ContextReleased {
        rp_id: String,
        cap_id: CapId,
        sequence: u64,
        context_type: String,
        channel: ReleaseChannel,
    },
    DerivedStateReleased {
        rp_id: String,
        cap_id: CapId,
        connectivity: bool,
        posture: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub event: AuditEvent,
}

#[derive(Debug, Default)]
pub struct AuditLog {
    entries: Mutex<Vec<AuditEntry>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, at: DateTime<Utc>, event: AuditEvent) {
        tracing::info!(target: "ztf_cap::audit", event = ?event, %at, "audit");
        self.entries.lock().unwrap().push(AuditEntry { at, event });
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
