//! Output records. The JSON form of each type is the CLI's machine-readable
//! schema, independent of the server's wire format.

use std::collections::BTreeSet;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Fingerprints in table mode are cut to this many hex characters.
pub const FINGERPRINT_DISPLAY: usize = 16;

pub fn ts(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn opt_ts(t: &Option<DateTime<Utc>>) -> String {
    t.as_ref().map(ts).unwrap_or_else(|| "-".into())
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WireKey {
    Pseudo { pseudo_id: String, audience: String },
    AdminLocal { ctxc: String, local_id: String },
    CertKey { fingerprint: String },
}

#[derive(Deserialize)]
pub struct WireBinding {
    pub key: WireKey,
    pub cap_id: String,
    pub method: String,
    pub created_at: DateTime<Utc>,
    pub status: String,
    #[serde(default)]
    pub revoked_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Serialize)]
pub struct BindingView {
    pub method: String,
    /// Selector accepted by `bindings revoke --key`.
    pub key: String,
    pub cap_id: String,
    pub status: String,
    pub created_at: DateTime<Utc>,
    pub revoked_at: Option<DateTime<Utc>>,
}

impl From<WireBinding> for BindingView {
    fn from(b: WireBinding) -> Self {
        let key = match b.key {
            WireKey::Pseudo { pseudo_id, audience } => format!("pseudo:{audience}:{pseudo_id}"),
            WireKey::AdminLocal { ctxc, local_id } => format!("admin:{ctxc}:{local_id}"),
            WireKey::CertKey { fingerprint } => format!("cert:{fingerprint}"),
        };
        Self { method: b.method, key, cap_id: b.cap_id, status: b.status, created_at: b.created_at, revoked_at: b.revoked_at }
    }
}

impl BindingView {
    pub fn display_key(&self) -> String {
        match self.key.strip_prefix("cert:") {
            Some(fp) if fp.len() > FINGERPRINT_DISPLAY => format!("cert:{}", &fp[..FINGERPRINT_DISPLAY]),
            _ => self.key.clone(),
        }
    }

    pub fn row(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.display_key(),
            self.cap_id.clone(),
            self.status.clone(),
            ts(&self.created_at),
        ]
    }
}

pub const BINDING_HEADERS: [&str; 5] = ["METHOD", "KEY", "CAP_ID", "STATUS", "CREATED_AT"];

#[derive(Debug, Serialize, Deserialize)]
pub struct RejectedRow {
    pub line: usize,
    pub row: String,
    pub reason: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImportReport {
    pub imported: usize,
    pub rejected: Vec<RejectedRow>,
}

#[derive(Deserialize)]
pub struct WireConsent {
    pub cap_id: String,
    pub rp_id: String,
    pub context_type_prefixes: BTreeSet<String>,
    pub granted_at: DateTime<Utc>,
    #[serde(default)]
    pub expires_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Serialize)]
pub struct ConsentView {
    pub cap_id: String,
    pub rp_id: String,
    pub prefixes: Vec<String>,
    pub granted_at: DateTime<Utc>,
    pub expires_at: Option<DateTime<Utc>>,
}

impl From<WireConsent> for ConsentView {
    fn from(c: WireConsent) -> Self {
        Self {
            cap_id: c.cap_id,
            rp_id: c.rp_id,
            prefixes: c.context_type_prefixes.into_iter().collect(),
            granted_at: c.granted_at,
            expires_at: c.expires_at,
        }
    }
}

impl ConsentView {
    pub fn row(&self) -> Vec<String> {
        vec![
            self.cap_id.clone(),
            self.rp_id.clone(),
            self.prefixes.join(","),
            ts(&self.granted_at),
            opt_ts(&self.expires_at),
        ]
    }
}

pub const CONSENT_HEADERS: [&str; 5] = ["CAP_ID", "RP_ID", "PREFIXES", "GRANTED_AT", "EXPIRES_AT"];

#[derive(Debug, Serialize, Deserialize)]
pub struct ConsentRevoked {
    pub cap_id: String,
    pub rp_id: String,
    pub revoked: bool,
}

#[derive(Deserialize)]
pub struct WireConnectivity {
    pub connected: bool,
    pub total_input: u64,
    pub total_output: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostureView {
    pub level: String,
    pub reasons: Vec<String>,
    pub os_version: String,
}

#[derive(Deserialize)]
pub struct WireDerived {
    pub cap_id: String,
    pub connectivity: WireConnectivity,
    #[serde(default)]
    pub posture: Option<PostureView>,
    pub as_of: DateTime<Utc>,
    #[serde(default)]
    pub latest_observed_at: Option<DateTime<Utc>>,
}

#[derive(Deserialize)]
pub struct WireRecord {
    pub source: String,
    pub context_type: String,
    #[serde(default)]
    pub payload: Value,
    pub observed_at: DateTime<Utc>,
}

#[derive(Deserialize)]
pub struct WireStored {
    pub sequence: u64,
    pub record: WireRecord,
}

#[derive(Deserialize)]
pub struct WireContexts {
    pub derived: WireDerived,
    pub contexts: Vec<WireStored>,
}

#[derive(Debug, Serialize)]
pub struct ContextLine {
    pub sequence: u64,
    pub context_type: String,
    pub source: String,
    pub observed_at: DateTime<Utc>,
    pub payload: Value,
}

#[derive(Debug, Serialize)]
pub struct ContextsView {
    pub cap_id: String,
    pub connected: bool,
    pub total_input: u64,
    pub total_output: u64,
    pub posture: Option<PostureView>,
    pub as_of: DateTime<Utc>,
    pub latest_observed_at: Option<DateTime<Utc>>,
    pub contexts: Vec<ContextLine>,
}

impl From<WireContexts> for ContextsView {
    fn from(w: WireContexts) -> Self {
        let d = w.derived;
        Self {
            cap_id: d.cap_id,
            connected: d.connectivity.connected,
            total_input: d.connectivity.total_input,
            total_output: d.connectivity.total_output,
            posture: d.posture,
            as_of: d.as_of,
            latest_observed_at: d.latest_observed_at,
            contexts: w
                .contexts
                .into_iter()
                .map(|c| ContextLine {
                    sequence: c.sequence,
                    context_type: c.record.context_type,
                    source: c.record.source,
                    observed_at: c.record.observed_at,
                    payload: c.record.payload,
                })
                .collect(),
        }
    }
}

impl ContextsView {
    pub fn render(&self) -> String {
        let (posture, reasons) = match &self.posture {
            Some(p) if p.reasons.is_empty() => (p.level.clone(), "-".to_owned()),
            Some(p) => (p.level.clone(), p.reasons.join("; ")),
            None => ("-".to_owned(), "-".to_owned()),
        };
        let mut out = format!(
            "cap_id: {}\nconnected: {}\ntotal_input: {}\ntotal_output: {}\nposture: {posture}\nposture_reasons: {reasons}\nas_of: {}\nlatest_observed_at: {}\n",
            self.cap_id,
            self.connected,
            self.total_input,
            self.total_output,
            ts(&self.as_of),
            opt_ts(&self.latest_observed_at),
        );
        if self.contexts.is_empty() {
            out.push_str("\nno contexts\n");
        } else {
            let rows = self
                .contexts
                .iter()
                .map(|c| {
                    vec![
                        c.sequence.to_string(),
                        c.context_type.clone(),
                        c.source.clone(),
                        ts(&c.observed_at),
                        c.payload.to_string(),
                    ]
                })
                .collect();
            out.push('\n');
            out.push_str(&table(&["SEQ", "TYPE", "SOURCE", "OBSERVED_AT", "PAYLOAD"], rows));
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RpView {
    pub rp_id: String,
    pub webhook_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CtxcView {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubjectView {
    pub cap_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_token: Option<String>,
}

/// Left-aligned columns separated by two spaces; the last column is not padded.
pub fn table(headers: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let last = cells.len().saturating_sub(1);
        let mut s = String::new();
        for (i, cell) in cells.into_iter().enumerate() {
            if i == last {
                s.push_str(cell);
            } else {
                s.push_str(cell);
                s.push_str(&" ".repeat(widths[i] - cell.chars().count() + 2));
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(headers.to_vec());
    for row in &rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_align() {
        let t = table(&["A", "LONG"], vec![vec!["xyz".into(), "1".into()], vec!["q".into(), "22".into()]]);
        assert_eq!(t, "A    LONG\nxyz  1\nq    22\n");
    }

    #[test]
    fn cert_keys_are_truncated_for_display() {
        let fp = "ab".repeat(32);
        let b = BindingView {
            method: "certificate".into(),
            key: format!("cert:{fp}"),
            cap_id: "alice".into(),
            status: "active".into(),
            created_at: Utc::now(),
            revoked_at: None,
        };
        assert_eq!(b.display_key(), format!("cert:{}", &fp[..16]));
        let admin = BindingView { key: "admin:hr:emp-1".into(), ..b };
        assert_eq!(admin.display_key(), "admin:hr:emp-1");
    }
}
