//! MDM inventory polling and device posture derivation.

use std::time::Duration as StdDuration;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{CertificateRef, ContextRecord, CtxCName, CtxCSubjectRef, ModelError, Payload};

pub const CONTEXT_POSTURE: &str = "mdm.posture";
pub const DEFAULT_POLL_INTERVAL_SECS: u64 = 60;

/// The device certificate as the MDM reports it, before validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format")]
pub enum MdmCertificate {
    #[serde(rename = "der-base64url")]
    Der { der: String },
    #[serde(rename = "issuer-serial")]
    IssuerSerial { issuer: String, serial: String },
}

impl MdmCertificate {
    pub fn from_der(der: &[u8]) -> Self {
        MdmCertificate::Der { der: URL_SAFE_NO_PAD.encode(der) }
    }

    pub fn to_ref(&self) -> Result<CertificateRef, ModelError> {
        match self {
            MdmCertificate::Der { der } => {
                let bytes = URL_SAFE_NO_PAD
                    .decode(der.trim_end_matches('='))
                    .map_err(|e| ModelError::MalformedCertificate(e.to_string()))?;
                CertificateRef::full(bytes)
            }
            MdmCertificate::IssuerSerial { issuer, serial } => CertificateRef::issuer_serial(issuer, serial),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdmDeviceRecord {
    pub device_id: String,
    pub os_version: String,
    pub compliance_state: String,
    pub lost_mode_state: String,
    pub jail_broken: String,
    pub cert: MdmCertificate,
    pub polled_at: DateTime<Utc>,
}

/// Ordered by severity, so `max` picks the level that wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostureLevel {
    Unknown,
    Compliant,
    NonCompliant,
    Lost,
    Jailbroken,
}

impl PostureLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            PostureLevel::Unknown => "unknown",
            PostureLevel::Compliant => "compliant",
            PostureLevel::NonCompliant => "non_compliant",
            PostureLevel::Lost => "lost",
            PostureLevel::Jailbroken => "jailbroken",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "unknown" => PostureLevel::Unknown,
            "compliant" => PostureLevel::Compliant,
            "non_compliant" => PostureLevel::NonCompliant,
            "lost" => PostureLevel::Lost,
            "jailbroken" => PostureLevel::Jailbroken,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostureState {
    pub level: PostureLevel,
    pub reasons: Vec<String>,
    pub os_version: String,
}

/// Evaluates the posture rules; values compare trimmed and case-insensitively.
pub fn derive_posture(jail_broken: &str, lost_mode_state: &str, compliance_state: &str, os_version: &str) -> PostureState {
    let jb = jail_broken.trim();
    let lost = lost_mode_state.trim();
    let compliance = compliance_state.trim();
    let mut level = PostureLevel::Unknown;
    let mut reasons = Vec::new();
    if jb.eq_ignore_ascii_case("true") || jb.eq_ignore_ascii_case("yes") {
        level = level.max(PostureLevel::Jailbroken);
        reasons.push(format!("jail_broken={jb}"));
    }
    if !(lost.is_empty() || lost.eq_ignore_ascii_case("disabled")) {
        level = level.max(PostureLevel::Lost);
        reasons.push(format!("lost_mode_state={lost}"));
    }
    if compliance.eq_ignore_ascii_case("noncompliant") {
        level = level.max(PostureLevel::NonCompliant);
        reasons.push(format!("compliance_state={compliance}"));
    }
    if reasons.is_empty() && compliance.eq_ignore_ascii_case("compliant") {
        level = PostureLevel::Compliant;
        reasons.push(format!("compliance_state={compliance}"));
    }
    PostureState { level, reasons, os_version: os_version.to_owned() }
}

pub fn derive_record_posture(r: &MdmDeviceRecord) -> PostureState {
    derive_posture(&r.jail_broken, &r.lost_mode_state, &r.compliance_state, &r.os_version)
}

/// Recomputes posture from a stored `mdm.posture` payload.
pub fn posture_from_payload(payload: &Payload) -> PostureState {
    let field = |k: &str| payload.get(k).and_then(|v| v.as_str()).unwrap_or("");
    derive_posture(field("jail_broken"), field("lost_mode_state"), field("compliance_state"), field("os_version"))
}

pub fn device_to_context(
    r: &MdmDeviceRecord,
    ctxc: &CtxCName,
    received_at: DateTime<Utc>,
) -> Result<ContextRecord, ModelError> {
    let cert = r.cert.to_ref()?;
    let posture = derive_record_posture(r);
    let mut payload = Payload::new();
    payload.insert("os_version".into(), r.os_version.as_str().into());
    payload.insert("compliance_state".into(), r.compliance_state.as_str().into());
    payload.insert("lost_mode_state".into(), r.lost_mode_state.as_str().into());
    payload.insert("jail_broken".into(), r.jail_broken.as_str().into());
    payload.insert("posture_level".into(), posture.level.as_str().into());
    ContextRecord::new(
        ctxc.clone(),
        CtxCSubjectRef::CertRef { cert },
        CONTEXT_POSTURE,
        payload,
        r.polled_at,
        received_at.max(r.polled_at),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MdmError {
    #[error("MDM unavailable: {0}")]
    MdmUnavailable(String),
    #[error("MDM rejected credentials (HTTP {0})")]
    MdmAuthFailed(u16),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdmConfig {
    pub ctxc: CtxCName,
    /// Base URL; devices are listed at `{base}/managedDevices`.
    pub base_url: String,
    pub token: String,
    #[serde(default = "default_interval")]
    pub poll_interval_secs: u64,
    #[serde(default = "default_backoff_base")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap")]
    pub backoff_cap_ms: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
}

fn default_interval() -> u64 {
    DEFAULT_POLL_INTERVAL_SECS
}
fn default_backoff_base() -> u64 {
    5_000
}
fn default_backoff_cap() -> u64 {
    300_000
}
fn default_attempts() -> u32 {
    6
}

impl MdmConfig {
    pub fn new(ctxc: CtxCName, base_url: impl Into<String>, token: impl Into<String>) -> Self {
        Self {
            ctxc,
            base_url: base_url.into(),
            token: token.into(),
            poll_interval_secs: default_interval(),
            backoff_base_ms: default_backoff_base(),
            backoff_cap_ms: default_backoff_cap(),
            max_attempts: default_attempts(),
        }
    }

    /// Delay before retry number `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> StdDuration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        StdDuration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(self.backoff_cap_ms))
    }
}

#[derive(Debug, Clone, Default)]
pub struct PollResult {
    pub devices: Vec<MdmDeviceRecord>,
    pub warnings: Vec<String>,
    pub retries: u32,
}

/// Maps one raw inventory object, or explains why it was skipped.
pub fn map_device(raw: &Value, polled_at: DateTime<Utc>) -> Result<MdmDeviceRecord, String> {
    let text = |k: &str| raw.get(k).and_then(Value::as_str).unwrap_or("").to_owned();
    let device_id = text("id");
    if device_id.is_empty() {
        return Err("device object without id skipped".into());
    }
    let cert = match raw.get("certificate") {
        Some(c) => serde_json::from_value::<MdmCertificate>(c.clone())
            .map_err(|e| format!("device {device_id}: unusable certificate field: {e}"))?,
        None => return Err(format!("device {device_id}: no certificate, skipped")),
    };
    // jailBroken is a string in the Graph schema, but tolerate booleans.
    let jail_broken = match raw.get("jailBroken") {
        Some(Value::Bool(b)) => b.to_string(),
        _ => text("jailBroken"),
    };
    Ok(MdmDeviceRecord {
        device_id,
        os_version: text("osVersion"),
        compliance_state: text("complianceState"),
        lost_mode_state: text("lostModeState"),
        jail_broken,
        cert,
        polled_at,
    })
}

/// Fetches the full inventory, following `next` links. Each page request
/// is retried with capped exponential backoff on transport errors and 5xx.
pub async fn poll_devices(
    client: &reqwest::Client,
    config: &MdmConfig,
    now: DateTime<Utc>,
) -> Result<PollResult, MdmError> {
    let base = config.base_url.trim_end_matches('/');
    let first = reqwest::Url::parse(&format!("{base}/managedDevices"))
        .map_err(|e| MdmError::MdmUnavailable(e.to_string()))?;
    let mut result = PollResult::default();
    let mut next = Some(first);
    let mut pages = 0usize;
    while let Some(url) = next.take() {
        pages += 1;
        if pages > 10_000 {
            return Err(MdmError::MdmUnavailable("pagination does not terminate".into()));
        }
        let page = fetch_page(client, config, &url, &mut result.retries).await?;
        if let Some(devices) = page.get("devices").and_then(Value::as_array) {
            for raw in devices {
                match map_device(raw, now) {
                    Ok(d) => result.devices.push(d),
                    Err(w) => {
                        tracing::warn!(mdm = %config.ctxc, "{w}");
                        result.warnings.push(w);
                    }
                }
            }
        }
        next = match page.get("next").and_then(Value::as_str) {
            Some(link) if !link.is_empty() => {
                Some(url.join(link).map_err(|e| MdmError::MdmUnavailable(e.to_string()))?)
            }
            _ => None,
        };
    }
    Ok(result)
}

async fn fetch_page(
    client: &reqwest::Client,
    config: &MdmConfig,
    url: &reqwest::Url,
    retries: &mut u32,
) -> Result<Value, MdmError> {
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        let outcome = match client.get(url.clone()).bearer_auth(&config.token).send().await {
            Ok(resp) => {
                let status = resp.status();
                if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
                    return Err(MdmError::MdmAuthFailed(status.as_u16()));
                }
                if status.is_server_error() {
                    Err(format!("HTTP {status}"))
                } else if !status.is_success() {
                    return Err(MdmError::MdmUnavailable(format!("HTTP {status}")));
                } else {
                    resp.json::<Value>().await.map_err(|e| e.to_string())
                }
            }
            Err(e) => Err(e.to_string()),
        };
        match outcome {
            Ok(v) => return Ok(v),
            Err(e) if attempt >= config.max_attempts.max(1) => return Err(MdmError::MdmUnavailable(e)),
            Err(e) => {
                let delay = config.backoff(attempt);
                tracing::warn!(mdm = %config.ctxc, error = %e, ?delay, "MDM poll failed, retrying");
                *retries += 1;
                tokio::time::sleep(delay).await;
            }
        }
    }
}
