//! FreeRADIUS detail-file ingestion.
//!
//! A detail file is a sequence of blank-line separated records. Each record
//! starts with a `Www Mmm dd hh:mm:ss yyyy` timestamp line (UTC by contract)
//! followed by tab-indented `Name = Value` attribute lines. Authentication
//! records carry the EAP-TLS client certificate's serial and issuer; accounting
//! records carry session status and cumulative octet counters.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CertificateRef, ContextRecord, CtxCName, CtxCSubjectRef, ModelError, Payload, Scalar};

pub const CONTEXT_AUTH: &str = "radius.auth";
pub const CONTEXT_CONNECTIVITY: &str = "radius.connectivity";
pub const CONTEXT_TRAFFIC: &str = "radius.traffic";
pub const DEFAULT_STALE_AFTER_SECS: i64 = 900;

const MAX_OCTETS: u64 = i64::MAX as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthResult {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadiusAuthRecord {
    pub timestamp: DateTime<Utc>,
    pub tls_client_cert_serial: Option<String>,
    pub tls_client_cert_issuer: Option<String>,
    pub called_station_id: Option<String>,
    pub calling_station_id: Option<String>,
    pub result: AuthResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AcctStatus {
    Start,
    InterimUpdate,
    Stop,
}

impl AcctStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AcctStatus::Start => "Start",
            AcctStatus::InterimUpdate => "Interim-Update",
            AcctStatus::Stop => "Stop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadiusAcctRecord {
    pub timestamp: DateTime<Utc>,
    pub acct_status_type: AcctStatus,
    pub acct_session_id: String,
    pub acct_input_octets: u64,
    pub acct_output_octets: u64,
    pub calling_station_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadiusRecord {
    Auth(RadiusAuthRecord),
    Acct(RadiusAcctRecord),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    /// 1-based line where the offending record starts.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DetailParse {
    pub records: Vec<RadiusRecord>,
    pub warnings: Vec<ParseWarning>,
}

/// Parses a detail stream. Never fails: malformed records are skipped and
/// reported as warnings.
pub fn parse_detail_stream(input: &[u8]) -> DetailParse {
    let text = String::from_utf8_lossy(input);
    let mut out = DetailParse::default();
    let mut block: Vec<(usize, &str)> = Vec::new();
    for (idx, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            if !block.is_empty() {
                parse_block(&block, &mut out);
                block.clear();
            }
        } else {
            block.push((idx + 1, line));
        }
    }
    if !block.is_empty() {
        parse_block(&block, &mut out);
    }
    out
}

fn parse_block(block: &[(usize, &str)], out: &mut DetailParse) {
    let start = block[0].0;
    match parse_record(block) {
        Ok(record) => out.records.push(record),
        Err(message) => out.warnings.push(ParseWarning { line: start, message }),
    }
}

pub fn parse_detail_timestamp(line: &str) -> Option<DateTime<Utc>> {
    let collapsed = line.split_whitespace().collect::<Vec<_>>().join(" ");
    NaiveDateTime::parse_from_str(&collapsed, "%a %b %d %H:%M:%S %Y")
        .ok()
        .map(|naive| naive.and_utc())
}

/// Formats a timestamp the way detail files print it.
pub fn format_detail_timestamp(ts: DateTime<Utc>) -> String {
    ts.format("%a %b %e %H:%M:%S %Y").to_string()
}

fn parse_record(block: &[(usize, &str)]) -> Result<RadiusRecord, String> {
    let (_, first) = block[0];
    if first.starts_with([' ', '\t']) {
        return Err("record does not start with a timestamp line".into());
    }
    let timestamp = parse_detail_timestamp(first)
        .ok_or_else(|| format!("unparseable timestamp line {first:?}"))?;

    let mut attrs: HashMap<&str, String> = HashMap::new();
    for &(line_no, line) in &block[1..] {
        if !line.starts_with([' ', '\t']) {
            return Err(format!("line {line_no}: attribute line is not indented"));
        }
        let (name, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {line_no}: expected `Name = Value`"))?;
        let name = name.trim();
        if name.is_empty()
            || !name
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b':' | b'.'))
        {
            return Err(format!("line {line_no}: bad attribute name {name:?}"));
        }
        let value = parse_value(value.trim()).ok_or_else(|| format!("line {line_no}: bad value"))?;
        attrs.entry(name).or_insert(value);
    }

    if let Some(status) = attrs.get("Acct-Status-Type") {
        let acct_status_type = match status.as_str() {
            "Start" | "1" => AcctStatus::Start,
            "Stop" | "2" => AcctStatus::Stop,
            "Interim-Update" | "Alive" | "3" => AcctStatus::InterimUpdate,
            other => return Err(format!("unsupported Acct-Status-Type {other:?}")),
        };
        let acct_session_id = non_empty(&attrs, "Acct-Session-Id").ok_or("missing Acct-Session-Id")?;
        let calling_station_id =
            non_empty(&attrs, "Calling-Station-Id").ok_or("missing Calling-Station-Id")?;
        return Ok(RadiusRecord::Acct(RadiusAcctRecord {
            timestamp,
            acct_status_type,
            acct_session_id,
            acct_input_octets: octets(&attrs, "Acct-Input-Octets")?,
            acct_output_octets: octets(&attrs, "Acct-Output-Octets")?,
            calling_station_id,
        }));
    }

    let is_auth = ["TLS-Client-Cert-Serial", "TLS-Client-Cert-Issuer", "Packet-Type", "Post-Auth-Type"]
        .iter()
        .any(|k| attrs.contains_key(k));
    if !is_auth {
        return Err("neither an accounting nor an authentication record".into());
    }
    let result = match (
        attrs.get("Packet-Type").map(String::as_str),
        attrs.get("Post-Auth-Type").map(|s| s.to_ascii_lowercase()),
    ) {
        (Some("Access-Accept"), _) => AuthResult::Accept,
        (Some("Access-Reject"), _) => AuthResult::Reject,
        (None, Some(p)) if p == "accept" => AuthResult::Accept,
        (None, Some(p)) if p == "reject" => AuthResult::Reject,
        _ => return Err("authentication record without a result".into()),
    };
    let serial = non_empty(&attrs, "TLS-Client-Cert-Serial");
    let issuer = non_empty(&attrs, "TLS-Client-Cert-Issuer");
    if result == AuthResult::Accept && (serial.is_none() || issuer.is_none()) {
        return Err("accept record lacks TLS client certificate serial/issuer".into());
    }
    Ok(RadiusRecord::Auth(RadiusAuthRecord {
        timestamp,
        tls_client_cert_serial: serial,
        tls_client_cert_issuer: issuer,
        called_station_id: non_empty(&attrs, "Called-Station-Id"),
        calling_station_id: non_empty(&attrs, "Calling-Station-Id"),
        result,
    }))
}

fn non_empty(attrs: &HashMap<&str, String>, key: &str) -> Option<String> {
    attrs.get(key).filter(|v| !v.is_empty()).cloned()
}

fn octets(attrs: &HashMap<&str, String>, key: &str) -> Result<u64, String> {
    match attrs.get(key) {
        None => Ok(0),
        Some(v) => v
            .parse::<u64>()
            .ok()
            .filter(|&n| n <= MAX_OCTETS)
            .ok_or_else(|| format!("{key} is not a valid counter: {v:?}")),
    }
}

fn parse_value(raw: &str) -> Option<String> {
    let Some(inner) = raw.strip_prefix('"') else {
        return (!raw.contains('"')).then(|| raw.to_owned());
    };
    let inner = inner.strip_suffix('"')?;
    let mut out = String::with_capacity(inner.len());
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => out.push(chars.next()?),
            '"' => return None,
            c => out.push(c),
        }
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RadiusError {
    #[error("reject records carry no linkable certificate identity")]
    RejectedAuthNotContextual,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// FreeRADIUS prints certificate names in OpenSSL's oneline form
/// (`/O=Lab/CN=Lab CA`, root-most RDN first). Converts that form to RFC 4514
/// order; other input is returned as is.
pub fn issuer_as_rfc4514(issuer: &str) -> String {
    let Some(rest) = issuer.trim().strip_prefix('/') else {
        return issuer.to_owned();
    };
    let mut parts: Vec<String> = rest
        .split('/')
        .filter(|p| !p.is_empty())
        .map(|p| match p.split_once('=') {
            Some((k, v)) => format!("{k}={}", v.replace('\\', "\\\\").replace(',', "\\,")),
            None => p.to_owned(),
        })
        .collect();
    parts.reverse();
    parts.join(", ")
}

/// Lowercase with `:` separators, so `AA-BB-..` and `aa:bb:..` match.
pub fn normalize_mac(mac: &str) -> String {
    mac.trim().to_ascii_lowercase().replace(['-', '.'], ":")
}

fn context(
    source: &CtxCName,
    subject: CtxCSubjectRef,
    context_type: &str,
    payload: Payload,
    observed_at: DateTime<Utc>,
    received_at: DateTime<Utc>,
) -> ContextRecord {
    // Log timestamps come from the CtxC's clock; never let them precede
    // reception on ours.
    let received_at = received_at.max(observed_at);
    ContextRecord::new(source.clone(), subject, context_type, payload, observed_at, received_at)
        .expect("context fields valid by construction")
}

pub fn auth_to_context(
    r: &RadiusAuthRecord,
    ctxc: &CtxCName,
    received_at: DateTime<Utc>,
) -> Result<ContextRecord, RadiusError> {
    if r.result != AuthResult::Accept {
        return Err(RadiusError::RejectedAuthNotContextual);
    }
    let (Some(serial), Some(issuer)) = (&r.tls_client_cert_serial, &r.tls_client_cert_issuer) else {
        return Err(RadiusError::RejectedAuthNotContextual);
    };
    let cert = CertificateRef::issuer_serial(&issuer_as_rfc4514(issuer), serial)?;
    let mut payload = Payload::new();
    payload.insert("result".into(), "accept".into());
    if let Some(ap) = &r.called_station_id {
        payload.insert("called_station_id".into(), ap.as_str().into());
    }
    if let Some(mac) = &r.calling_station_id {
        payload.insert("calling_station_id".into(), normalize_mac(mac).into());
    }
    Ok(context(ctxc, CtxCSubjectRef::CertRef { cert }, CONTEXT_AUTH, payload, r.timestamp, received_at))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub subject: CtxCSubjectRef,
    pub connected: bool,
    pub input_octets: u64,
    pub output_octets: u64,
    pub last_seen: DateTime<Utc>,
}

/// Advances one session with an accounting record.
///
/// Counters merge with `max` so out-of-order delivery never lowers them.
/// Records older than `last_seen` only contribute counters; the exception
/// is `Stop`, which always ends the session. A `radius.traffic` context is
/// emitted for every record and a `radius.connectivity` context whenever
/// `connected` flips.
pub fn apply_acct(
    state: Option<SessionState>,
    r: &RadiusAcctRecord,
    subject: &CtxCSubjectRef,
    source: &CtxCName,
    received_at: DateTime<Utc>,
) -> (SessionState, Vec<ContextRecord>) {
    let was_connected = state.as_ref().is_some_and(|s| s.connected);
    let fresh = state.is_none();
    let mut s = state.unwrap_or_else(|| SessionState {
        session_id: r.acct_session_id.clone(),
        subject: subject.clone(),
        connected: false,
        input_octets: 0,
        output_octets: 0,
        last_seen: r.timestamp,
    });
    let stale = !fresh && r.timestamp < s.last_seen;
    s.input_octets = s.input_octets.max(r.acct_input_octets);
    s.output_octets = s.output_octets.max(r.acct_output_octets);
    s.last_seen = s.last_seen.max(r.timestamp);
    match r.acct_status_type {
        AcctStatus::Start if !stale => s.connected = true,
        // An interim update opens a session we have not seen yet, but never
        // reopens one that was stopped.
        AcctStatus::InterimUpdate if fresh => s.connected = true,
        AcctStatus::Stop => s.connected = false,
        _ => {}
    }

    let mac = normalize_mac(&r.calling_station_id);
    let mut contexts = Vec::with_capacity(2);
    if s.connected != was_connected && !(fresh && !s.connected) {
        let mut payload = Payload::new();
        payload.insert("session_id".into(), s.session_id.as_str().into());
        payload.insert("connected".into(), s.connected.into());
        payload.insert("calling_station_id".into(), mac.as_str().into());
        contexts.push(context(source, s.subject.clone(), CONTEXT_CONNECTIVITY, payload, r.timestamp, received_at));
    }
    let mut payload = Payload::new();
    payload.insert("session_id".into(), s.session_id.as_str().into());
    payload.insert("status".into(), r.acct_status_type.as_str().into());
    payload.insert("connected".into(), s.connected.into());
    payload.insert("input_octets".into(), Scalar::Int(s.input_octets as i64));
    payload.insert("output_octets".into(), Scalar::Int(s.output_octets as i64));
    payload.insert("last_seen".into(), s.last_seen.to_rfc3339().into());
    payload.insert("calling_station_id".into(), mac.into());
    contexts.push(context(source, s.subject.clone(), CONTEXT_TRAFFIC, payload, r.timestamp, received_at));
    (s, contexts)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Connectivity {
    pub connected: bool,
    pub total_input: u64,
    pub total_output: u64,
}

/// Connected iff some session is open and was seen within `stale_after`;
/// totals sum every session, live or stopped.
pub fn device_connectivity(sessions: &[SessionState], now: DateTime<Utc>, stale_after: Duration) -> Connectivity {
    Connectivity {
        connected: sessions
            .iter()
            .any(|s| s.connected && now - s.last_seen <= stale_after),
        total_input: sessions.iter().map(|s| s.input_octets).sum(),
        total_output: sessions.iter().map(|s| s.output_octets).sum(),
    }
}

/// Rebuilds session states from stored `radius.traffic` contexts, given in
/// commit order. The newest record of a session decides `connected`.
pub fn sessions_from_traffic<'a>(records: impl IntoIterator<Item = &'a ContextRecord>) -> Vec<SessionState> {
    let mut sessions: HashMap<(String, String), SessionState> = HashMap::new();
    let mut order = Vec::new();
    for r in records {
        if r.context_type() != CONTEXT_TRAFFIC {
            continue;
        }
        let p = r.payload();
        let Some(session_id) = p.get("session_id").and_then(Scalar::as_str) else { continue };
        let input = p.get("input_octets").and_then(Scalar::as_i64).unwrap_or(0).max(0) as u64;
        let output = p.get("output_octets").and_then(Scalar::as_i64).unwrap_or(0).max(0) as u64;
        let connected = p.get("connected").and_then(Scalar::as_bool).unwrap_or(false);
        let last_seen = p
            .get("last_seen")
            .and_then(Scalar::as_str)
            .and_then(|s| DateTime::parse_from_rfc3339(s).ok())
            .map(|d| d.with_timezone(&Utc))
            .unwrap_or(r.observed_at());
        let key = (r.source().to_string(), session_id.to_owned());
        match sessions.get_mut(&key) {
            Some(s) => {
                s.input_octets = s.input_octets.max(input);
                s.output_octets = s.output_octets.max(output);
                s.last_seen = s.last_seen.max(last_seen);
                s.connected = connected;
            }
            None => {
                order.push(key.clone());
                sessions.insert(
                    key,
                    SessionState {
                        session_id: session_id.to_owned(),
                        subject: r.subject().clone(),
                        connected,
                        input_octets: input,
                        output_octets: output,
                        last_seen,
                    },
                );
            }
        }
    }
    order.into_iter().filter_map(|k| sessions.remove(&k)).collect()
}

/// Contexts and diagnostics produced from one detail batch.
#[derive(Debug, Clone, Default)]
pub struct RadiusBatch {
    pub contexts: Vec<ContextRecord>,
    pub warnings: Vec<ParseWarning>,
    pub auth_records: usize,
    pub acct_records: usize,
}

type SessionMap = HashMap<String, SessionState>;

/// Stateful detail-stream consumer.
///
/// Accounting records are attributed to the certificate of the most recent
/// accepted authentication from the same Calling-Station-Id on that CtxC;
/// without one they fall back to a `LocalId` keyed by the MAC, which an
/// administrator table can link. Session updates for one subject are
/// serialized; different subjects proceed in parallel.
#[derive(Debug, Default)]
pub struct RadiusIngestor {
    mac_subjects: Mutex<HashMap<(CtxCName, String), CtxCSubjectRef>>,
    sessions: Mutex<HashMap<CtxCSubjectRef, Arc<Mutex<SessionMap>>>>,
    session_subjects: Mutex<HashMap<(CtxCName, String), CtxCSubjectRef>>,
}

impl RadiusIngestor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ingest(&self, source: &CtxCName, input: &[u8], received_at: DateTime<Utc>) -> RadiusBatch {
        let parsed = parse_detail_stream(input);
        let mut batch = RadiusBatch { warnings: parsed.warnings, ..Default::default() };
        for record in parsed.records {
            match record {
                RadiusRecord::Auth(auth) => {
                    batch.auth_records += 1;
                    match auth_to_context(&auth, source, received_at) {
                        Ok(ctx) => {
                            if let Some(mac) = &auth.calling_station_id {
                                self.mac_subjects
                                    .lock()
                                    .unwrap()
                                    .insert((source.clone(), normalize_mac(mac)), ctx.subject().clone());
                            }
                            batch.contexts.push(ctx);
                        }
                        Err(RadiusError::RejectedAuthNotContextual) => {}
                        Err(e) => batch.warnings.push(ParseWarning {
                            line: 0,
                            message: format!("auth record at {}: {e}", auth.timestamp),
                        }),
                    }
                }
                RadiusRecord::Acct(acct) => {
                    batch.acct_records += 1;
                    batch.contexts.extend(self.apply(source, &acct, received_at));
                }
            }
        }
        batch
    }

    fn subject_for(&self, source: &CtxCName, acct: &RadiusAcctRecord) -> CtxCSubjectRef {
        let session_key = (source.clone(), acct.acct_session_id.clone());
        let mut by_session = self.session_subjects.lock().unwrap();
        if let Some(subject) = by_session.get(&session_key) {
            return subject.clone();
        }
        let mac = normalize_mac(&acct.calling_station_id);
        let subject = self
            .mac_subjects
            .lock()
            .unwrap()
            .get(&(source.clone(), mac.clone()))
            .cloned()
            .unwrap_or(CtxCSubjectRef::LocalId { ctxc: source.clone(), local_id: mac });
        by_session.insert(session_key, subject.clone());
        subject
    }

    fn apply(&self, source: &CtxCName, acct: &RadiusAcctRecord, received_at: DateTime<Utc>) -> Vec<ContextRecord> {
        let subject = self.subject_for(source, acct);
        let slot = self
            .sessions
            .lock()
            .unwrap()
            .entry(subject.clone())
            .or_default()
            .clone();
        let mut sessions = slot.lock().unwrap();
        let key = format!("{source}\u{0}{}", acct.acct_session_id);
        let prev = sessions.remove(&key);
        let (next, contexts) = apply_acct(prev, acct, &subject, source, received_at);
        sessions.insert(key, next);
        contexts
    }

    /// Current in-memory sessions of one subject.
    pub fn sessions_of(&self, subject: &CtxCSubjectRef) -> Vec<SessionState> {
        let slot = self.sessions.lock().unwrap().get(subject).cloned();
        slot.map(|s| s.lock().unwrap().values().cloned().collect())
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn ts(secs: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 3, 4, 10, 0, 0).unwrap() + Duration::seconds(secs)
    }

    fn src() -> CtxCName {
        CtxCName::new("radius-lab").unwrap()
    }

    fn subj() -> CtxCSubjectRef {
        CtxCSubjectRef::CertRef { cert: CertificateRef::issuer_serial("CN=Lab CA", "1f3a").unwrap() }
    }

    fn acct(status: AcctStatus, at: i64, input: u64, output: u64) -> RadiusAcctRecord {
        RadiusAcctRecord {
            timestamp: ts(at),
            acct_status_type: status,
            acct_session_id: "s1".into(),
            acct_input_octets: input,
            acct_output_octets: output,
            calling_station_id: "AA-BB-CC-DD-EE-FF".into(),
        }
    }

    fn run(records: &[RadiusAcctRecord]) -> (Option<SessionState>, Vec<ContextRecord>) {
        let mut state = None;
        let mut all = Vec::new();
        for r in records {
            let (s, ctx) = apply_acct(state.take(), r, &subj(), &src(), ts(10_000));
            state = Some(s);
            all.extend(ctx);
        }
        (state, all)
    }

    fn connectivity_events(ctx: &[ContextRecord]) -> Vec<bool> {
        ctx.iter()
            .filter(|c| c.context_type() == CONTEXT_CONNECTIVITY)
            .map(|c| c.payload()["connected"].as_bool().unwrap())
            .collect()
    }

    #[test]
    fn single_start_record() {
        let text = "Mon Mar  4 10:00:00 2024\n\tAcct-Status-Type = Start\n\tAcct-Session-Id = \"s1\"\n\tCalling-Station-Id = \"aa:bb\"\n";
        let parsed = parse_detail_stream(text.as_bytes());
        assert!(parsed.warnings.is_empty(), "{:?}", parsed.warnings);
        match &parsed.records[..] {
            [RadiusRecord::Acct(r)] => {
                assert_eq!(r.acct_status_type, AcctStatus::Start);
                assert_eq!(r.acct_session_id, "s1");
                assert_eq!(r.timestamp, ts(0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn record_without_timestamp_is_skipped() {
        let text = "\tAcct-Status-Type = Start\n\tAcct-Session-Id = \"s1\"\n\nMon Mar  4 10:00:00 2024\n\tAcct-Status-Type = Stop\n\tAcct-Session-Id = \"s1\"\n\tCalling-Station-Id = \"m\"\n";
        let parsed = parse_detail_stream(text.as_bytes());
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.warnings.len(), 1);
        assert_eq!(parsed.warnings[0].line, 1);
    }

    #[test]
    fn fixture_file_counts() {
        // Nine blocks: three auth (one reject), five accounting, one with a
        // corrupt weekday.
        let text = include_str!("../tests/fixtures/detail_mixed.txt");
        let blocks = text.split("\n\n").filter(|b| !b.trim().is_empty()).count();
        assert_eq!(blocks, 9);
        let parsed = parse_detail_stream(text.as_bytes());
        let auth = parsed.records.iter().filter(|r| matches!(r, RadiusRecord::Auth(_))).count();
        let acct = parsed.records.iter().filter(|r| matches!(r, RadiusRecord::Acct(_))).count();
        assert_eq!((auth, acct), (3, 5));
        assert_eq!(parsed.warnings.len(), 1, "{:?}", parsed.warnings);
    }

    #[test]
    fn quoted_values_unescaped() {
        assert_eq!(parse_value(r#""CN=Doe\\, Jane""#).as_deref(), Some(r"CN=Doe\, Jane"));
        assert_eq!(parse_value(r#""a\"b""#).as_deref(), Some("a\"b"));
        assert_eq!(parse_value("Start").as_deref(), Some("Start"));
        assert_eq!(parse_value("\"open"), None);
    }

    #[test]
    fn auth_records_to_context() {
        let mut r = RadiusAuthRecord {
            timestamp: ts(0),
            tls_client_cert_serial: Some("1f3a".into()),
            tls_client_cert_issuer: Some("CN=Lab CA".into()),
            called_station_id: Some("ap-3F".into()),
            calling_station_id: None,
            result: AuthResult::Accept,
        };
        let ctx = auth_to_context(&r, &src(), ts(5)).unwrap();
        assert_eq!(ctx.subject(), &subj());
        assert_eq!(ctx.context_type(), CONTEXT_AUTH);
        assert_eq!(ctx.payload()["called_station_id"], Scalar::Str("ap-3F".into()));

        r.tls_client_cert_issuer = Some("cn=Lab CA".into());
        assert_eq!(auth_to_context(&r, &src(), ts(5)).unwrap().subject(), &subj());

        r.result = AuthResult::Reject;
        assert_eq!(auth_to_context(&r, &src(), ts(5)), Err(RadiusError::RejectedAuthNotContextual));
    }

    #[test]
    fn oneline_issuer_form() {
        assert_eq!(issuer_as_rfc4514("/C=JP/O=Lab/CN=Lab CA"), "CN=Lab CA, O=Lab, C=JP");
        assert_eq!(issuer_as_rfc4514("/O=Doe, Inc/CN=CA"), r"CN=CA, O=Doe\, Inc");
        assert_eq!(issuer_as_rfc4514("CN=Lab CA, O=Lab"), "CN=Lab CA, O=Lab");
    }

    #[test]
    fn absent_plus_start() {
        let (s, ctx) = run(&[acct(AcctStatus::Start, 0, 0, 0)]);
        assert!(s.unwrap().connected);
        assert_eq!(connectivity_events(&ctx), vec![true]);
    }

    #[test]
    fn start_interim_stop_totals() {
        let (s, ctx) = run(&[
            acct(AcctStatus::Start, 0, 0, 0),
            acct(AcctStatus::InterimUpdate, 60, 100, 50),
            acct(AcctStatus::Stop, 120, 250, 80),
        ]);
        let s = s.unwrap();
        assert_eq!((s.input_octets, s.output_octets), (250, 80));
        assert!(!s.connected);
        assert_eq!(connectivity_events(&ctx), vec![true, false]);
        assert_eq!(ctx.iter().filter(|c| c.context_type() == CONTEXT_TRAFFIC).count(), 3);
    }

    #[test]
    fn late_interim_keeps_max() {
        let (s, _) = run(&[
            acct(AcctStatus::Start, 0, 0, 0),
            acct(AcctStatus::InterimUpdate, 60, 100, 50),
            acct(AcctStatus::InterimUpdate, 30, 60, 40),
        ]);
        let s = s.unwrap();
        assert_eq!((s.input_octets, s.output_octets), (100, 50));
        assert_eq!(s.last_seen, ts(60));
    }

    #[test]
    fn duplicate_start_is_idempotent() {
        let (_, ctx) = run(&[acct(AcctStatus::Start, 0, 0, 0), acct(AcctStatus::Start, 0, 0, 0)]);
        assert_eq!(connectivity_events(&ctx), vec![true]);
    }

    #[test]
    fn connectivity_staleness_and_totals() {
        let live = SessionState {
            session_id: "a".into(),
            subject: subj(),
            connected: true,
            input_octets: 250,
            output_octets: 80,
            last_seen: ts(0),
        };
        let stale = Duration::seconds(DEFAULT_STALE_AFTER_SECS);
        assert!(!device_connectivity(std::slice::from_ref(&live), ts(2000), stale).connected);
        assert!(device_connectivity(std::slice::from_ref(&live), ts(900), stale).connected);
        let stopped = SessionState { session_id: "b".into(), connected: false, input_octets: 100, output_octets: 20, ..live.clone() };
        let c = device_connectivity(&[live, stopped], ts(10), stale);
        assert_eq!((c.total_input, c.total_output), (350, 100));
        assert_eq!(device_connectivity(&[], ts(0), stale), Connectivity::default());
    }

    #[test]
    fn ingestor_correlates_acct_by_mac() {
        let ing = RadiusIngestor::new();
        let text = "Mon Mar  4 10:00:00 2024\n\tPacket-Type = Access-Accept\n\tTLS-Client-Cert-Serial = \"0x1F3A\"\n\tTLS-Client-Cert-Issuer = \"cn = Lab CA\"\n\tCalling-Station-Id = \"AA-BB-CC-DD-EE-FF\"\n\n\
                    Mon Mar  4 10:00:05 2024\n\tAcct-Status-Type = Start\n\tAcct-Session-Id = \"s1\"\n\tCalling-Station-Id = \"aa:bb:cc:dd:ee:ff\"\n\n\
                    Mon Mar  4 10:00:06 2024\n\tAcct-Status-Type = Start\n\tAcct-Session-Id = \"s2\"\n\tCalling-Station-Id = \"11:22\"\n";
        let batch = ing.ingest(&src(), text.as_bytes(), ts(100));
        assert!(batch.warnings.is_empty(), "{:?}", batch.warnings);
        assert_eq!(batch.contexts.len(), 5);
        assert!(batch.contexts[..3].iter().all(|c| c.subject() == &subj()));
        assert_eq!(
            batch.contexts[3].subject(),
            &CtxCSubjectRef::LocalId { ctxc: src(), local_id: "11:22".into() }
        );
        assert_eq!(ing.sessions_of(&subj()).len(), 1);
    }

    #[test]
    fn sessions_rebuilt_from_traffic_contexts() {
        let (live, ctx) = run(&[
            acct(AcctStatus::Start, 0, 0, 0),
            acct(AcctStatus::InterimUpdate, 60, 100, 50),
            acct(AcctStatus::InterimUpdate, 30, 60, 40),
        ]);
        let rebuilt = sessions_from_traffic(&ctx);
        assert_eq!(rebuilt, vec![live.unwrap()]);
    }

    #[test]
    fn timestamp_format_round_trip() {
        let t = ts(3);
        assert_eq!(format_detail_timestamp(t), "Mon Mar  4 10:00:03 2024");
        assert_eq!(parse_detail_timestamp(&format_detail_timestamp(t)), Some(t));
        assert_eq!(parse_detail_timestamp("Tue Mar  4 10:00:03 2024"), None);
    }

    fn shuffled_session() -> impl Strategy<Value = Vec<RadiusAcctRecord>> {
        prop::collection::vec((1u64..10_000, 0u64..10_000), 0..12).prop_flat_map(|deltas| {
            let mut input = 0u64;
            let mut output = 0u64;
            let mut interims = Vec::new();
            for (i, (di, dout)) in deltas.iter().enumerate() {
                input += di;
                output += dout;
                interims.push(acct(AcctStatus::InterimUpdate, 10 * (i as i64 + 1), input, output));
            }
            let stop = acct(AcctStatus::Stop, 10 * (deltas.len() as i64 + 2), input, output);
            Just(interims).prop_shuffle().prop_map(move |mut v| {
                v.insert(0, acct(AcctStatus::Start, 0, 0, 0));
                v.push(stop.clone());
                v
            })
        })
    }

    proptest! {
        #[test]
        fn counters_monotone_and_events_alternate(records in shuffled_session()) {
            let mut state: Option<SessionState> = None;
            let mut events = Vec::new();
            for r in &records {
                let before = state.as_ref().map(|s| (s.input_octets, s.output_octets));
                let (s, ctx) = apply_acct(state.take(), r, &subj(), &src(), ts(10_000));
                if let Some((i, o)) = before {
                    prop_assert!(s.input_octets >= i && s.output_octets >= o);
                }
                events.extend(connectivity_events(&ctx));
                state = Some(s);
            }
            prop_assert!(events.windows(2).all(|w| w[0] != w[1]));
            let s = state.unwrap();
            let max_in = records.iter().map(|r| r.acct_input_octets).max().unwrap();
            let max_out = records.iter().map(|r| r.acct_output_octets).max().unwrap();
            prop_assert_eq!((s.input_octets, s.output_octets), (max_in, max_out));
        }

        #[test]
        fn parser_is_total(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
            let parsed = parse_detail_stream(&bytes);
            for r in parsed.records {
                match r {
                    RadiusRecord::Acct(a) => prop_assert!(!a.acct_session_id.is_empty()),
                    RadiusRecord::Auth(a) => if a.result == AuthResult::Accept {
                        prop_assert!(a.tls_client_cert_serial.is_some() && a.tls_client_cert_issuer.is_some());
                    },
                }
            }
        }
    }
}
