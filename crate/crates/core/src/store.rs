//! Context store: committed contexts keyed by CAP-id, a pending queue for
//! subjects that are not linked yet, and derived-state materialization.
//!
//! Durability is an append-only log of `u32` little-endian length-prefixed
//! JSON entries. Opening a store replays the log; a torn final entry (crash
//! mid-write) is truncated away.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdm::{posture_from_payload, PostureState, CONTEXT_POSTURE};
use crate::model::{CapId, ContextRecord, CtxCName, CtxCSubjectRef};
use crate::radius::{device_connectivity, sessions_from_traffic, Connectivity, CONTEXT_TRAFFIC, DEFAULT_STALE_AFTER_SECS};

pub const DEFAULT_QUERY_LIMIT: usize = 500;
pub const DEFAULT_PENDING_TTL_HOURS: i64 = 72;
pub const DEFAULT_CONTEXT_TTL_DAYS: i64 = 30;
const MAX_ENTRY_BYTES: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store log I/O: {0}")]
    Io(#[from] io::Error),
    #[error("store log entry {offset} is corrupt: {message}")]
    Corrupt { offset: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredContext {
    pub sequence: u64,
    /// Identity of the accepted record, stable from ingest through eviction.
    pub receipt: u64,
    pub cap_id: CapId,
    pub resolved_at: DateTime<Utc>,
    pub record: ContextRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingContext {
    pub receipt: u64,
    pub record: ContextRecord,
    pub enqueued_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum IngestOutcome {
    Stored { cap_id: CapId, sequence: u64, receipt: u64 },
    Pending { receipt: u64 },
    /// Same (source, subject, type, observed_at, payload) as a live record.
    Duplicate { receipt: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictedFrom {
    Pending,
    Stored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eviction {
    pub receipt: u64,
    pub from: EvictedFrom,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepReport {
    pub pending_evicted: usize,
    pub contexts_evicted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Stored(u64),
    Pending,
    Evicted(EvictedFrom),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextQuery {
    /// Context-type prefixes; `None` matches everything.
    pub types: Option<Vec<String>>,
    pub since: Option<DateTime<Utc>>,
    pub limit: Option<usize>,
}

impl ContextQuery {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn types<I, S>(types: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { types: Some(types.into_iter().map(Into::into).collect()), ..Self::default() }
    }

    pub fn matches_type(&self, context_type: &str) -> bool {
        self.types
            .as_ref()
            .is_none_or(|ts| ts.iter().any(|p| context_type.starts_with(p.as_str())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedState {
    pub cap_id: CapId,
    pub connectivity: Connectivity,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub posture: Option<PostureState>,
    pub as_of: DateTime<Utc>,
    /// Newest `observed_at` among the contexts the state was derived from.
    pub latest_observed_at: Option<DateTime<Utc>>,
}

/// Derives state from a set of committed contexts (in sequence order).
pub fn derive_state(
    cap_id: &CapId,
    contexts: &[StoredContext],
    now: DateTime<Utc>,
    stale_after: Duration,
) -> DerivedState {
    let sessions = sessions_from_traffic(
        contexts
            .iter()
            .filter(|c| c.record.context_type() == CONTEXT_TRAFFIC)
            .map(|c| &c.record),
    );
    let posture = contexts
        .iter()
        .filter(|c| c.record.context_type() == CONTEXT_POSTURE)
        .max_by_key(|c| (c.record.observed_at(), c.sequence))
        .map(|c| posture_from_payload(c.record.payload()));
    let relevant = |c: &&StoredContext| {
        let t = c.record.context_type();
        t == CONTEXT_TRAFFIC || t == CONTEXT_POSTURE
    };
    DerivedState {
        cap_id: cap_id.clone(),
        connectivity: device_connectivity(&sessions, now, stale_after),
        posture,
        as_of: now,
        latest_observed_at: contexts.iter().filter(relevant).map(|c| c.record.observed_at()).max(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreConfig {
    pub pending_ttl: Duration,
    pub context_ttl: Duration,
    pub stale_after: Duration,
    /// `fsync` after every append.
    pub sync: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            pending_ttl: Duration::hours(DEFAULT_PENDING_TTL_HOURS),
            context_ttl: Duration::days(DEFAULT_CONTEXT_TTL_DAYS),
            stale_after: Duration::seconds(DEFAULT_STALE_AFTER_SECS),
            sync: false,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LogEntry {
    Commit { stored: StoredContext, from_pending: bool },
    Enqueue { pending: PendingContext },
    EvictPending { receipt: u64, at: DateTime<Utc> },
    EvictStored { sequence: u64, at: DateTime<Utc> },
}

#[derive(Debug, Default)]
struct Inner {
    next_sequence: u64,
    next_receipt: u64,
    stored: BTreeMap<u64, StoredContext>,
    by_cap: HashMap<CapId, BTreeSet<u64>>,
    /// Keyed by receipt, which is also enqueue order.
    pending: BTreeMap<u64, PendingContext>,
    dedup: HashMap<String, u64>,
    receipt_sequence: HashMap<u64, u64>,
    evictions: Vec<Eviction>,
}

impl Inner {
    fn apply(&mut self, entry: LogEntry) {
        match entry {
            LogEntry::Commit { stored, from_pending } => {
                if from_pending {
                    self.pending.remove(&stored.receipt);
                }
                self.next_sequence = self.next_sequence.max(stored.sequence + 1);
                self.next_receipt = self.next_receipt.max(stored.receipt + 1);
                self.dedup.insert(dedup_key(&stored.record), stored.receipt);
                self.receipt_sequence.insert(stored.receipt, stored.sequence);
                self.by_cap.entry(stored.cap_id.clone()).or_default().insert(stored.sequence);
                self.stored.insert(stored.sequence, stored);
            }
            LogEntry::Enqueue { pending } => {
                self.next_receipt = self.next_receipt.max(pending.receipt + 1);
                self.dedup.insert(dedup_key(&pending.record), pending.receipt);
                self.pending.insert(pending.receipt, pending);
            }
            LogEntry::EvictPending { receipt, at } => {
                if let Some(p) = self.pending.remove(&receipt) {
                    self.dedup.remove(&dedup_key(&p.record));
                    self.evictions.push(Eviction { receipt, from: EvictedFrom::Pending, at });
                }
            }
            LogEntry::EvictStored { sequence, at } => {
                if let Some(s) = self.stored.remove(&sequence) {
                    if let Some(set) = self.by_cap.get_mut(&s.cap_id) {
                        set.remove(&sequence);
                    }
                    self.dedup.remove(&dedup_key(&s.record));
                    self.receipt_sequence.remove(&s.receipt);
                    self.evictions.push(Eviction { receipt: s.receipt, from: EvictedFrom::Stored, at });
                }
            }
        }
    }
}

fn dedup_key(r: &ContextRecord) -> String {
    let subject = serde_json::to_string(r.subject()).expect("subject serializes");
    format!(
        "{}\u{0}{subject}\u{0}{}\u{0}{}\u{0}{}",
        r.source(),
        r.context_type(),
        r.observed_at().timestamp_nanos_opt().unwrap_or_default(),
        r.payload_digest()
    )
}

#[derive(Debug)]
pub struct ContextStore {
    inner: RwLock<Inner>,
    log: Option<Mutex<File>>,
    path: Option<PathBuf>,
    config: StoreConfig,
}

impl ContextStore {
    pub fn in_memory(config: StoreConfig) -> Self {
        Self { inner: RwLock::new(Inner::default()), log: None, path: None, config }
    }

    /// Opens (or creates) a log-backed store and replays it.
    pub fn open(path: impl AsRef<Path>, config: StoreConfig) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let mut inner = Inner::default();
        let mut offset = 0usize;
        while offset < bytes.len() {
            let Some(len_bytes) = bytes.get(offset..offset + 4) else { break };
            let len = u32::from_le_bytes(len_bytes.try_into().unwrap());
            if len > MAX_ENTRY_BYTES {
                return Err(StoreError::Corrupt { offset: offset as u64, message: format!("entry length {len}") });
            }
            let Some(body) = bytes.get(offset + 4..offset + 4 + len as usize) else { break };
            let entry: LogEntry = match serde_json::from_slice(body) {
                Ok(e) => e,
                Err(e) if offset + 4 + len as usize == bytes.len() => {
                    tracing::warn!(offset, error = %e, "discarding unparseable final log entry");
                    break;
                }
                Err(e) => return Err(StoreError::Corrupt { offset: offset as u64, message: e.to_string() }),
            };
            inner.apply(entry);
            offset += 4 + len as usize;
        }
        if offset < bytes.len() {
            tracing::warn!(path = %path.display(), kept = offset, dropped = bytes.len() - offset, "truncating torn log tail");
            file.set_len(offset as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        Ok(Self { inner: RwLock::new(inner), log: Some(Mutex::new(file)), path: Some(path), config })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    fn append(&self, entry: &LogEntry) -> Result<(), StoreError> {
        let Some(log) = &self.log else { return Ok(()) };
        let body = serde_json::to_vec(entry).expect("log entry serializes");
        let mut framed = Vec::with_capacity(body.len() + 4);
        framed.extend_from_slice(&(body.len() as u32).to_le_bytes());
        framed.extend_from_slice(&body);
        let mut file = log.lock().unwrap();
        file.write_all(&framed)?;
        if self.config.sync {
            file.sync_data()?;
        }
        Ok(())
    }

    fn write(&self, inner: &mut Inner, entry: LogEntry) -> Result<(), StoreError> {
        self.append(&entry)?;
        inner.apply(entry);
        Ok(())
    }

    /// Consults `resolve` exactly once, then commits or enqueues the record.
    /// Committed records are returned so callers can fan them out while the
    /// commit order is still fixed.
    pub fn ingest(
        &self,
        record: ContextRecord,
        resolve: impl FnOnce(&CtxCName, &CtxCSubjectRef) -> Option<CapId>,
        now: DateTime<Utc>,
    ) -> Result<(IngestOutcome, Option<StoredContext>), StoreError> {
        let mut inner = self.inner.write().unwrap();
        if let Some(&receipt) = inner.dedup.get(&dedup_key(&record)) {
            return Ok((IngestOutcome::Duplicate { receipt }, None));
        }
        let receipt = inner.next_receipt;
        match resolve(record.source(), record.subject()) {
            Some(cap_id) => {
                let sequence = inner.next_sequence;
                let stored = StoredContext { sequence, receipt, cap_id: cap_id.clone(), resolved_at: now, record };
                self.write(&mut inner, LogEntry::Commit { stored: stored.clone(), from_pending: false })?;
                Ok((IngestOutcome::Stored { cap_id, sequence, receipt }, Some(stored)))
            }
            None => {
                let pending = PendingContext { receipt, record, enqueued_at: now };
                self.write(&mut inner, LogEntry::Enqueue { pending })?;
                Ok((IngestOutcome::Pending { receipt }, None))
            }
        }
    }

    /// Commits, in enqueue order, every pending record that now resolves to
    /// `cap_id`.
    pub fn flush_pending(
        &self,
        cap_id: &CapId,
        resolve: impl Fn(&CtxCName, &CtxCSubjectRef) -> Option<CapId>,
        now: DateTime<Utc>,
    ) -> Result<Vec<StoredContext>, StoreError> {
        let mut inner = self.inner.write().unwrap();
        let ready: Vec<u64> = inner
            .pending
            .values()
            .filter(|p| resolve(p.record.source(), p.record.subject()).as_ref() == Some(cap_id))
            .map(|p| p.receipt)
            .collect();
        let mut out = Vec::with_capacity(ready.len());
        for receipt in ready {
            let record = inner.pending[&receipt].record.clone();
            let stored = StoredContext { sequence: inner.next_sequence, receipt, cap_id: cap_id.clone(), resolved_at: now, record };
            self.write(&mut inner, LogEntry::Commit { stored: stored.clone(), from_pending: true })?;
            out.push(stored);
        }
        if !out.is_empty() {
            tracing::info!(cap_id = %cap_id, count = out.len(), "flushed pending contexts");
        }
        Ok(out)
    }

    pub fn query(&self, cap_id: &CapId, q: &ContextQuery) -> Vec<StoredContext> {
        let inner = self.inner.read().unwrap();
        let limit = q.limit.unwrap_or(DEFAULT_QUERY_LIMIT);
        let Some(seqs) = inner.by_cap.get(cap_id) else { return Vec::new() };
        seqs.iter()
            .map(|s| &inner.stored[s])
            .filter(|c| q.matches_type(c.record.context_type()))
            .filter(|c| q.since.is_none_or(|since| c.record.received_at() >= since))
            .take(limit)
            .cloned()
            .collect()
    }

    /// The newest `n` contexts of a subject, oldest first.
    pub fn latest(&self, cap_id: &CapId, n: usize) -> Vec<StoredContext> {
        let inner = self.inner.read().unwrap();
        let Some(seqs) = inner.by_cap.get(cap_id) else { return Vec::new() };
        let mut out: Vec<_> = seqs.iter().rev().take(n).map(|s| inner.stored[s].clone()).collect();
        out.reverse();
        out
    }

    pub fn derived_state(&self, cap_id: &CapId, now: DateTime<Utc>) -> DerivedState {
        let contexts = self.query(
            cap_id,
            &ContextQuery { types: Some(vec![CONTEXT_TRAFFIC.into(), CONTEXT_POSTURE.into()]), since: None, limit: Some(usize::MAX) },
        );
        derive_state(cap_id, &contexts, now, self.config.stale_after)
    }

    pub fn retention_sweep(&self, now: DateTime<Utc>) -> Result<SweepReport, StoreError> {
        let mut inner = self.inner.write().unwrap();
        let pending: Vec<u64> = inner
            .pending
            .values()
            .filter(|p| now - p.enqueued_at > self.config.pending_ttl)
            .map(|p| p.receipt)
            .collect();
        let stored: Vec<u64> = inner
            .stored
            .values()
            .filter(|c| now - c.record.received_at() > self.config.context_ttl)
            .map(|c| c.sequence)
            .collect();
        let report = SweepReport { pending_evicted: pending.len(), contexts_evicted: stored.len() };
        for receipt in pending {
            self.write(&mut inner, LogEntry::EvictPending { receipt, at: now })?;
        }
        for sequence in stored {
            self.write(&mut inner, LogEntry::EvictStored { sequence, at: now })?;
        }
        tracing::info!(pending_evicted = report.pending_evicted, contexts_evicted = report.contexts_evicted, "retention sweep");
        Ok(report)
    }

    pub fn locate(&self, receipt: u64) -> Option<Location> {
        let inner = self.inner.read().unwrap();
        if let Some(&seq) = inner.receipt_sequence.get(&receipt) {
            return Some(Location::Stored(seq));
        }
        if inner.pending.contains_key(&receipt) {
            return Some(Location::Pending);
        }
        inner
            .evictions
            .iter()
            .find(|e| e.receipt == receipt)
            .map(|e| Location::Evicted(e.from))
    }

    pub fn all_stored(&self) -> Vec<StoredContext> {
        self.inner.read().unwrap().stored.values().cloned().collect()
    }

    pub fn pending(&self) -> Vec<PendingContext> {
        self.inner.read().unwrap().pending.values().cloned().collect()
    }

    pub fn evictions(&self) -> Vec<Eviction> {
        self.inner.read().unwrap().evictions.clone()
    }

    pub fn stored_len(&self) -> usize {
        self.inner.read().unwrap().stored.len()
    }

    pub fn pending_len(&self) -> usize {
        self.inner.read().unwrap().pending.len()
    }
}
