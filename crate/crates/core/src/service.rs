//! The CAP service: registries, linking, storage and release wired together.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::AuditLog;
use crate::linking::{
    parse_admin_table, Binding, BindingSelector, Challenge, ImportReport, LinkError, Linker, LinkerConfig,
    PseudoIdToken, SigningMaterial, TableError,
};
use crate::mdm::{device_to_context, poll_devices, MdmConfig, MdmDeviceRecord, MdmError};
use crate::model::{CapId, ContextRecord, CtxCName, CtxCSubjectRef, ModelError};
use crate::pki::TrustAnchors;
use crate::provider::{Consent, Provider, ProviderError, RpContextResponse, RpQuery};
use crate::radius::{ParseWarning, RadiusIngestor};
use crate::registry::Directory;
use crate::store::{ContextStore, DerivedState, IngestOutcome, StoreConfig, StoreError, StoredContext, SweepReport};
use crate::webhook::{WebhookConfig, WebhookDispatcher};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown CtxC {0}")]
    UnknownCtxC(String),
    #[error("authentication failed")]
    AuthFailed,
    #[error("record source {record} does not match authenticated CtxC {authenticated}")]
    SourceMismatch { record: String, authenticated: String },
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mdm(#[from] MdmError),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownCtxC(_) => "UnknownCtxC",
            ServiceError::AuthFailed => "AuthFailed",
            ServiceError::SourceMismatch { .. } => "SourceMismatch",
            ServiceError::Link(e) => e.code(),
            ServiceError::Provider(e) => e.code(),
            ServiceError::Table(_) => "BadHeader",
            ServiceError::Store(_) => "StoreFailure",
            ServiceError::Model(ModelError::MalformedCertificate(_)) => "MalformedCertificate",
            ServiceError::Model(_) => "InvalidInput",
            ServiceError::Mdm(MdmError::MdmUnavailable(_)) => "MdmUnavailable",
            ServiceError::Mdm(MdmError::MdmAuthFailed(_)) => "MdmAuthFailed",
        }
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default)]
pub struct CapConfig {
    pub linker: LinkerConfig,
    pub store: StoreConfig,
    pub webhook: WebhookConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub stored: usize,
    pub pending: usize,
    pub duplicate: usize,
    pub rejected: usize,
    pub warnings: Vec<ParseWarning>,
}

impl IngestReport {
    fn count(&mut self, outcome: &IngestOutcome) {
        match outcome {
            IngestOutcome::Stored { .. } => self.stored += 1,
            IngestOutcome::Pending { .. } => self.pending += 1,
            IngestOutcome::Duplicate { .. } => self.duplicate += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdmPollReport {
    pub ctxc: String,
    pub devices: usize,
    pub retries: u32,
    pub ingest: IngestReport,
}

pub struct Cap {
    pub directory: Arc<Directory>,
    pub audit: Arc<AuditLog>,
    pub linker: Linker,
    pub store: ContextStore,
    pub provider: Provider,
    pub radius: RadiusIngestor,
    mdms: RwLock<Vec<MdmConfig>>,
    http: reqwest::Client,
    // Serializes commit + webhook fan-out so RP queues see sequence order.
    commit: Mutex<()>,
}

impl Cap {
    pub fn new(
        material: &SigningMaterial,
        trust: TrustAnchors,
        store: ContextStore,
        config: CapConfig,
    ) -> Result<Self> {
        let directory = Arc::new(Directory::new());
        let audit = Arc::new(AuditLog::new());
        let linker = Linker::new(material, trust, directory.clone(), audit.clone(), config.linker)?;
        let provider = Provider::new(directory.clone(), audit.clone(), WebhookDispatcher::new(config.webhook));
        Ok(Self {
            directory,
            audit,
            linker,
            store,
            provider,
            radius: RadiusIngestor::new(),
            mdms: RwLock::new(Vec::new()),
            http: reqwest::Client::new(),
            commit: Mutex::new(()),
        })
    }

    /// An in-memory CAP with fresh keys, mostly for tests.
    pub fn ephemeral(trust: TrustAnchors) -> Self {
        Self::new(&SigningMaterial::generate(), trust, ContextStore::in_memory(StoreConfig::default()), CapConfig::default())
            .expect("fresh signing material is valid")
    }

    fn authenticate_ctxc(&self, source: &CtxCName, token: &str) -> Result<()> {
        match self.directory.check_ctxc_token(source, token) {
            None => Err(ServiceError::UnknownCtxC(source.to_string())),
            Some(false) => Err(ServiceError::AuthFailed),
            Some(true) => Ok(()),
        }
    }

    fn commit(&self, record: ContextRecord, now: DateTime<Utc>) -> Result<IngestOutcome> {
        let _guard = self.commit.lock().unwrap();
        let (outcome, stored) = self
            .store
            .ingest(record, |src, subj| self.linker.resolve_subject(src, subj), now)?;
        if let Some(stored) = stored {
            self.provider.deliver_events(&stored, now);
        }
        Ok(outcome)
    }

    /// Generic context ingestion for an authenticated CtxC.
    pub fn ingest_context(
        &self,
        source: &CtxCName,
        token: &str,
        record: ContextRecord,
        now: DateTime<Utc>,
    ) -> Result<IngestOutcome> {
        self.authenticate_ctxc(source, token)?;
        if record.source() != source {
            return Err(ServiceError::SourceMismatch {
                record: record.source().to_string(),
                authenticated: source.to_string(),
            });
        }
        if let CtxCSubjectRef::LocalId { ctxc, .. } = record.subject() {
            if ctxc != source {
                return Err(ServiceError::SourceMismatch { record: ctxc.to_string(), authenticated: source.to_string() });
            }
        }
        self.commit(record, now)
    }

    /// Ingests a batch of raw detail-file bytes.
    pub fn ingest_radius(&self, source: &CtxCName, token: &str, body: &[u8], now: DateTime<Utc>) -> Result<IngestReport> {
        self.authenticate_ctxc(source, token)?;
        let batch = self.radius.ingest(source, body, now);
        let mut report = IngestReport { warnings: batch.warnings, ..Default::default() };
        for record in batch.contexts {
            report.count(&self.commit(record, now)?);
        }
        Ok(report)
    }

    /// Ingests device records already fetched from an MDM registered as `ctxc`.
    pub fn ingest_mdm_devices(&self, ctxc: &CtxCName, devices: &[MdmDeviceRecord], now: DateTime<Utc>) -> Result<IngestReport> {
        if !self.directory.has_ctxc(ctxc) {
            return Err(ServiceError::UnknownCtxC(ctxc.to_string()));
        }
        let mut report = IngestReport::default();
        for device in devices {
            match device_to_context(device, ctxc, now) {
                Ok(record) => report.count(&self.commit(record, now)?),
                Err(e) => {
                    tracing::warn!(mdm = %ctxc, device = %device.device_id, error = %e, "device record rejected");
                    report.rejected += 1;
                    report.warnings.push(ParseWarning { line: 0, message: format!("device {}: {e}", device.device_id) });
                }
            }
        }
        Ok(report)
    }

    /// Registers an MDM endpoint to poll. Its CtxC name is registered with
    /// an internal token if it is not known yet.
    pub fn add_mdm(&self, config: MdmConfig) {
        if !self.directory.has_ctxc(&config.ctxc) {
            self.directory.register_ctxc(config.ctxc.clone());
        }
        let mut mdms = self.mdms.write().unwrap();
        mdms.retain(|m| m.ctxc != config.ctxc);
        mdms.push(config);
    }

    pub fn mdm_configs(&self) -> Vec<MdmConfig> {
        self.mdms.read().unwrap().clone()
    }

    pub async fn poll_mdm(&self, config: &MdmConfig) -> Result<MdmPollReport> {
        let now = Utc::now();
        let polled = poll_devices(&self.http, config, now).await?;
        let ingest = self.ingest_mdm_devices(&config.ctxc, &polled.devices, Utc::now())?;
        Ok(MdmPollReport { ctxc: config.ctxc.to_string(), devices: polled.devices.len(), retries: polled.retries, ingest })
    }

    pub async fn poll_all_mdms(&self) -> Vec<Result<MdmPollReport>> {
        let mut out = Vec::new();
        for config in self.mdm_configs() {
            out.push(self.poll_mdm(&config).await);
        }
        out
    }

    fn after_binding(&self, binding: &Binding, now: DateTime<Utc>) -> Result<usize> {
        let _guard = self.commit.lock().unwrap();
        let flushed = self
            .store
            .flush_pending(&binding.cap_id, |src, subj| self.linker.resolve_subject(src, subj), now)?;
        for stored in &flushed {
            self.provider.deliver_events(stored, now);
        }
        Ok(flushed.len())
    }

    pub fn issue_pseudo_id(&self, cap_id: &CapId, audience: &CtxCName, now: DateTime<Utc>) -> Result<(PseudoIdToken, Binding)> {
        let (token, binding) = self.linker.issue_pseudo_id(cap_id, audience, now)?;
        self.after_binding(&binding, now)?;
        Ok((token, binding))
    }

    pub fn import_admin_table(&self, csv: &str, now: DateTime<Utc>) -> Result<ImportReport> {
        let parsed = parse_admin_table(csv)?;
        let outcome = self.linker.import_admin_table(&parsed.rows, now);
        for b in &outcome.new_bindings {
            self.after_binding(b, now)?;
        }
        let mut report = outcome.report;
        report.rejected.extend(parsed.rejected);
        report.rejected.sort_by_key(|r| r.line);
        Ok(report)
    }

    /// Starts a certificate challenge for the subject owning `agent_token`.
    pub fn create_challenge(&self, agent_token: &str, now: DateTime<Utc>) -> Result<Challenge> {
        let cap_id = self.directory.subject_for_agent_token(agent_token).ok_or(ServiceError::AuthFailed)?;
        Ok(self.linker.create_challenge(&cap_id, now)?)
    }

    pub fn complete_challenge(
        &self,
        challenge_id: &str,
        cert_chain: &[Vec<u8>],
        signature: &[u8],
        now: DateTime<Utc>,
    ) -> Result<Binding> {
        let binding = self.linker.verify_challenge_response(challenge_id, cert_chain, signature, now)?;
        self.after_binding(&binding, now)?;
        Ok(binding)
    }

    pub fn revoke_binding(&self, selector: &BindingSelector, now: DateTime<Utc>) -> Result<Binding> {
        Ok(self.linker.revoke_binding(selector, now)?)
    }

    pub fn grant_consent(
        &self,
        cap_id: &CapId,
        rp_id: &str,
        prefixes: BTreeSet<String>,
        expires_at: Option<DateTime<Utc>>,
        now: DateTime<Utc>,
    ) -> Result<Consent> {
        Ok(self.provider.grant_consent(cap_id, rp_id, prefixes, expires_at, now)?)
    }

    pub fn rp_get_contexts(&self, token: &str, cap_id: &CapId, q: &RpQuery, now: DateTime<Utc>) -> Result<RpContextResponse> {
        Ok(self.provider.rp_get_contexts(token, cap_id, q, &self.store, now)?)
    }

    pub fn admin_contexts(&self, cap_id: &CapId, last: usize, now: DateTime<Utc>) -> (DerivedState, Vec<StoredContext>) {
        (self.store.derived_state(cap_id, now), self.store.latest(cap_id, last))
    }

    pub fn sweep(&self, now: DateTime<Utc>) -> Result<SweepReport> {
        let _guard = self.commit.lock().unwrap();
        Ok(self.store.retention_sweep(now)?)
    }
}
