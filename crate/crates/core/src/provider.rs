//! Relying Party registry, consent registry and consent-filtered release.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditEvent, AuditLog, ReleaseChannel};
use crate::mdm::{PostureState, CONTEXT_POSTURE};
use crate::model::CapId;
use crate::radius::{Connectivity, CONTEXT_TRAFFIC};
use crate::registry::{generate_secret, Directory, TokenDigest};
use crate::store::{ContextQuery, ContextStore, StoredContext};
use crate::webhook::{WebhookDispatcher, WebhookEvent};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("bearer token does not identify a relying party")]
    AuthFailed,
    #[error("no active consent for this subject")]
    ConsentDenied,
    #[error("unknown cap_id")]
    UnknownCapId,
    #[error("unknown relying party")]
    UnknownRp,
    #[error("consent needs at least one context-type prefix")]
    EmptyPrefixSet,
    #[error("context-type prefixes must be non-empty strings")]
    InvalidPrefix,
    #[error("no consent for this subject and relying party")]
    NoSuchConsent,
    #[error("invalid rp_id {0:?}")]
    InvalidRpId(String),
}

impl ProviderError {
    pub fn code(&self) -> &'static str {
        match self {
            ProviderError::AuthFailed => "AuthFailed",
            ProviderError::ConsentDenied => "ConsentDenied",
            ProviderError::UnknownCapId => "UnknownCapId",
            ProviderError::UnknownRp => "UnknownRp",
            ProviderError::EmptyPrefixSet => "EmptyPrefixSet",
            ProviderError::InvalidPrefix => "InvalidPrefix",
            ProviderError::NoSuchConsent => "NoSuchConsent",
            ProviderError::InvalidRpId(_) => "InvalidInput",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpInfo {
    pub rp_id: String,
    pub webhook_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consent {
    pub cap_id: CapId,
    pub rp_id: String,
    pub context_type_prefixes: BTreeSet<String>,
    pub granted_at: DateTime<Utc>,
    pub expires_at: Option<DateTime<Utc>>,
}

impl Consent {
    pub fn is_active(&self, now: DateTime<Utc>) -> bool {
        self.expires_at.is_none_or(|e| now < e)
    }

    pub fn covers(&self, context_type: &str) -> bool {
        self.context_type_prefixes.iter().any(|p| context_type.starts_with(p.as_str()))
    }
}

/// Prefixes admitting exactly the types admitted by both sides: for each
/// pair the longer prefix survives when one extends the other.
pub fn intersect_prefixes<'a>(
    requested: impl IntoIterator<Item = &'a String>,
    consented: &BTreeSet<String>,
) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for r in requested {
        for c in consented {
            if r.starts_with(c.as_str()) {
                out.insert(r.clone());
            } else if c.starts_with(r.as_str()) {
                out.insert(c.clone());
            }
        }
    }
    out
}

fn admits(prefixes: &BTreeSet<String>, context_type: &str) -> bool {
    prefixes.iter().any(|p| context_type.starts_with(p.as_str()))
}

/// Derived state as released to one RP, with unconsented domains removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleasedState {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub connectivity: Option<Connectivity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub posture: Option<PostureState>,
    pub as_of: DateTime<Utc>,
    pub latest_observed_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpContextResponse {
    pub cap_id: CapId,
    pub contexts: Vec<StoredContext>,
    pub derived: ReleasedState,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RpQuery {
    pub types: Option<Vec<String>>,
    pub since: Option<DateTime<Utc>>,
    pub limit: Option<usize>,
}

#[derive(Debug)]
struct RpEntry {
    digest: TokenDigest,
    webhook_url: Option<String>,
}

pub struct Provider {
    rps: RwLock<BTreeMap<String, RpEntry>>,
    rp_tokens: RwLock<HashMap<TokenDigest, String>>,
    consents: RwLock<BTreeMap<(CapId, String), Consent>>,
    directory: Arc<Directory>,
    audit: Arc<AuditLog>,
    webhooks: WebhookDispatcher,
}

impl Provider {
    pub fn new(directory: Arc<Directory>, audit: Arc<AuditLog>, webhooks: WebhookDispatcher) -> Self {
        Self {
            rps: RwLock::default(),
            rp_tokens: RwLock::default(),
            consents: RwLock::default(),
            directory,
            audit,
            webhooks,
        }
    }

    pub fn webhooks(&self) -> &WebhookDispatcher {
        &self.webhooks
    }

    /// Registers (or re-keys) an RP and returns its bearer token.
    pub fn register_rp(&self, rp_id: &str, webhook_url: Option<String>) -> Result<String, ProviderError> {
        let token = generate_secret();
        self.register_rp_with_token(rp_id, webhook_url, &token)?;
        Ok(token)
    }

    pub fn register_rp_with_token(
        &self,
        rp_id: &str,
        webhook_url: Option<String>,
        token: &str,
    ) -> Result<(), ProviderError> {
        if rp_id.is_empty() || rp_id.len() > 128 || rp_id.contains(['/', '?', '#']) {
            return Err(ProviderError::InvalidRpId(rp_id.to_owned()));
        }
        let digest = TokenDigest::of(token);
        let mut rps = self.rps.write().unwrap();
        let mut tokens = self.rp_tokens.write().unwrap();
        if let Some(old) = rps.insert(rp_id.to_owned(), RpEntry { digest: digest.clone(), webhook_url }) {
            tokens.remove(&old.digest);
        }
        tokens.insert(digest, rp_id.to_owned());
        Ok(())
    }

    pub fn rps(&self) -> Vec<RpInfo> {
        self.rps
            .read()
            .unwrap()
            .iter()
            .map(|(id, e)| RpInfo { rp_id: id.clone(), webhook_url: e.webhook_url.clone() })
            .collect()
    }

    pub fn authenticate_rp(&self, token: &str) -> Result<String, ProviderError> {
        self.rp_tokens
            .read()
            .unwrap()
            .get(&TokenDigest::of(token))
            .cloned()
            .ok_or(ProviderError::AuthFailed)
    }

    /// Replaces any earlier consent for the pair.
    pub fn grant_consent(
        &self,
        cap_id: &CapId,
        rp_id: &str,
        prefixes: BTreeSet<String>,
        expires_at: Option<DateTime<Utc>>,
        now: DateTime<Utc>,
    ) -> Result<Consent, ProviderError> {
        if !self.directory.has_subject(cap_id) {
            return Err(ProviderError::UnknownCapId);
        }
        if !self.rps.read().unwrap().contains_key(rp_id) {
            return Err(ProviderError::UnknownRp);
        }
        if prefixes.is_empty() {
            return Err(ProviderError::EmptyPrefixSet);
        }
        if prefixes.iter().any(String::is_empty) {
            return Err(ProviderError::InvalidPrefix);
        }
        let consent = Consent {
            cap_id: cap_id.clone(),
            rp_id: rp_id.to_owned(),
            context_type_prefixes: prefixes,
            granted_at: now,
            expires_at,
        };
        let mut consents = self.consents.write().unwrap();
        consents.insert((cap_id.clone(), rp_id.to_owned()), consent.clone());
        self.audit.record(
            now,
            AuditEvent::ConsentGranted {
                cap_id: cap_id.clone(),
                rp_id: rp_id.to_owned(),
                prefixes: consent.context_type_prefixes.clone(),
                expires_at,
            },
        );
        Ok(consent)
    }

    pub fn revoke_consent(&self, cap_id: &CapId, rp_id: &str, now: DateTime<Utc>) -> Result<(), ProviderError> {
        let mut consents = self.consents.write().unwrap();
        consents
            .remove(&(cap_id.clone(), rp_id.to_owned()))
            .ok_or(ProviderError::NoSuchConsent)?;
        self.audit.record(now, AuditEvent::ConsentRevoked { cap_id: cap_id.clone(), rp_id: rp_id.to_owned() });
        Ok(())
    }

    pub fn consents(&self) -> Vec<Consent> {
        self.consents.read().unwrap().values().cloned().collect()
    }

    /// Consent-filtered query. Every released context and derived-state
    /// domain is audited under the same consent snapshot that admitted it.
    pub fn rp_get_contexts(
        &self,
        token: &str,
        cap_id: &CapId,
        q: &RpQuery,
        store: &ContextStore,
        now: DateTime<Utc>,
    ) -> Result<RpContextResponse, ProviderError> {
        let rp_id = self.authenticate_rp(token)?;
        let consents = self.consents.read().unwrap();
        let consent = consents
            .get(&(cap_id.clone(), rp_id.clone()))
            .filter(|c| c.is_active(now))
            .ok_or(ProviderError::ConsentDenied)?;
        let effective = match &q.types {
            Some(requested) => intersect_prefixes(requested, &consent.context_type_prefixes),
            None => consent.context_type_prefixes.clone(),
        };
        let contexts = store.query(
            cap_id,
            &ContextQuery { types: Some(effective.iter().cloned().collect()), since: q.since, limit: q.limit },
        );
        let state = store.derived_state(cap_id, now);
        let with_connectivity = admits(&effective, CONTEXT_TRAFFIC);
        let with_posture = admits(&effective, CONTEXT_POSTURE);
        for c in &contexts {
            self.audit.record(
                now,
                AuditEvent::ContextReleased {
                    rp_id: rp_id.clone(),
                    cap_id: cap_id.clone(),
                    sequence: c.sequence,
                    context_type: c.record.context_type().to_owned(),
                    channel: ReleaseChannel::Query,
                },
            );
        }
        self.audit.record(
            now,
            AuditEvent::DerivedStateReleased {
                rp_id: rp_id.clone(),
                cap_id: cap_id.clone(),
                connectivity: with_connectivity,
                posture: with_posture && state.posture.is_some(),
            },
        );
        Ok(RpContextResponse {
            cap_id: cap_id.clone(),
            contexts,
            derived: ReleasedState {
                connectivity: with_connectivity.then_some(state.connectivity),
                posture: if with_posture { state.posture } else { None },
                as_of: state.as_of,
                latest_observed_at: state.latest_observed_at,
            },
        })
    }

    /// Queues a newly committed context for every RP with a webhook and an
    /// active consent covering it. Returns the RPs it was queued for.
    pub fn deliver_events(&self, stored: &StoredContext, now: DateTime<Utc>) -> Vec<String> {
        let rps = self.rps.read().unwrap();
        let consents = self.consents.read().unwrap();
        let mut targets = Vec::new();
        for (rp_id, entry) in rps.iter() {
            let Some(url) = &entry.webhook_url else { continue };
            let covered = consents
                .get(&(stored.cap_id.clone(), rp_id.clone()))
                .is_some_and(|c| c.is_active(now) && c.covers(stored.record.context_type()));
            if !covered {
                continue;
            }
            self.audit.record(
                now,
                AuditEvent::ContextReleased {
                    rp_id: rp_id.clone(),
                    cap_id: stored.cap_id.clone(),
                    sequence: stored.sequence,
                    context_type: stored.record.context_type().to_owned(),
                    channel: ReleaseChannel::Webhook,
                },
            );
            self.webhooks.enqueue(
                rp_id,
                url,
                WebhookEvent {
                    cap_id: stored.cap_id.clone(),
                    context_type: stored.record.context_type().to_owned(),
                    payload: stored.record.payload().clone(),
                    sequence: stored.sequence,
                    observed_at: stored.record.observed_at(),
                },
            );
            targets.push(rp_id.clone());
        }
        targets
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ContextRecord, CtxCName, CtxCSubjectRef, Payload};
    use crate::store::StoreConfig;
    use crate::webhook::WebhookConfig;
    use chrono::Duration;

    struct Fixture {
        provider: Provider,
        store: ContextStore,
        token: String,
        token2: String,
        alice: CapId,
    }

    fn fixture() -> Fixture {
        let dir = Arc::new(Directory::new());
        let alice = CapId::new("alice").unwrap();
        dir.register_subject(alice.clone());
        let provider = Provider::new(dir, Arc::new(AuditLog::new()), WebhookDispatcher::new(WebhookConfig::default()));
        let token = provider.register_rp("rp1", None).unwrap();
        let token2 = provider.register_rp("rp2", None).unwrap();
        let store = ContextStore::in_memory(StoreConfig::default());
        let src = CtxCName::new("src").unwrap();
        for ty in ["radius.auth", "radius.traffic", "mdm.posture", "door.entry"] {
            let r = ContextRecord::new(
                src.clone(),
                CtxCSubjectRef::local(src.clone(), "a").unwrap(),
                ty,
                Payload::new(),
                Utc::now() - Duration::seconds(1),
                Utc::now(),
            )
            .unwrap();
            store.ingest(r, |_, _| Some(alice.clone()), Utc::now()).unwrap();
        }
        Fixture { provider, store, token, token2, alice }
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn types(resp: &RpContextResponse) -> Vec<&str> {
        resp.contexts.iter().map(|c| c.record.context_type()).collect()
    }

    #[test]
    fn intersection_rule() {
        assert_eq!(intersect_prefixes(&set(&["radius.auth"]), &set(&["radius."])), set(&["radius.auth"]));
        assert_eq!(intersect_prefixes(&set(&["rad"]), &set(&["radius.", "mdm."])), set(&["radius."]));
        assert!(intersect_prefixes(&set(&["mdm."]), &set(&["radius."])).is_empty());
    }

    #[test]
    fn deny_by_default() {
        let f = fixture();
        let now = Utc::now();
        assert_eq!(
            f.provider.rp_get_contexts(&f.token, &f.alice, &RpQuery::default(), &f.store, now),
            Err(ProviderError::ConsentDenied)
        );
        assert_eq!(
            f.provider.rp_get_contexts("bogus", &f.alice, &RpQuery::default(), &f.store, now),
            Err(ProviderError::AuthFailed)
        );
    }

    #[test]
    fn consent_radius_request_all() {
        let f = fixture();
        let now = Utc::now();
        f.provider.grant_consent(&f.alice, "rp1", set(&["radius."]), None, now).unwrap();
        let r = f.provider.rp_get_contexts(&f.token, &f.alice, &RpQuery::default(), &f.store, now).unwrap();
        assert_eq!(types(&r), vec!["radius.auth", "radius.traffic"]);
        assert!(r.derived.connectivity.is_some());
        assert!(r.derived.posture.is_none());
    }

    #[test]
    fn consent_both_request_mdm() {
        let f = fixture();
        let now = Utc::now();
        f.provider.grant_consent(&f.alice, "rp1", set(&["radius.", "mdm."]), None, now).unwrap();
        let q = RpQuery { types: Some(vec!["mdm.".into()]), ..Default::default() };
        let r = f.provider.rp_get_contexts(&f.token, &f.alice, &q, &f.store, now).unwrap();
        assert_eq!(types(&r), vec!["mdm.posture"]);
        assert!(r.derived.connectivity.is_none());
        assert!(r.derived.posture.is_some());
    }

    #[test]
    fn regrant_replaces() {
        let f = fixture();
        let now = Utc::now();
        f.provider.grant_consent(&f.alice, "rp1", set(&["radius."]), None, now).unwrap();
        f.provider.grant_consent(&f.alice, "rp1", set(&["mdm."]), None, now).unwrap();
        let r = f.provider.rp_get_contexts(&f.token, &f.alice, &RpQuery::default(), &f.store, now).unwrap();
        assert_eq!(types(&r), vec!["mdm.posture"]);
        assert_eq!(f.provider.consents().len(), 1);
    }

    #[test]
    fn grant_errors() {
        let f = fixture();
        let now = Utc::now();
        assert_eq!(
            f.provider.grant_consent(&f.alice, "rp1", BTreeSet::new(), None, now),
            Err(ProviderError::EmptyPrefixSet)
        );
        assert_eq!(
            f.provider.grant_consent(&CapId::new("bob").unwrap(), "rp1", set(&["x"]), None, now),
            Err(ProviderError::UnknownCapId)
        );
        assert_eq!(
            f.provider.grant_consent(&f.alice, "rp9", set(&["x"]), None, now),
            Err(ProviderError::UnknownRp)
        );
    }

    #[test]
    fn revoke_semantics_and_isolation() {
        let f = fixture();
        let now = Utc::now();
        f.provider.grant_consent(&f.alice, "rp1", set(&["radius."]), None, now).unwrap();
        f.provider.grant_consent(&f.alice, "rp2", set(&["radius."]), None, now).unwrap();
        f.provider.revoke_consent(&f.alice, "rp1", now).unwrap();
        assert_eq!(
            f.provider.rp_get_contexts(&f.token, &f.alice, &RpQuery::default(), &f.store, now),
            Err(ProviderError::ConsentDenied)
        );
        assert_eq!(f.provider.revoke_consent(&f.alice, "rp1", now), Err(ProviderError::NoSuchConsent));
        assert!(f.provider.rp_get_contexts(&f.token2, &f.alice, &RpQuery::default(), &f.store, now).is_ok());
    }

    #[test]
    fn expired_consent_denied() {
        let f = fixture();
        let now = Utc::now();
        f.provider
            .grant_consent(&f.alice, "rp1", set(&["radius."]), Some(now + Duration::seconds(5)), now)
            .unwrap();
        assert!(f.provider.rp_get_contexts(&f.token, &f.alice, &RpQuery::default(), &f.store, now).is_ok());
        assert_eq!(
            f.provider.rp_get_contexts(&f.token, &f.alice, &RpQuery::default(), &f.store, now + Duration::seconds(5)),
            Err(ProviderError::ConsentDenied)
        );
    }

    #[test]
    fn rekeying_rp_invalidates_old_token() {
        let f = fixture();
        let t2 = f.provider.register_rp("rp1", None).unwrap();
        assert_eq!(f.provider.authenticate_rp(&f.token), Err(ProviderError::AuthFailed));
        assert_eq!(f.provider.authenticate_rp(&t2).unwrap(), "rp1");
    }
}
