//! Linking CtxC-side subject identifiers to CAP identities.
//!
//! Three strategies populate one binding store:
//!
//! * pairwise pseudo-IDs issued by the CAP to a CtxC inside a signed token,
//! * an administrator-maintained correspondence table,
//! * certificate proof-of-possession: the device signs a fresh challenge
//!   with the key of the certificate it used at the CtxC, and the chain is
//!   validated against the configured trust anchors.
//!
//! All mutations and lookups go through a single lock, so every operation is
//! linearizable and no caller observes a half-applied binding.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use chrono::{DateTime, Duration, Utc};
use ring::rand::{SecureRandom, SystemRandom};
use ring::signature::{Ed25519KeyPair, KeyPair as _};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditEvent, AuditLog};
use crate::model::{
    CapId, CertFingerprint, CertificateRef, CtxCName, CtxCSubjectRef, ModelError, PseudoId,
};
use crate::pki::{self, ChainError, PopError, TrustAnchors};
use crate::registry::Directory;

/// Domain-separation suffix of the proof-of-possession message.
pub const POP_DOMAIN: &[u8] = b"ztf-link-v1";
pub const DEFAULT_CHALLENGE_TTL_SECS: i64 = 120;
pub const DEFAULT_TOKEN_TTL_SECS: i64 = 3600;
pub const ADMIN_TABLE_HEADER: &str = "ctxc_name,local_id,cap_id";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("unknown CAP id {0}")]
    UnknownCapId(String),
    #[error("unknown CtxC {0}")]
    UnknownCtxC(String),
    #[error("token signature invalid")]
    BadSignature,
    #[error("token audience mismatch")]
    WrongAudience,
    #[error("token outside its validity window")]
    Expired,
    #[error("malformed token: {0}")]
    MalformedToken(String),
    #[error("unknown challenge")]
    UnknownChallenge,
    #[error("challenge expired")]
    ChallengeExpired,
    #[error("challenge already used")]
    ChallengeReplayed,
    #[error("proof-of-possession signature invalid")]
    BadPopSignature,
    #[error("leaf key algorithm not allowed: {0}")]
    UnsupportedKeyAlgorithm(String),
    #[error("certificate chain not trusted")]
    UntrustedChain,
    #[error("certificate expired or not yet valid")]
    CertificateExpired,
    #[error("certificate already bound to another CAP id")]
    BindingConflict,
    #[error("no active binding for key")]
    NoSuchBinding,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl LinkError {
    /// Stable machine-readable code used by the HTTP API and CLI.
    pub fn code(&self) -> &'static str {
        match self {
            LinkError::UnknownCapId(_) => "UnknownCapId",
            LinkError::UnknownCtxC(_) => "UnknownCtxC",
            LinkError::BadSignature => "BadSignature",
            LinkError::WrongAudience => "WrongAudience",
            LinkError::Expired => "Expired",
            LinkError::MalformedToken(_) => "MalformedToken",
            LinkError::UnknownChallenge => "UnknownChallenge",
            LinkError::ChallengeExpired => "ChallengeExpired",
            LinkError::ChallengeReplayed => "ChallengeReplayed",
            LinkError::BadPopSignature => "BadPopSignature",
            LinkError::UnsupportedKeyAlgorithm(_) => "UnsupportedKeyAlgorithm",
            LinkError::UntrustedChain => "UntrustedChain",
            LinkError::CertificateExpired => "CertificateExpired",
            LinkError::BindingConflict => "BindingConflict",
            LinkError::NoSuchBinding => "NoSuchBinding",
            LinkError::Model(ModelError::MalformedCertificate(_)) => "MalformedCertificate",
            LinkError::Model(_) => "InvalidInput",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BindingKey {
    Pseudo {
        pseudo_id: PseudoId,
        audience: CtxCName,
    },
    AdminLocal {
        ctxc: CtxCName,
        local_id: String,
    },
    CertKey {
        fingerprint: CertFingerprint,
        issuer: String,
        serial: String,
    },
}

impl BindingKey {
    pub fn method(&self) -> BindingMethod {
        match self {
            BindingKey::Pseudo { .. } => BindingMethod::Pseudo,
            BindingKey::AdminLocal { .. } => BindingMethod::Admin,
            BindingKey::CertKey { .. } => BindingMethod::Certificate,
        }
    }

    pub fn selector(&self) -> BindingSelector {
        match self {
            BindingKey::Pseudo { pseudo_id, audience } => BindingSelector::Pseudo {
                audience: audience.clone(),
                pseudo_id: pseudo_id.clone(),
            },
            BindingKey::AdminLocal { ctxc, local_id } => BindingSelector::Admin {
                ctxc: ctxc.clone(),
                local_id: local_id.clone(),
            },
            BindingKey::CertKey { fingerprint, .. } => BindingSelector::Cert {
                fingerprint: fingerprint.clone(),
            },
        }
    }
}

/// The identity part of a [`BindingKey`]; at most one active binding exists
/// per selector.
///
/// Text form: `pseudo:<audience>:<pseudo_id>`, `admin:<ctxc>:<local_id>` or
/// `cert:<fingerprint>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BindingSelector {
    Pseudo { audience: CtxCName, pseudo_id: PseudoId },
    Admin { ctxc: CtxCName, local_id: String },
    Cert { fingerprint: CertFingerprint },
}

impl fmt::Display for BindingSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BindingSelector::Pseudo { audience, pseudo_id } => write!(f, "pseudo:{audience}:{pseudo_id}"),
            BindingSelector::Admin { ctxc, local_id } => write!(f, "admin:{ctxc}:{local_id}"),
            BindingSelector::Cert { fingerprint } => write!(f, "cert:{fingerprint}"),
        }
    }
}

impl FromStr for BindingSelector {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::InvalidContext(format!("invalid binding key {s:?}"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "pseudo" => {
                let (aud, id) = rest.split_once(':').ok_or_else(bad)?;
                Ok(BindingSelector::Pseudo {
                    audience: CtxCName::new(aud)?,
                    pseudo_id: PseudoId::parse(id)?,
                })
            }
            "admin" => {
                let (ctxc, local) = rest.split_once(':').ok_or_else(bad)?;
                if local.is_empty() {
                    return Err(ModelError::EmptyLocalId);
                }
                Ok(BindingSelector::Admin {
                    ctxc: CtxCName::new(ctxc)?,
                    local_id: local.to_owned(),
                })
            }
            "cert" => Ok(BindingSelector::Cert {
                fingerprint: CertFingerprint::parse(rest)?,
            }),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for BindingSelector {
    type Error = ModelError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<BindingSelector> for String {
    fn from(value: BindingSelector) -> Self {
        value.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingMethod {
    Pseudo,
    Admin,
    Certificate,
}

impl fmt::Display for BindingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BindingMethod::Pseudo => "pseudo",
            BindingMethod::Admin => "admin",
            BindingMethod::Certificate => "certificate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingStatus {
    Active,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub key: BindingKey,
    pub cap_id: CapId,
    pub method: BindingMethod,
    pub created_at: DateTime<Utc>,
    pub status: BindingStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revoked_at: Option<DateTime<Utc>>,
}

impl Binding {
    pub fn is_active(&self) -> bool {
        self.status == BindingStatus::Active
    }
}

/// Key material of the CAP: the Ed25519 token-signing key and the secret
/// from which pairwise pseudo-IDs are derived.
#[derive(Clone, Serialize, Deserialize)]
pub struct SigningMaterial {
    #[serde(with = "b64")]
    pub ed25519_pkcs8: Vec<u8>,
    #[serde(with = "b64")]
    pub pairwise_secret: Vec<u8>,
}

impl fmt::Debug for SigningMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SigningMaterial { .. }")
    }
}

impl SigningMaterial {
    pub fn generate() -> Self {
        let rng = SystemRandom::new();
        let pkcs8 = Ed25519KeyPair::generate_pkcs8(&rng).expect("system RNG available");
        let mut secret = vec![0u8; 32];
        rng.fill(&mut secret).expect("system RNG available");
        Self {
            ed25519_pkcs8: pkcs8.as_ref().to_vec(),
            pairwise_secret: secret,
        }
    }
}

mod b64 {
    use super::*;
    pub fn serialize<S: serde::Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&URL_SAFE_NO_PAD.encode(v))
    }
    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        URL_SAFE_NO_PAD.decode(s).map_err(serde::de::Error::custom)
    }
}

/// The CAP's token-verification key as published at `GET /keys`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedKey {
    pub kid: String,
    pub alg: String,
    pub public_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TokenHeader {
    alg: String,
    kid: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenClaims {
    pub pseudo_id: PseudoId,
    pub aud: CtxCName,
    pub iat: i64,
    pub exp: i64,
    pub iss: String,
}

/// Compact signed pseudo-ID token: `header.payload.signature`, each segment
/// base64url without padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PseudoIdToken(pub String);

impl PseudoIdToken {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Verifies a pseudo-ID token with the CAP's published key. This is the step
/// a CtxC runs before recording the pseudo-ID against its local identifier.
///
/// Valid iff the signature checks, `aud` matches and `iat <= now < exp`.
pub fn verify_pseudo_token(
    token: &PseudoIdToken,
    key: &PublishedKey,
    expected_audience: &CtxCName,
    now: DateTime<Utc>,
) -> Result<PseudoId, LinkError> {
    let mut parts = token.0.split('.');
    let (Some(header_b64), Some(payload_b64), Some(sig_b64), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(LinkError::MalformedToken("expected three segments".into()));
    };
    let signature = URL_SAFE_NO_PAD
        .decode(sig_b64)
        .map_err(|_| LinkError::BadSignature)?;
    let public_key = URL_SAFE_NO_PAD
        .decode(&key.public_key)
        .map_err(|_| LinkError::MalformedToken("bad published key".into()))?;
    let signed = &token.0.as_bytes()[..header_b64.len() + 1 + payload_b64.len()];
    ring::signature::UnparsedPublicKey::new(&ring::signature::ED25519, &public_key)
        .verify(signed, &signature)
        .map_err(|_| LinkError::BadSignature)?;

    let header: TokenHeader = decode_segment(header_b64)?;
    if header.alg != "Ed25519" || header.kid != key.kid {
        return Err(LinkError::BadSignature);
    }
    let claims: TokenClaims = decode_segment(payload_b64)?;
    if &claims.aud != expected_audience {
        return Err(LinkError::WrongAudience);
    }
    let now = now.timestamp();
    if !(claims.iat <= now && now < claims.exp) {
        return Err(LinkError::Expired);
    }
    Ok(claims.pseudo_id)
}

fn decode_segment<T: for<'de> Deserialize<'de>>(segment: &str) -> Result<T, LinkError> {
    let bytes = URL_SAFE_NO_PAD
        .decode(segment)
        .map_err(|e| LinkError::MalformedToken(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| LinkError::MalformedToken(e.to_string()))
}

struct TokenSigner {
    key: Ed25519KeyPair,
    kid: String,
    issuer: String,
    pairwise: ring::hmac::Key,
}

impl TokenSigner {
    fn new(material: &SigningMaterial, issuer: String) -> Result<Self, LinkError> {
        let key = Ed25519KeyPair::from_pkcs8_maybe_unchecked(&material.ed25519_pkcs8)
            .map_err(|e| LinkError::MalformedToken(format!("signing key: {e}")))?;
        let digest = ring::digest::digest(&ring::digest::SHA256, key.public_key().as_ref());
        let kid = hex::encode(&digest.as_ref()[..8]);
        let pairwise = ring::hmac::Key::new(ring::hmac::HMAC_SHA256, &material.pairwise_secret);
        Ok(Self { key, kid, issuer, pairwise })
    }

    fn published(&self) -> PublishedKey {
        PublishedKey {
            kid: self.kid.clone(),
            alg: "Ed25519".into(),
            public_key: URL_SAFE_NO_PAD.encode(self.key.public_key().as_ref()),
        }
    }

    /// Pairwise-stable: HMAC over length-prefixed (cap_id, audience).
    fn pairwise_id(&self, cap_id: &CapId, audience: &CtxCName) -> PseudoId {
        let mut msg = Vec::new();
        for part in [cap_id.as_str(), audience.as_str()] {
            msg.extend_from_slice(&(part.len() as u32).to_be_bytes());
            msg.extend_from_slice(part.as_bytes());
        }
        let tag = ring::hmac::sign(&self.pairwise, &msg);
        let mut out = [0u8; 16];
        out.copy_from_slice(&tag.as_ref()[..16]);
        PseudoId::from_bytes(out)
    }

    fn sign(&self, claims: &TokenClaims) -> PseudoIdToken {
        let header = TokenHeader { alg: "Ed25519".into(), kid: self.kid.clone() };
        let h = URL_SAFE_NO_PAD.encode(serde_json::to_vec(&header).expect("header serializes"));
        let p = URL_SAFE_NO_PAD.encode(serde_json::to_vec(claims).expect("claims serialize"));
        let signing_input = format!("{h}.{p}");
        let sig = self.key.sign(signing_input.as_bytes());
        PseudoIdToken(format!("{signing_input}.{}", URL_SAFE_NO_PAD.encode(sig.as_ref())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub challenge_id: String,
    pub cap_id: CapId,
    #[serde(with = "b64")]
    pub nonce: Vec<u8>,
    pub issued_at: DateTime<Utc>,
    pub ttl_seconds: i64,
    pub consumed: bool,
}

impl Challenge {
    pub fn expires_at(&self) -> DateTime<Utc> {
        self.issued_at + Duration::seconds(self.ttl_seconds)
    }

    /// The exact bytes the device must sign.
    pub fn signing_message(&self) -> Vec<u8> {
        pop_message(&self.nonce, &self.cap_id)
    }
}

/// `nonce ‖ cap_id ‖ "ztf-link-v1"`.
pub fn pop_message(nonce: &[u8], cap_id: &CapId) -> Vec<u8> {
    let mut msg = Vec::with_capacity(nonce.len() + cap_id.as_str().len() + POP_DOMAIN.len());
    msg.extend_from_slice(nonce);
    msg.extend_from_slice(cap_id.as_str().as_bytes());
    msg.extend_from_slice(POP_DOMAIN);
    msg
}

/// One row of the administrator correspondence table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdminRow {
    pub ctxc: String,
    pub local_id: String,
    pub cap_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub line: usize,
    pub row: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub imported: usize,
    pub rejected: Vec<RejectedRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("admin table header must be exactly `{ADMIN_TABLE_HEADER}`, got {0:?}")]
    BadHeader(String),
}

/// Parsed admin table: valid rows with their line numbers plus rows that
/// failed at the CSV level.
#[derive(Debug, Clone, Default)]
pub struct ParsedTable {
    pub rows: Vec<(usize, AdminRow)>,
    pub rejected: Vec<RejectedRow>,
}

/// Parses the UTF-8 CSV correspondence table. Quoted fields are not
/// supported; rows using quotes or with the wrong field count are rejected.
pub fn parse_admin_table(text: &str) -> Result<ParsedTable, TableError> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l.trim_end_matches('\r').trim_start_matches('\u{feff}'),
            None => return Err(TableError::BadHeader(String::new())),
        }
    };
    if header != ADMIN_TABLE_HEADER {
        return Err(TableError::BadHeader(header.to_owned()));
    }
    let mut out = ParsedTable::default();
    for (idx, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let reject = |reason: &str| RejectedRow {
            line: line_no,
            row: line.to_owned(),
            reason: reason.to_owned(),
        };
        if line.contains('"') {
            out.rejected.push(reject("QuotedField"));
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            out.rejected.push(reject("FieldCount"));
            continue;
        }
        out.rows.push((
            line_no,
            AdminRow {
                ctxc: fields[0].to_owned(),
                local_id: fields[1].to_owned(),
                cap_id: fields[2].to_owned(),
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LinkerConfig {
    pub issuer: String,
    pub challenge_ttl: Duration,
    pub token_ttl: Duration,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        Self {
            issuer: "ztf-cap".into(),
            challenge_ttl: Duration::seconds(DEFAULT_CHALLENGE_TTL_SECS),
            token_ttl: Duration::seconds(DEFAULT_TOKEN_TTL_SECS),
        }
    }
}

#[derive(Default)]
struct LinkState {
    bindings: Vec<Binding>,
    active: HashMap<BindingSelector, usize>,
    cert_issuer_serial: HashMap<(String, String), usize>,
    challenges: HashMap<String, Challenge>,
}

impl LinkState {
    fn active_binding(&self, selector: &BindingSelector) -> Option<&Binding> {
        self.active.get(selector).map(|&i| &self.bindings[i])
    }

    fn insert_active(&mut self, binding: Binding) -> usize {
        let idx = self.bindings.len();
        self.active.insert(binding.key.selector(), idx);
        if let BindingKey::CertKey { issuer, serial, .. } = &binding.key {
            self.cert_issuer_serial.insert((issuer.clone(), serial.clone()), idx);
        }
        self.bindings.push(binding);
        idx
    }

    fn revoke(&mut self, selector: &BindingSelector, now: DateTime<Utc>) -> Option<Binding> {
        let idx = self.active.remove(selector)?;
        let binding = &mut self.bindings[idx];
        binding.status = BindingStatus::Revoked;
        binding.revoked_at = Some(now);
        if let BindingKey::CertKey { issuer, serial, .. } = &binding.key {
            self.cert_issuer_serial.remove(&(issuer.clone(), serial.clone()));
        }
        Some(binding.clone())
    }

    fn resolve_cert_issuer_serial(&self, issuer: &str, serial: &str) -> Option<&Binding> {
        self.cert_issuer_serial
            .get(&(issuer.to_owned(), serial.to_owned()))
            .map(|&i| &self.bindings[i])
    }
}

/// Outcome of an admin-table import: the report plus every binding that
/// became active, for pending-context resolution.
#[derive(Debug, Clone, Default)]
pub struct ImportOutcome {
    pub report: ImportReport,
    pub new_bindings: Vec<Binding>,
}

pub struct Linker {
    signer: TokenSigner,
    trust: RwLock<TrustAnchors>,
    directory: Arc<Directory>,
    audit: Arc<AuditLog>,
    config: LinkerConfig,
    rng: SystemRandom,
    state: RwLock<LinkState>,
}

impl Linker {
    pub fn new(
        material: &SigningMaterial,
        trust: TrustAnchors,
        directory: Arc<Directory>,
        audit: Arc<AuditLog>,
        config: LinkerConfig,
    ) -> Result<Self, LinkError> {
        Ok(Self {
            signer: TokenSigner::new(material, config.issuer.clone())?,
            trust: RwLock::new(trust),
            directory,
            audit,
            config,
            rng: SystemRandom::new(),
            state: RwLock::new(LinkState::default()),
        })
    }

    pub fn published_key(&self) -> PublishedKey {
        self.signer.published()
    }

    pub fn add_trust_anchor(&self, der: Vec<u8>) -> Result<(), LinkError> {
        self.trust.write().unwrap().add_der(der)?;
        Ok(())
    }

    pub fn config(&self) -> &LinkerConfig {
        &self.config
    }

    fn require_cap(&self, cap_id: &CapId) -> Result<(), LinkError> {
        if self.directory.has_subject(cap_id) {
            Ok(())
        } else {
            Err(LinkError::UnknownCapId(cap_id.to_string()))
        }
    }

    fn require_ctxc(&self, ctxc: &CtxCName) -> Result<(), LinkError> {
        if self.directory.has_ctxc(ctxc) {
            Ok(())
        } else {
            Err(LinkError::UnknownCtxC(ctxc.to_string()))
        }
    }

    /// Issues a pseudo-ID token for `(cap_id, audience)` and records the
    /// pseudo binding. The pseudo-ID is the same on every call for the pair.
    pub fn issue_pseudo_id(
        &self,
        cap_id: &CapId,
        audience: &CtxCName,
        now: DateTime<Utc>,
    ) -> Result<(PseudoIdToken, Binding), LinkError> {
        self.require_cap(cap_id)?;
        self.require_ctxc(audience)?;
        let pseudo_id = self.signer.pairwise_id(cap_id, audience);
        let key = BindingKey::Pseudo { pseudo_id: pseudo_id.clone(), audience: audience.clone() };
        let binding = {
            let mut state = self.state.write().unwrap();
            match state.active_binding(&key.selector()) {
                Some(existing) => existing.clone(),
                None => {
                    let binding = new_binding(key, cap_id.clone(), now);
                    state.insert_active(binding.clone());
                    self.audit_created(&binding, now);
                    binding
                }
            }
        };
        let iat = now.timestamp();
        let claims = TokenClaims {
            pseudo_id,
            aud: audience.clone(),
            iat,
            exp: iat + self.config.token_ttl.num_seconds().max(1),
            iss: self.signer.issuer.clone(),
        };
        Ok((self.signer.sign(&claims), binding))
    }

    /// Signs an arbitrary claims set with the CAP key. Intended for tests
    /// that need tokens with chosen validity windows.
    pub fn sign_claims(&self, claims: &TokenClaims) -> PseudoIdToken {
        self.signer.sign(claims)
    }

    pub fn verify_pseudo_token(
        &self,
        token: &PseudoIdToken,
        expected_audience: &CtxCName,
        now: DateTime<Utc>,
    ) -> Result<PseudoId, LinkError> {
        verify_pseudo_token(token, &self.published_key(), expected_audience, now)
    }

    /// Imports correspondence rows; each row succeeds or fails on its own.
    pub fn import_admin_table(&self, rows: &[(usize, AdminRow)], now: DateTime<Utc>) -> ImportOutcome {
        let mut outcome = ImportOutcome::default();
        for (line, row) in rows {
            match self.import_row(row, now) {
                Ok(Some(binding)) => {
                    outcome.report.imported += 1;
                    outcome.new_bindings.push(binding);
                }
                Ok(None) => outcome.report.imported += 1,
                Err(err) => outcome.report.rejected.push(RejectedRow {
                    line: *line,
                    row: format!("{},{},{}", row.ctxc, row.local_id, row.cap_id),
                    reason: err.code().to_owned(),
                }),
            }
        }
        outcome
    }

    /// Returns the newly active binding, or `None` if the row was already in
    /// place unchanged.
    fn import_row(&self, row: &AdminRow, now: DateTime<Utc>) -> Result<Option<Binding>, LinkError> {
        let ctxc = CtxCName::new(row.ctxc.trim())?;
        let cap_id = CapId::new(row.cap_id.trim())?;
        let local_id = row.local_id.trim();
        if local_id.is_empty() {
            return Err(ModelError::EmptyLocalId.into());
        }
        self.require_ctxc(&ctxc)?;
        self.require_cap(&cap_id)?;
        let key = BindingKey::AdminLocal { ctxc, local_id: local_id.to_owned() };
        let selector = key.selector();
        let mut state = self.state.write().unwrap();
        if let Some(existing) = state.active_binding(&selector) {
            if existing.cap_id == cap_id {
                return Ok(None);
            }
            let old = state.revoke(&selector, now).expect("active binding present");
            self.audit.record(
                now,
                AuditEvent::BindingReplaced {
                    key: selector.to_string(),
                    old_cap_id: old.cap_id,
                    new_cap_id: cap_id.clone(),
                },
            );
            let binding = new_binding(key, cap_id, now);
            state.insert_active(binding.clone());
            return Ok(Some(binding));
        }
        let binding = new_binding(key, cap_id, now);
        state.insert_active(binding.clone());
        self.audit_created(&binding, now);
        Ok(Some(binding))
    }

    pub fn create_challenge(&self, cap_id: &CapId, now: DateTime<Utc>) -> Result<Challenge, LinkError> {
        self.require_cap(cap_id)?;
        let mut id = [0u8; 16];
        let mut nonce = vec![0u8; 32];
        self.rng.fill(&mut id).expect("system RNG available");
        self.rng.fill(&mut nonce).expect("system RNG available");
        let challenge = Challenge {
            challenge_id: hex::encode(id),
            cap_id: cap_id.clone(),
            nonce,
            issued_at: now,
            ttl_seconds: self.config.challenge_ttl.num_seconds(),
            consumed: false,
        };
        let mut state = self.state.write().unwrap();
        // Expired and consumed challenges are kept for a grace period so late
        // responses still get ChallengeExpired/ChallengeReplayed.
        state
            .challenges
            .retain(|_, c| c.expires_at() + Duration::hours(1) > now);
        state.challenges.insert(challenge.challenge_id.clone(), challenge.clone());
        Ok(challenge)
    }

    /// Checks a challenge response and, on success, records the certificate
    /// binding and consumes the challenge. Any failure leaves the binding
    /// store untouched.
    pub fn verify_challenge_response(
        &self,
        challenge_id: &str,
        cert_chain: &[Vec<u8>],
        signature: &[u8],
        now: DateTime<Utc>,
    ) -> Result<Binding, LinkError> {
        let challenge = {
            let state = self.state.read().unwrap();
            state.challenges.get(challenge_id).cloned().ok_or(LinkError::UnknownChallenge)?
        };
        if challenge.consumed {
            return Err(LinkError::ChallengeReplayed);
        }
        if now >= challenge.expires_at() {
            return Err(LinkError::ChallengeExpired);
        }
        let leaf = cert_chain.first().ok_or(LinkError::UntrustedChain)?;
        pki::verify_pop_signature(leaf, &challenge.signing_message(), signature).map_err(
            |e| match e {
                PopError::BadSignature => LinkError::BadPopSignature,
                PopError::UnsupportedAlgorithm(a) => LinkError::UnsupportedKeyAlgorithm(a),
            },
        )?;
        self.trust
            .read()
            .unwrap()
            .verify_chain(cert_chain, now)
            .map_err(|e| match e {
                ChainError::Untrusted => LinkError::UntrustedChain,
                ChainError::Expired => LinkError::CertificateExpired,
                ChainError::Malformed(m) => LinkError::Model(m),
            })?;
        let identity = pki::cert_identity(leaf)?;

        let mut state = self.state.write().unwrap();
        // Re-check under the write lock: a concurrent response may have won.
        match state.challenges.get(challenge_id) {
            Some(c) if c.consumed => return Err(LinkError::ChallengeReplayed),
            Some(_) => {}
            None => return Err(LinkError::UnknownChallenge),
        }
        let selector = BindingSelector::Cert { fingerprint: identity.fingerprint.clone() };
        let by_fp = state.active_binding(&selector).cloned();
        let by_is = state
            .resolve_cert_issuer_serial(&identity.issuer, &identity.serial)
            .cloned();
        let binding = match (by_fp, by_is) {
            (Some(existing), _) if existing.cap_id == challenge.cap_id => existing,
            (Some(_), _) => return Err(LinkError::BindingConflict),
            (None, Some(_)) => return Err(LinkError::BindingConflict),
            (None, None) => {
                let key = BindingKey::CertKey {
                    fingerprint: identity.fingerprint,
                    issuer: identity.issuer,
                    serial: identity.serial,
                };
                let binding = new_binding(key, challenge.cap_id.clone(), now);
                state.insert_active(binding.clone());
                self.audit_created(&binding, now);
                binding
            }
        };
        if let Some(c) = state.challenges.get_mut(challenge_id) {
            c.consumed = true;
        }
        Ok(binding)
    }

    /// Maps a context's subject to a CAP id. `source` is the CtxC that sent
    /// the context: pseudo-IDs only resolve for the audience they were
    /// issued to, and local ids only inside the sender's namespace.
    pub fn resolve_subject(&self, source: &CtxCName, subject: &CtxCSubjectRef) -> Option<CapId> {
        let state = self.state.read().unwrap();
        let found = match subject {
            CtxCSubjectRef::PseudoId { pseudo_id } => state.active_binding(&BindingSelector::Pseudo {
                audience: source.clone(),
                pseudo_id: pseudo_id.clone(),
            }),
            CtxCSubjectRef::LocalId { ctxc, local_id } => {
                if ctxc != source {
                    return None;
                }
                state.active_binding(&BindingSelector::Admin {
                    ctxc: ctxc.clone(),
                    local_id: local_id.clone(),
                })
            }
            CtxCSubjectRef::CertRef { cert: CertificateRef::FullCert { der } } => {
                let identity = pki::cert_identity(der).ok()?;
                state
                    .active_binding(&BindingSelector::Cert { fingerprint: identity.fingerprint })
                    .or_else(|| state.resolve_cert_issuer_serial(&identity.issuer, &identity.serial))
            }
            CtxCSubjectRef::CertRef { cert: CertificateRef::IssuerSerial { issuer, serial } } => {
                state.resolve_cert_issuer_serial(issuer, serial)
            }
        };
        found.filter(|b| b.is_active()).map(|b| b.cap_id.clone())
    }

    pub fn revoke_binding(&self, selector: &BindingSelector, now: DateTime<Utc>) -> Result<Binding, LinkError> {
        let revoked = self
            .state
            .write()
            .unwrap()
            .revoke(selector, now)
            .ok_or(LinkError::NoSuchBinding)?;
        self.audit.record(
            now,
            AuditEvent::BindingRevoked { key: selector.to_string(), cap_id: revoked.cap_id.clone() },
        );
        Ok(revoked)
    }

    /// Every binding ever created, active and revoked, in creation order.
    pub fn bindings(&self) -> Vec<Binding> {
        self.state.read().unwrap().bindings.clone()
    }

    pub fn active_bindings(&self) -> Vec<Binding> {
        self.state
            .read()
            .unwrap()
            .bindings
            .iter()
            .filter(|b| b.is_active())
            .cloned()
            .collect()
    }

    fn audit_created(&self, binding: &Binding, now: DateTime<Utc>) {
        self.audit.record(
            now,
            AuditEvent::BindingCreated {
                key: binding.key.selector().to_string(),
                cap_id: binding.cap_id.clone(),
                method: binding.method.to_string(),
            },
        );
    }
}

fn new_binding(key: BindingKey, cap_id: CapId, now: DateTime<Utc>) -> Binding {
    Binding {
        method: key.method(),
        key,
        cap_id,
        created_at: now,
        status: BindingStatus::Active,
        revoked_at: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;
    use rcgen::{BasicConstraints, CertificateParams, DnType, IsCa, KeyPair};

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 6, 1, 12, 0, 0).unwrap()
    }

    struct Fixture {
        linker: Linker,
        dir: Arc<Directory>,
        ca: rcgen::CertifiedIssuer<'static, KeyPair>,
    }

    fn cap(s: &str) -> CapId {
        CapId::new(s).unwrap()
    }

    fn ctxc(s: &str) -> CtxCName {
        CtxCName::new(s).unwrap()
    }

    fn fixture() -> Fixture {
        let dir = Arc::new(Directory::new());
        for c in ["alice", "bob", "carol"] {
            dir.register_subject(cap(c));
        }
        for c in ["radius-lab", "mdm-lab", "door"] {
            dir.register_ctxc(ctxc(c));
        }
        let mut params = CertificateParams::new(vec![]).unwrap();
        params.distinguished_name.push(DnType::CommonName, "Lab CA");
        params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        params.not_after = rcgen::date_time_ymd(2060, 1, 1);
        let ca = rcgen::CertifiedIssuer::self_signed(params, KeyPair::generate().unwrap()).unwrap();
        let trust = TrustAnchors::from_ders([ca.der().to_vec()]).unwrap();
        let linker = Linker::new(
            &SigningMaterial::generate(),
            trust,
            dir.clone(),
            Arc::new(AuditLog::new()),
            LinkerConfig::default(),
        )
        .unwrap();
        Fixture { linker, dir, ca }
    }

    fn device(f: &Fixture, serial: u64) -> (Vec<u8>, ring::signature::EcdsaKeyPair) {
        let key = KeyPair::generate_for(&rcgen::PKCS_ECDSA_P256_SHA256).unwrap();
        let mut params = CertificateParams::new(vec![]).unwrap();
        params.distinguished_name.push(DnType::CommonName, format!("device {serial}"));
        params.serial_number = Some(rcgen::SerialNumber::from(serial));
        params.not_after = rcgen::date_time_ymd(2050, 1, 1);
        let cert = params.signed_by(&key, &f.ca).unwrap();
        let signer = ring::signature::EcdsaKeyPair::from_pkcs8(
            &ring::signature::ECDSA_P256_SHA256_ASN1_SIGNING,
            &key.serialize_der(),
            &SystemRandom::new(),
        )
        .unwrap();
        (cert.der().to_vec(), signer)
    }

    fn sign(key: &ring::signature::EcdsaKeyPair, msg: &[u8]) -> Vec<u8> {
        key.sign(&SystemRandom::new(), msg).unwrap().as_ref().to_vec()
    }

    fn link_device(f: &Fixture, who: &str, der: &[u8], key: &ring::signature::EcdsaKeyPair) -> Result<Binding, LinkError> {
        let ch = f.linker.create_challenge(&cap(who), now()).unwrap();
        let sig = sign(key, &ch.signing_message());
        f.linker.verify_challenge_response(&ch.challenge_id, &[der.to_vec()], &sig, now())
    }

    #[test]
    fn pseudo_ids_are_pairwise_stable() {
        let f = fixture();
        let (t1, _) = f.linker.issue_pseudo_id(&cap("alice"), &ctxc("radius-lab"), now()).unwrap();
        let later = now() + Duration::seconds(30);
        let (t2, _) = f.linker.issue_pseudo_id(&cap("alice"), &ctxc("radius-lab"), later).unwrap();
        let (t3, _) = f.linker.issue_pseudo_id(&cap("alice"), &ctxc("mdm-lab"), now()).unwrap();
        let p1 = f.linker.verify_pseudo_token(&t1, &ctxc("radius-lab"), now()).unwrap();
        let p2 = f.linker.verify_pseudo_token(&t2, &ctxc("radius-lab"), later).unwrap();
        let p3 = f.linker.verify_pseudo_token(&t3, &ctxc("mdm-lab"), now()).unwrap();
        assert_eq!(p1, p2);
        assert_ne!(p1, p3);
        assert_ne!(t1, t2);
        assert_eq!(f.linker.active_bindings().len(), 2);
        assert_eq!(
            f.linker.resolve_subject(&ctxc("radius-lab"), &CtxCSubjectRef::PseudoId { pseudo_id: p1.clone() }),
            Some(cap("alice"))
        );
        // A pseudo-ID only resolves for the audience it was issued to.
        assert_eq!(
            f.linker.resolve_subject(&ctxc("mdm-lab"), &CtxCSubjectRef::PseudoId { pseudo_id: p1 }),
            None
        );
    }

    #[test]
    fn pseudo_issue_preconditions() {
        let f = fixture();
        assert!(matches!(
            f.linker.issue_pseudo_id(&cap("nobody"), &ctxc("radius-lab"), now()),
            Err(LinkError::UnknownCapId(_))
        ));
        assert!(matches!(
            f.linker.issue_pseudo_id(&cap("alice"), &ctxc("unregistered"), now()),
            Err(LinkError::UnknownCtxC(_))
        ));
    }

    #[test]
    fn token_tampering_and_windows() {
        let f = fixture();
        let aud = ctxc("radius-lab");
        let (token, _) = f.linker.issue_pseudo_id(&cap("alice"), &aud, now()).unwrap();

        let mut bytes = token.0.clone().into_bytes();
        let payload_start = token.0.find('.').unwrap() + 1;
        bytes[payload_start + 3] ^= 0x01;
        let flipped = PseudoIdToken(String::from_utf8(bytes).unwrap());
        assert_eq!(f.linker.verify_pseudo_token(&flipped, &aud, now()), Err(LinkError::BadSignature));

        assert_eq!(
            f.linker.verify_pseudo_token(&token, &ctxc("mdm-lab"), now()),
            Err(LinkError::WrongAudience)
        );
        let exp = now() + Duration::seconds(DEFAULT_TOKEN_TTL_SECS);
        assert_eq!(f.linker.verify_pseudo_token(&token, &aud, exp), Err(LinkError::Expired));
        assert!(f.linker.verify_pseudo_token(&token, &aud, exp - Duration::seconds(1)).is_ok());
        assert_eq!(
            f.linker.verify_pseudo_token(&token, &aud, now() - Duration::seconds(1)),
            Err(LinkError::Expired)
        );
        assert!(matches!(
            f.linker.verify_pseudo_token(&PseudoIdToken("a.b".into()), &aud, now()),
            Err(LinkError::MalformedToken(_))
        ));

        // A token signed by a different CAP key is rejected.
        let other = fixture();
        assert_eq!(other.linker.verify_pseudo_token(&token, &aud, now()), Err(LinkError::BadSignature));
    }

    #[test]
    fn admin_table_import_per_row() {
        let f = fixture();
        let table = "ctxc_name,local_id,cap_id\n\
                     door,card-1,alice\n\
                     door,card-2,bob\n\
                     radius-lab,aa:bb,carol\n";
        let parsed = parse_admin_table(table).unwrap();
        let out = f.linker.import_admin_table(&parsed.rows, now());
        assert_eq!(out.report.imported, 3);
        assert!(out.report.rejected.is_empty());

        let table = "ctxc_name,local_id,cap_id\n\
                     ghost,card-9,alice\n\
                     door,card-3,carol\n\
                     door,\"card,4\",bob\n";
        let parsed = parse_admin_table(table).unwrap();
        assert_eq!(parsed.rejected.len(), 1);
        assert_eq!(parsed.rejected[0].reason, "QuotedField");
        let out = f.linker.import_admin_table(&parsed.rows, now());
        assert_eq!(out.report.imported, 1);
        assert_eq!(out.report.rejected.len(), 1);
        assert_eq!(out.report.rejected[0].reason, "UnknownCtxC");
        assert_eq!(out.report.rejected[0].line, 2);

        assert!(matches!(parse_admin_table("ctxc,local,cap\n"), Err(TableError::BadHeader(_))));
    }

    #[test]
    fn admin_reimport_replaces_and_audits() {
        let f = fixture();
        let door = ctxc("door");
        let rows = |cap: &str| vec![(2, AdminRow { ctxc: "door".into(), local_id: "card-1".into(), cap_id: cap.into() })];
        f.linker.import_admin_table(&rows("alice"), now());
        let subject = CtxCSubjectRef::local(door.clone(), "card-1").unwrap();
        assert_eq!(f.linker.resolve_subject(&door, &subject), Some(cap("alice")));
        let out = f.linker.import_admin_table(&rows("bob"), now());
        assert_eq!(out.new_bindings.len(), 1);
        assert_eq!(f.linker.resolve_subject(&door, &subject), Some(cap("bob")));
        assert!(f
            .linker
            .audit
            .entries()
            .iter()
            .any(|e| matches!(e.event, AuditEvent::BindingReplaced { .. })));
        assert_eq!(f.linker.active_bindings().len(), 1);
        // Local ids are namespaced by the sending CtxC.
        assert_eq!(f.linker.resolve_subject(&ctxc("radius-lab"), &subject), None);
    }

    #[test]
    fn challenges_are_random_and_require_known_cap() {
        let f = fixture();
        let a = f.linker.create_challenge(&cap("alice"), now()).unwrap();
        let b = f.linker.create_challenge(&cap("alice"), now()).unwrap();
        assert_ne!(a.challenge_id, b.challenge_id);
        assert_ne!(a.nonce, b.nonce);
        assert_eq!(a.nonce.len(), 32);
        assert!(matches!(f.linker.create_challenge(&cap("nobody"), now()), Err(LinkError::UnknownCapId(_))));

        let mut nonces = std::collections::HashSet::new();
        for _ in 0..1000 {
            assert!(nonces.insert(f.linker.create_challenge(&cap("bob"), now()).unwrap().nonce));
        }
    }

    #[test]
    fn certificate_link_happy_path_and_resolution() {
        let f = fixture();
        let (der, key) = device(&f, 0x1f3a);
        let binding = link_device(&f, "alice", &der, &key).unwrap();
        assert_eq!(binding.method, BindingMethod::Certificate);
        assert!(binding.is_active());
        let radius = ctxc("radius-lab");
        let by_is = CtxCSubjectRef::CertRef { cert: CertificateRef::issuer_serial("cn=Lab CA", "0x1F3A").unwrap() };
        assert_eq!(f.linker.resolve_subject(&radius, &by_is), Some(cap("alice")));
        let by_full = CtxCSubjectRef::CertRef { cert: CertificateRef::full(der).unwrap() };
        assert_eq!(f.linker.resolve_subject(&radius, &by_full), Some(cap("alice")));
    }

    #[test]
    fn certificate_link_failures_leave_store_unchanged() {
        let f = fixture();
        let (der, key) = device(&f, 1);
        let (_, other_key) = device(&f, 2);

        let ch = f.linker.create_challenge(&cap("alice"), now()).unwrap();
        let bad = sign(&other_key, &ch.signing_message());
        assert_eq!(
            f.linker.verify_challenge_response(&ch.challenge_id, std::slice::from_ref(&der), &bad, now()),
            Err(LinkError::BadPopSignature)
        );
        let late = now() + Duration::seconds(DEFAULT_CHALLENGE_TTL_SECS);
        let good = sign(&key, &ch.signing_message());
        assert_eq!(
            f.linker.verify_challenge_response(&ch.challenge_id, std::slice::from_ref(&der), &good, late),
            Err(LinkError::ChallengeExpired)
        );
        assert_eq!(
            f.linker.verify_challenge_response("00", std::slice::from_ref(&der), &good, now()),
            Err(LinkError::UnknownChallenge)
        );
        assert!(f.linker.bindings().is_empty());

        f.linker.verify_challenge_response(&ch.challenge_id, std::slice::from_ref(&der), &good, now()).unwrap();
        assert_eq!(
            f.linker.verify_challenge_response(&ch.challenge_id, std::slice::from_ref(&der), &good, now()),
            Err(LinkError::ChallengeReplayed)
        );

        // Same certificate presented for another CAP id.
        assert_eq!(link_device(&f, "bob", &der, &key), Err(LinkError::BindingConflict));
        assert_eq!(f.linker.bindings().len(), 1);

        // Revocation clears the way for a re-link.
        let selector = f.linker.bindings()[0].key.selector();
        f.linker.revoke_binding(&selector, now()).unwrap();
        assert_eq!(f.linker.revoke_binding(&selector, now()), Err(LinkError::NoSuchBinding));
        let full = CtxCSubjectRef::CertRef { cert: CertificateRef::full(der.clone()).unwrap() };
        assert_eq!(f.linker.resolve_subject(&ctxc("radius-lab"), &full), None);
        link_device(&f, "bob", &der, &key).unwrap();
        assert_eq!(f.linker.resolve_subject(&ctxc("radius-lab"), &full), Some(cap("bob")));
    }

    #[test]
    fn untrusted_leaf_rejected() {
        let f = fixture();
        let other = fixture();
        let (der, key) = device(&other, 5);
        assert_eq!(link_device(&f, "alice", &der, &key), Err(LinkError::UntrustedChain));
    }

    #[test]
    fn selector_text_round_trip() {
        for s in [
            "admin:door:card:1",
            "cert:0000000000000000000000000000000000000000000000000000000000000000",
            "pseudo:radius-lab:AAAAAAAAAAAAAAAAAAAAAA",
        ] {
            assert_eq!(s.parse::<BindingSelector>().unwrap().to_string(), s);
        }
        assert!("admin:door:".parse::<BindingSelector>().is_err());
        assert!("cert:abc".parse::<BindingSelector>().is_err());
    }

    #[test]
    fn concurrent_imports_keep_one_active_binding_per_key() {
        let f = Arc::new(fixture());
        let _ = &f.dir;
        let handles: Vec<_> = ["alice", "bob", "carol"]
            .into_iter()
            .cycle()
            .take(24)
            .map(|who| {
                let f = f.clone();
                std::thread::spawn(move || {
                    let rows = vec![(2, AdminRow { ctxc: "door".into(), local_id: "shared".into(), cap_id: who.into() })];
                    f.linker.import_admin_table(&rows, now());
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(f.linker.active_bindings().len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pseudo_round_trip(id in "[a-z0-9]{1,20}", aud in prop::sample::select(vec!["radius-lab", "mdm-lab", "door"])) {
            let f = fixture();
            let cap_id = cap(&id);
            f.dir.register_subject(cap_id.clone());
            let aud = ctxc(aud);
            let (token, binding) = f.linker.issue_pseudo_id(&cap_id, &aud, now()).unwrap();
            let pseudo = f.linker.verify_pseudo_token(&token, &aud, now()).unwrap();
            let BindingKey::Pseudo { pseudo_id, .. } = binding.key else { panic!("pseudo key") };
            prop_assert_eq!(&pseudo, &pseudo_id);
            let (again, _) = f.linker.issue_pseudo_id(&cap_id, &aud, now()).unwrap();
            prop_assert_eq!(f.linker.verify_pseudo_token(&again, &aud, now()).unwrap(), pseudo);
        }
    }
}
