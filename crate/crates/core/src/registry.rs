//! Registries of known CAP subjects and Context Collectors, each with a
//! static bearer secret.

use std::collections::HashMap;
use std::sync::RwLock;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use ring::rand::{SecureRandom, SystemRandom};

use crate::model::{CapId, CtxCName};

/// Generates a 256-bit random bearer secret, base64url encoded.
pub fn generate_secret() -> String {
    let mut bytes = [0u8; 32];
    SystemRandom::new()
        .fill(&mut bytes)
        .expect("system RNG available");
    URL_SAFE_NO_PAD.encode(bytes)
}

/// Only the SHA-256 of a bearer secret is retained.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenDigest([u8; 32]);

impl TokenDigest {
    pub fn of(token: &str) -> Self {
        let digest = ring::digest::digest(&ring::digest::SHA256, token.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(digest.as_ref());
        Self(out)
    }
}

#[derive(Debug, Default)]
pub struct Directory {
    subjects: RwLock<HashMap<CapId, TokenDigest>>,
    agent_tokens: RwLock<HashMap<TokenDigest, CapId>>,
    ctxcs: RwLock<HashMap<CtxCName, TokenDigest>>,
}

impl Directory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers (or re-keys) a subject and returns its device-agent token.
    pub fn register_subject(&self, cap_id: CapId) -> String {
        let token = generate_secret();
        self.register_subject_with_token(cap_id, &token);
        token
    }

    pub fn register_subject_with_token(&self, cap_id: CapId, token: &str) {
        let digest = TokenDigest::of(token);
        let mut subjects = self.subjects.write().unwrap();
        let mut agents = self.agent_tokens.write().unwrap();
        if let Some(old) = subjects.insert(cap_id.clone(), digest.clone()) {
            agents.remove(&old);
        }
        agents.insert(digest, cap_id);
    }

    pub fn has_subject(&self, cap_id: &CapId) -> bool {
        self.subjects.read().unwrap().contains_key(cap_id)
    }

    pub fn subjects(&self) -> Vec<CapId> {
        let mut out: Vec<_> = self.subjects.read().unwrap().keys().cloned().collect();
        out.sort();
        out
    }

    pub fn subject_for_agent_token(&self, token: &str) -> Option<CapId> {
        self.agent_tokens
            .read()
            .unwrap()
            .get(&TokenDigest::of(token))
            .cloned()
    }

    /// Registers (or re-keys) a CtxC and returns its ingestion token.
    pub fn register_ctxc(&self, name: CtxCName) -> String {
        let token = generate_secret();
        self.register_ctxc_with_token(name, &token);
        token
    }

    pub fn register_ctxc_with_token(&self, name: CtxCName, token: &str) {
        self.ctxcs
            .write()
            .unwrap()
            .insert(name, TokenDigest::of(token));
    }

    pub fn has_ctxc(&self, name: &CtxCName) -> bool {
        self.ctxcs.read().unwrap().contains_key(name)
    }

    pub fn ctxcs(&self) -> Vec<CtxCName> {
        let mut out: Vec<_> = self.ctxcs.read().unwrap().keys().cloned().collect();
        out.sort();
        out
    }

    /// `None` when the CtxC is unknown, `Some(false)` on a bad token.
    pub fn check_ctxc_token(&self, name: &CtxCName, token: &str) -> Option<bool> {
        self.ctxcs
            .read()
            .unwrap()
            .get(name)
            .map(|d| *d == TokenDigest::of(token))
    }
}
