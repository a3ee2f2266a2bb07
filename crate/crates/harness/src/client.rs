//! Async client for the CAP HTTP API.

use std::collections::BTreeSet;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use ztf_cap::api::{ChallengeResponse, LinkResponseBody, CTXC_HEADER};
use ztf_cap::linking::{Binding, ImportReport, PublishedKey};
use ztf_cap::model::ContextRecord;
use ztf_cap::provider::{Consent, RpContextResponse};
use ztf_cap::service::IngestReport;
use ztf_cap::store::IngestOutcome;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum ApiFailure {
    #[error("HTTP {status} {code}: {message}")]
    Http { status: u16, code: String, message: String },
    #[error("transport: {0}")]
    Transport(String),
}

impl ApiFailure {
    /// The domain error code, or `Transport`.
    pub fn code(&self) -> &str {
        match self {
            ApiFailure::Http { code, .. } => code,
            ApiFailure::Transport(_) => "Transport",
        }
    }
}

pub type ApiResult<T> = Result<T, ApiFailure>;

#[derive(Debug, Clone)]
pub struct CapClient {
    base: String,
    http: reqwest::Client,
}

impl CapClient {
    pub fn new(base: impl Into<String>) -> Self {
        Self { base: base.into().trim_end_matches('/').to_owned(), http: reqwest::Client::new() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn send<T: DeserializeOwned>(&self, req: reqwest::RequestBuilder) -> ApiResult<T> {
        let resp = req.send().await.map_err(|e| ApiFailure::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.bytes().await.map_err(|e| ApiFailure::Transport(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_slice(&body).map_err(|e| ApiFailure::Transport(format!("bad response body: {e}")));
        }
        let v: Value = serde_json::from_slice(&body).unwrap_or_default();
        Err(ApiFailure::Http {
            status: status.as_u16(),
            code: v["error"].as_str().unwrap_or("Unknown").to_owned(),
            message: v["message"].as_str().unwrap_or("").to_owned(),
        })
    }

    pub async fn keys(&self) -> ApiResult<PublishedKey> {
        self.send(self.http.get(self.url("/keys"))).await
    }

    pub async fn challenge(&self, agent_token: &str) -> ApiResult<ChallengeResponse> {
        self.send(self.http.post(self.url("/link/challenge")).bearer_auth(agent_token)).await
    }

    pub async fn respond(&self, challenge_id: &str, chain: &[Vec<u8>], signature: &[u8]) -> ApiResult<Binding> {
        let body = LinkResponseBody {
            challenge_id: challenge_id.to_owned(),
            cert_chain: chain.iter().map(|c| URL_SAFE_NO_PAD.encode(c)).collect(),
            signature: URL_SAFE_NO_PAD.encode(signature),
        };
        self.send(self.http.post(self.url("/link/response")).json(&body)).await
    }

    pub async fn ingest_radius(&self, ctxc: &str, token: &str, body: Vec<u8>) -> ApiResult<IngestReport> {
        self.send(
            self.http
                .post(self.url("/ingest/radius"))
                .header(CTXC_HEADER, ctxc)
                .bearer_auth(token)
                .body(body),
        )
        .await
    }

    pub async fn ingest_context(&self, ctxc: &str, token: &str, record: &ContextRecord) -> ApiResult<IngestOutcome> {
        self.send(
            self.http
                .post(self.url("/ingest/context"))
                .header(CTXC_HEADER, ctxc)
                .bearer_auth(token)
                .json(record),
        )
        .await
    }

    pub async fn rp_contexts(
        &self,
        rp_token: &str,
        cap_id: &str,
        types: Option<&[String]>,
        since: Option<DateTime<Utc>>,
        limit: Option<usize>,
    ) -> ApiResult<RpContextResponse> {
        let mut query: Vec<(&str, String)> = Vec::new();
        if let Some(t) = types {
            query.push(("types", t.join(",")));
        }
        if let Some(s) = since {
            query.push(("since", s.to_rfc3339()));
        }
        if let Some(l) = limit {
            query.push(("limit", l.to_string()));
        }
        self.send(self.http.get(self.url(&format!("/contexts/{cap_id}"))).query(&query).bearer_auth(rp_token))
            .await
    }
}

/// Administrator view of the API.
#[derive(Debug, Clone)]
pub struct AdminClient {
    inner: CapClient,
    token: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Registered {
    pub token: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SubjectRegistered {
    pub agent_token: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PseudoIssued {
    pub token: String,
    pub binding: Binding,
}

impl AdminClient {
    pub fn new(base: impl Into<String>, token: impl Into<String>) -> Self {
        Self { inner: CapClient::new(base), token: token.into() }
    }

    pub fn api(&self) -> &CapClient {
        &self.inner
    }

    fn post(&self, path: &str) -> reqwest::RequestBuilder {
        self.inner.http.post(self.inner.url(path)).bearer_auth(&self.token)
    }

    fn get(&self, path: &str) -> reqwest::RequestBuilder {
        self.inner.http.get(self.inner.url(path)).bearer_auth(&self.token)
    }

    pub async fn add_ctxc(&self, name: &str) -> ApiResult<String> {
        let r: Registered = self.inner.send(self.post("/admin/ctxcs").json(&json!({ "name": name }))).await?;
        Ok(r.token)
    }

    pub async fn add_rp(&self, rp_id: &str, webhook_url: Option<&str>) -> ApiResult<String> {
        let r: Registered = self
            .inner
            .send(self.post("/admin/rps").json(&json!({ "rp_id": rp_id, "webhook_url": webhook_url })))
            .await?;
        Ok(r.token)
    }

    pub async fn add_subject(&self, cap_id: &str) -> ApiResult<String> {
        let r: SubjectRegistered =
            self.inner.send(self.post("/admin/subjects").json(&json!({ "cap_id": cap_id }))).await?;
        Ok(r.agent_token)
    }

    pub async fn import_table(&self, csv: &str) -> ApiResult<ImportReport> {
        self.inner.send(self.post("/admin/table").header("content-type", "text/csv").body(csv.to_owned())).await
    }

    pub async fn issue_pseudo(&self, cap_id: &str, audience: &str) -> ApiResult<PseudoIssued> {
        self.inner
            .send(self.post("/admin/pseudo").json(&json!({ "cap_id": cap_id, "audience": audience })))
            .await
    }

    pub async fn bindings(&self, all: bool) -> ApiResult<Vec<Binding>> {
        self.inner.send(self.get("/admin/bindings").query(&[("all", all)])).await
    }

    pub async fn revoke_binding(&self, key: &str) -> ApiResult<Binding> {
        self.inner.send(self.post("/admin/bindings/revoke").json(&json!({ "key": key }))).await
    }

    pub async fn grant_consent(
        &self,
        cap_id: &str,
        rp_id: &str,
        prefixes: &BTreeSet<String>,
        expires_at: Option<DateTime<Utc>>,
    ) -> ApiResult<Consent> {
        self.inner
            .send(self.post("/consents").json(&json!({
                "cap_id": cap_id, "rp_id": rp_id, "prefixes": prefixes, "expires_at": expires_at
            })))
            .await
    }

    pub async fn revoke_consent(&self, cap_id: &str, rp_id: &str) -> ApiResult<Value> {
        let req = self
            .inner
            .http
            .delete(self.inner.url(&format!("/consents/{cap_id}/{rp_id}")))
            .bearer_auth(&self.token);
        self.inner.send(req).await
    }

    pub async fn poll_mdm(&self) -> ApiResult<Value> {
        self.inner.send(self.post("/admin/mdm/poll")).await
    }

    pub async fn audit(&self) -> ApiResult<Vec<ztf_cap::audit::AuditEntry>> {
        self.inner.send(self.get("/admin/audit")).await
    }
}
