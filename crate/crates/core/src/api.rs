//! HTTP API.
//!
//! Errors are JSON `{"error": "<Code>", "message": "..."}` with the codes
//! of the underlying domain errors.

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::linking::{Binding, BindingSelector, PublishedKey};
use crate::model::{CapId, ContextRecord, CtxCName, ModelError};
use crate::provider::{ProviderError, RpQuery};
use crate::registry::{generate_secret, TokenDigest};
use crate::service::{Cap, ServiceError};

pub const CTXC_HEADER: &str = "x-ctxc-name";

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Clone)]
pub struct AppState {
    pub cap: Arc<Cap>,
    admin: TokenDigest,
    clock: Clock,
}

impl AppState {
    pub fn new(cap: Arc<Cap>, admin_token: &str) -> Self {
        Self::with_clock(cap, admin_token, Arc::new(Utc::now))
    }

    pub fn with_clock(cap: Arc<Cap>, admin_token: &str, clock: Clock) -> Self {
        Self { cap, admin: TokenDigest::of(admin_token), clock }
    }

    fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    fn require_admin(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        match bearer(headers) {
            Some(t) if TokenDigest::of(t) == self.admin => Ok(()),
            _ => Err(ApiError::new(StatusCode::UNAUTHORIZED, "AuthFailed", "admin token required")),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidInput", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

fn status_for(code: &str) -> StatusCode {
    match code {
        "AuthFailed" | "UnknownCtxC" => StatusCode::UNAUTHORIZED,
        "ConsentDenied" | "SourceMismatch" => StatusCode::FORBIDDEN,
        "UnknownCapId" | "UnknownRp" | "UnknownChallenge" | "NoSuchBinding" | "NoSuchConsent" => StatusCode::NOT_FOUND,
        "BindingConflict" | "ChallengeReplayed" => StatusCode::CONFLICT,
        "ChallengeExpired" | "BadPopSignature" | "UntrustedChain" | "CertificateExpired" | "UnsupportedKeyAlgorithm"
        | "BadSignature" | "WrongAudience" | "Expired" => StatusCode::UNPROCESSABLE_ENTITY,
        "MdmUnavailable" | "MdmAuthFailed" => StatusCode::BAD_GATEWAY,
        "StoreFailure" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let code = e.code();
        Self::new(status_for(code), code, e.to_string())
    }
}

impl From<ProviderError> for ApiError {
    fn from(e: ProviderError) -> Self {
        ServiceError::from(e).into()
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        ServiceError::from(e).into()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn require_bearer(headers: &HeaderMap) -> ApiResult<&str> {
    bearer(headers).ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "AuthFailed", "bearer token required"))
}

fn cap_id(raw: &str) -> ApiResult<CapId> {
    Ok(CapId::new(raw)?)
}

fn b64(field: &str, value: &str) -> ApiResult<Vec<u8>> {
    URL_SAFE_NO_PAD
        .decode(value.trim_end_matches('='))
        .map_err(|e| ApiError::bad_request(format!("{field}: {e}")))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/keys", get(keys))
        .route("/link/challenge", post(link_challenge))
        .route("/link/response", post(link_response))
        .route("/ingest/radius", post(ingest_radius))
        .route("/ingest/context", post(ingest_context))
        .route("/contexts/{cap_id}", get(rp_contexts))
        .route("/consents", post(grant_consent).get(list_consents))
        .route("/consents/{cap_id}/{rp_id}", delete(revoke_consent))
        .route("/admin/ctxcs", post(add_ctxc).get(list_ctxcs))
        .route("/admin/rps", post(add_rp).get(list_rps))
        .route("/admin/subjects", post(add_subject).get(list_subjects))
        .route("/admin/table", post(import_table))
        .route("/admin/bindings", get(list_bindings))
        .route("/admin/bindings/revoke", post(revoke_binding))
        .route("/admin/pseudo", post(issue_pseudo))
        .route("/admin/contexts/{cap_id}", get(admin_contexts))
        .route("/admin/sweep", post(sweep))
        .route("/admin/mdm/poll", post(poll_mdm))
        .route("/admin/audit", get(audit))
        .with_state(state)
}

async fn keys(State(s): State<AppState>) -> Json<PublishedKey> {
    Json(s.cap.linker.published_key())
}

#[derive(Serialize, Deserialize)]
pub struct ChallengeResponse {
    pub challenge_id: String,
    pub nonce: String,
    pub expires_at: DateTime<Utc>,
}

async fn link_challenge(State(s): State<AppState>, headers: HeaderMap) -> ApiResult<Json<ChallengeResponse>> {
    let token = require_bearer(&headers)?;
    let c = s.cap.create_challenge(token, s.now())?;
    Ok(Json(ChallengeResponse {
        challenge_id: c.challenge_id.clone(),
        nonce: URL_SAFE_NO_PAD.encode(&c.nonce),
        expires_at: c.expires_at(),
    }))
}

#[derive(Serialize, Deserialize)]
pub struct LinkResponseBody {
    pub challenge_id: String,
    pub cert_chain: Vec<String>,
    pub signature: String,
}

async fn link_response(State(s): State<AppState>, Json(body): Json<LinkResponseBody>) -> ApiResult<Json<Binding>> {
    let chain = body
        .cert_chain
        .iter()
        .map(|c| b64("cert_chain", c))
        .collect::<ApiResult<Vec<_>>>()?;
    let signature = b64("signature", &body.signature)?;
    Ok(Json(s.cap.complete_challenge(&body.challenge_id, &chain, &signature, s.now())?))
}

fn ctxc_credentials(headers: &HeaderMap) -> ApiResult<(CtxCName, &str)> {
    let name = headers
        .get(CTXC_HEADER)
        .and_then(|v| v.to_str().ok())
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "AuthFailed", "X-CtxC-Name header required"))?;
    Ok((CtxCName::new(name)?, require_bearer(headers)?))
}

async fn ingest_radius(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<impl IntoResponse> {
    let (ctxc, token) = ctxc_credentials(&headers)?;
    Ok(Json(s.cap.ingest_radius(&ctxc, token, &body, s.now())?))
}

async fn ingest_context(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<impl IntoResponse> {
    let (ctxc, token) = ctxc_credentials(&headers)?;
    let record: ContextRecord =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("context record: {e}")))?;
    Ok(Json(s.cap.ingest_context(&ctxc, token, record, s.now())?))
}

#[derive(Deserialize)]
struct ContextParams {
    types: Option<String>,
    since: Option<DateTime<Utc>>,
    limit: Option<usize>,
}

async fn rp_contexts(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(raw): Path<String>,
    Query(p): Query<ContextParams>,
) -> ApiResult<impl IntoResponse> {
    let token = require_bearer(&headers)?;
    let id = cap_id(&raw)?;
    let types = p.types.map(|t| {
        t.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect::<Vec<_>>()
    });
    let q = RpQuery { types, since: p.since, limit: p.limit };
    let now = s.now();
    Ok(Json(s.cap.rp_get_contexts(token, &id, &q, now)?))
}

#[derive(Serialize, Deserialize)]
pub struct ConsentRequest {
    pub cap_id: String,
    pub rp_id: String,
    pub prefixes: BTreeSet<String>,
    #[serde(default)]
    pub expires_at: Option<DateTime<Utc>>,
}

async fn grant_consent(State(s): State<AppState>, headers: HeaderMap, Json(r): Json<ConsentRequest>) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    let id = cap_id(&r.cap_id)?;
    Ok(Json(s.cap.grant_consent(&id, &r.rp_id, r.prefixes, r.expires_at, s.now())?))
}

async fn list_consents(State(s): State<AppState>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    Ok(Json(s.cap.provider.consents()))
}

async fn revoke_consent(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path((raw, rp_id)): Path<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    let id = cap_id(&raw)?;
    s.cap.provider.revoke_consent(&id, &rp_id, s.now())?;
    Ok(Json(json!({ "cap_id": id, "rp_id": rp_id, "revoked": true })))
}

#[derive(Deserialize)]
struct NewCtxc {
    name: String,
    token: Option<String>,
}

async fn add_ctxc(State(s): State<AppState>, headers: HeaderMap, Json(r): Json<NewCtxc>) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    let name = CtxCName::new(r.name)?;
    let token = r.token.unwrap_or_else(generate_secret);
    s.cap.directory.register_ctxc_with_token(name.clone(), &token);
    Ok(Json(json!({ "name": name, "token": token })))
}

async fn list_ctxcs(State(s): State<AppState>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    Ok(Json(s.cap.directory.ctxcs()))
}

#[derive(Deserialize)]
struct NewRp {
    rp_id: String,
    webhook_url: Option<String>,
    token: Option<String>,
}

async fn add_rp(State(s): State<AppState>, headers: HeaderMap, Json(r): Json<NewRp>) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    let token = r.token.unwrap_or_else(generate_secret);
    s.cap.provider.register_rp_with_token(&r.rp_id, r.webhook_url.clone(), &token)?;
    Ok(Json(json!({ "rp_id": r.rp_id, "webhook_url": r.webhook_url, "token": token })))
}

async fn list_rps(State(s): State<AppState>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    Ok(Json(s.cap.provider.rps()))
}

#[derive(Deserialize)]
struct NewSubject {
    cap_id: String,
    token: Option<String>,
}

async fn add_subject(State(s): State<AppState>, headers: HeaderMap, Json(r): Json<NewSubject>) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    let id = cap_id(&r.cap_id)?;
    let token = r.token.unwrap_or_else(generate_secret);
    s.cap.directory.register_subject_with_token(id.clone(), &token);
    Ok(Json(json!({ "cap_id": id, "agent_token": token })))
}

async fn list_subjects(State(s): State<AppState>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    Ok(Json(s.cap.directory.subjects()))
}

async fn import_table(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("table is not UTF-8"))?;
    Ok(Json(s.cap.import_admin_table(text, s.now())?))
}

#[derive(Deserialize)]
struct BindingParams {
    #[serde(default)]
    all: bool,
}

async fn list_bindings(State(s): State<AppState>, headers: HeaderMap, Query(p): Query<BindingParams>) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    Ok(Json(if p.all { s.cap.linker.bindings() } else { s.cap.linker.active_bindings() }))
}

#[derive(Deserialize)]
struct RevokeBinding {
    key: String,
}

async fn revoke_binding(State(s): State<AppState>, headers: HeaderMap, Json(r): Json<RevokeBinding>) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    let selector: BindingSelector = r.key.parse().map_err(|e: ModelError| ApiError::from(e))?;
    Ok(Json(s.cap.revoke_binding(&selector, s.now())?))
}

#[derive(Deserialize)]
struct PseudoRequest {
    cap_id: String,
    audience: String,
}

async fn issue_pseudo(State(s): State<AppState>, headers: HeaderMap, Json(r): Json<PseudoRequest>) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    let id = cap_id(&r.cap_id)?;
    let audience = CtxCName::new(r.audience)?;
    let (token, binding) = s.cap.issue_pseudo_id(&id, &audience, s.now())?;
    Ok(Json(json!({ "token": token.as_str(), "binding": binding })))
}

#[derive(Deserialize)]
struct LastParams {
    last: Option<usize>,
}

async fn admin_contexts(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(raw): Path<String>,
    Query(p): Query<LastParams>,
) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    let id = cap_id(&raw)?;
    let (derived, contexts) = s.cap.admin_contexts(&id, p.last.unwrap_or(10), s.now());
    Ok(Json(json!({ "derived": derived, "contexts": contexts })))
}

async fn sweep(State(s): State<AppState>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    Ok(Json(s.cap.sweep(s.now())?))
}

async fn poll_mdm(State(s): State<AppState>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    let mut reports = Vec::new();
    for r in s.cap.poll_all_mdms().await {
        reports.push(r?);
    }
    Ok(Json(reports))
}

async fn audit(State(s): State<AppState>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    s.require_admin(&headers)?;
    Ok(Json(s.cap.audit.entries()))
}
