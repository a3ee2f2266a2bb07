//! Python module `ztf_cap`: the parts of the CAP that run without a server.
//!
//! Structured results cross the boundary as JSON and come back to Python as
//! plain dicts and lists. Failures raise `ztf_cap.ZtfError` whose message
//! starts with the error code, e.g. `"WrongAudience: ..."`.

use chrono::{DateTime, Utc};
use pyo3::prelude::*;
use serde_json::{json, Value};

use ztf_cap::linking::{verify_pseudo_token as verify_token, PseudoIdToken, PublishedKey};
use ztf_cap::model::{certificate_der_from_bytes, CtxCName};

pyo3::create_exception!(ztf_cap, ZtfError, pyo3::exceptions::PyValueError);

/// A failure as `(code, message)`.
pub type Failure = (&'static str, String);

pub fn parse_detail_value(data: &[u8]) -> Value {
    let parsed = ztf_cap::radius::parse_detail_stream(data);
    json!({ "records": parsed.records, "warnings": parsed.warnings })
}

pub fn posture_value(jail_broken: &str, lost_mode_state: &str, compliance_state: &str, os_version: &str) -> Value {
    serde_json::to_value(ztf_cap::mdm::derive_posture(jail_broken, lost_mode_state, compliance_state, os_version))
        .expect("posture serializes")
}

pub fn cert_identity_value(cert: &[u8]) -> Result<Value, Failure> {
    let der = certificate_der_from_bytes(cert).map_err(|e| ("MalformedCertificate", e.to_string()))?;
    let id = ztf_cap::pki::cert_identity(&der).map_err(|e| ("MalformedCertificate", e.to_string()))?;
    Ok(json!({ "fingerprint": id.fingerprint.as_str(), "issuer": id.issuer, "serial": id.serial }))
}

pub fn check_pseudo_token(
    token: &str,
    kid: &str,
    public_key: &str,
    audience: &str,
    now: Option<&str>,
) -> Result<String, Failure> {
    let audience = CtxCName::new(audience).map_err(|e| ("InvalidInput", e.to_string()))?;
    let now = match now {
        Some(t) => DateTime::parse_from_rfc3339(t)
            .map_err(|e| ("InvalidInput", format!("now: {e}")))?
            .with_timezone(&Utc),
        None => Utc::now(),
    };
    let key = PublishedKey { kid: kid.to_owned(), alg: "Ed25519".to_owned(), public_key: public_key.to_owned() };
    verify_token(&PseudoIdToken(token.to_owned()), &key, &audience, now)
        .map(|id| id.as_str().to_owned())
        .map_err(|e| (e.code(), e.to_string()))
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

fn raise((code, message): Failure) -> PyErr {
    ZtfError::new_err(format!("{code}: {message}"))
}

/// Parses FreeRADIUS detail-file bytes into `{"records": [...], "warnings": [...]}`.
#[pyfunction]
fn parse_detail<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &parse_detail_value(data))
}

/// Posture rules over raw MDM field values; returns `{"level", "reasons", "os_version"}`.
#[pyfunction]
fn derive_posture<'py>(
    py: Python<'py>,
    jail_broken: &str,
    lost_mode_state: &str,
    compliance_state: &str,
    os_version: &str,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &posture_value(jail_broken, lost_mode_state, compliance_state, os_version))
}

/// Fingerprint, canonical issuer and normalized serial of a DER or PEM certificate.
#[pyfunction]
fn cert_identity<'py>(py: Python<'py>, cert: &[u8]) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &cert_identity_value(cert).map_err(raise)?)
}

/// Verifies a pseudo-ID token against the key from `GET /keys` and returns the pseudo-ID.
#[pyfunction]
#[pyo3(signature = (token, kid, public_key, audience, now=None))]
fn verify_pseudo_token(token: &str, kid: &str, public_key: &str, audience: &str, now: Option<&str>) -> PyResult<String> {
    check_pseudo_token(token, kid, public_key, audience, now).map_err(raise)
}

#[pyfunction]
fn normalize_mac(mac: &str) -> String {
    ztf_cap::radius::normalize_mac(mac)
}

#[pymodule]
#[pyo3(name = "ztf_cap")]
fn ztf_cap_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ZtfError", m.py().get_type::<ZtfError>())?;
    m.add_function(wrap_pyfunction!(parse_detail, m)?)?;
    m.add_function(wrap_pyfunction!(derive_posture, m)?)?;
    m.add_function(wrap_pyfunction!(cert_identity, m)?)?;
    m.add_function(wrap_pyfunction!(verify_pseudo_token, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_mac, m)?)?;
    Ok(())
}
