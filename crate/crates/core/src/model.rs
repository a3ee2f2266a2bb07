//! Shared domain types and canonicalization primitives.
//!
//! Every identifier that crosses a module boundary is a validated newtype;
//! constructing one from untrusted input goes through `new`/`parse`, and
//! serde deserialization re-runs the same checks.

use std::collections::BTreeMap;
use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ID_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid CAP id {0:?}")]
    InvalidCapId(String),
    #[error("invalid CtxC name {0:?}")]
    InvalidCtxCName(String),
    #[error("invalid pseudo-ID {0:?}")]
    InvalidPseudoId(String),
    #[error("local id must be non-empty")]
    EmptyLocalId,
    #[error("malformed distinguished name: {0}")]
    MalformedDn(String),
    #[error("malformed certificate serial {0:?}")]
    MalformedSerial(String),
    #[error("malformed certificate: {0}")]
    MalformedCertificate(String),
    #[error("invalid fingerprint {0:?}")]
    InvalidFingerprint(String),
    #[error("invalid context record: {0}")]
    InvalidContext(String),
}

fn url_safe(s: &str) -> bool {
    s.bytes()
        .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~'))
}

/// Federation-wide identifier of a user or device inside this CAP.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CapId(String);

impl CapId {
    pub fn new(value: impl Into<String>) -> Result<Self, ModelError> {
        let value = value.into();
        if value.is_empty() || value.len() > MAX_ID_LEN || !url_safe(&value) {
            return Err(ModelError::InvalidCapId(value));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Name of a registered Context Collector.
///
/// Restricted to the URL-safe charset so it can appear in headers, paths and
/// the `kind:name:rest` binding-key notation without escaping.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CtxCName(String);

impl CtxCName {
    pub fn new(value: impl Into<String>) -> Result<Self, ModelError> {
        let value = value.into();
        if value.is_empty() || value.len() > MAX_ID_LEN || !url_safe(&value) {
            return Err(ModelError::InvalidCtxCName(value));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Pairwise pseudonymous identifier: 128 bits, base64url without padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PseudoId(String);

impl PseudoId {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Self(URL_SAFE_NO_PAD.encode(bytes))
    }

    pub fn parse(value: impl Into<String>) -> Result<Self, ModelError> {
        let value = value.into();
        match URL_SAFE_NO_PAD.decode(&value) {
            Ok(bytes) if bytes.len() == 16 => Ok(Self(value)),
            _ => Err(ModelError::InvalidPseudoId(value)),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

macro_rules! string_newtype_conversions {
    ($ty:ident, $ctor:ident) => {
        impl TryFrom<String> for $ty {
            type Error = ModelError;
            fn try_from(value: String) -> Result<Self, Self::Error> {
                $ty::$ctor(value)
            }
        }

        impl From<$ty> for String {
            fn from(value: $ty) -> String {
                value.0
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

string_newtype_conversions!(CapId, new);
string_newtype_conversions!(CtxCName, new);
string_newtype_conversions!(PseudoId, parse);

/// Lowercase hex SHA-256 of a certificate's DER encoding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CertFingerprint(String);

impl CertFingerprint {
    pub fn parse(value: impl Into<String>) -> Result<Self, ModelError> {
        let value = value.into();
        if value.len() != 64 || !value.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(ModelError::InvalidFingerprint(value));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// First 16 hex characters, used for compact table output.
    pub fn short(&self) -> &str {
        &self.0[..16]
    }
}

string_newtype_conversions!(CertFingerprint, parse);

/// Reference to the certificate a CtxC used to authenticate a subject.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawCertificateRef", into = "RawCertificateRef")]
pub enum CertificateRef {
    FullCert { der: Vec<u8> },
    IssuerSerial { issuer: String, serial: String },
}

impl CertificateRef {
    /// Validates that `der` is a well-formed X.509 certificate.
    pub fn full(der: Vec<u8>) -> Result<Self, ModelError> {
        parse_der(&der)?;
        Ok(Self::FullCert { der })
    }

    /// Canonicalizes the issuer and normalizes the serial.
    pub fn issuer_serial(issuer: &str, serial: &str) -> Result<Self, ModelError> {
        Ok(Self::IssuerSerial {
            issuer: canonicalize_dn(issuer)?,
            serial: normalize_serial(serial)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RawCertificateRef {
    FullCert { der: String },
    IssuerSerial { issuer: String, serial: String },
}

impl TryFrom<RawCertificateRef> for CertificateRef {
    type Error = ModelError;

    fn try_from(raw: RawCertificateRef) -> Result<Self, Self::Error> {
        match raw {
            RawCertificateRef::FullCert { der } => {
                let der = URL_SAFE_NO_PAD
                    .decode(der.trim_end_matches('='))
                    .map_err(|e| ModelError::MalformedCertificate(e.to_string()))?;
                CertificateRef::full(der)
            }
            RawCertificateRef::IssuerSerial { issuer, serial } => {
                CertificateRef::issuer_serial(&issuer, &serial)
            }
        }
    }
}

impl From<CertificateRef> for RawCertificateRef {
    fn from(value: CertificateRef) -> Self {
        match value {
            CertificateRef::FullCert { der } => RawCertificateRef::FullCert {
                der: URL_SAFE_NO_PAD.encode(der),
            },
            CertificateRef::IssuerSerial { issuer, serial } => {
                RawCertificateRef::IssuerSerial { issuer, serial }
            }
        }
    }
}

/// The identifier a CtxC attaches to a context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CtxCSubjectRef {
    PseudoId {
        pseudo_id: PseudoId,
    },
    LocalId {
        ctxc: CtxCName,
        #[serde(deserialize_with = "non_empty_string")]
        local_id: String,
    },
    CertRef {
        cert: CertificateRef,
    },
}

impl CtxCSubjectRef {
    pub fn local(ctxc: CtxCName, local_id: impl Into<String>) -> Result<Self, ModelError> {
        let local_id = local_id.into();
        if local_id.is_empty() {
            return Err(ModelError::EmptyLocalId);
        }
        Ok(Self::LocalId { ctxc, local_id })
    }
}

fn non_empty_string<'de, D: serde::Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    let s = String::deserialize(d)?;
    if s.is_empty() {
        return Err(serde::de::Error::custom(ModelError::EmptyLocalId));
    }
    Ok(s)
}

/// Scalar payload value of a context record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Scalar {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Scalar::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Scalar::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Scalar::Bool(v) => Some(*v),
            _ => None,
        }
    }
}

impl From<&str> for Scalar {
    fn from(v: &str) -> Self {
        Scalar::Str(v.to_owned())
    }
}

impl From<String> for Scalar {
    fn from(v: String) -> Self {
        Scalar::Str(v)
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Bool(v)
    }
}

pub type Payload = BTreeMap<String, Scalar>;

/// A typed, timestamped observation from one CtxC about one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawContextRecord")]
pub struct ContextRecord {
    source: CtxCName,
    subject: CtxCSubjectRef,
    context_type: String,
    payload: Payload,
    observed_at: DateTime<Utc>,
    received_at: DateTime<Utc>,
}

#[derive(Deserialize)]
struct RawContextRecord {
    source: CtxCName,
    subject: CtxCSubjectRef,
    context_type: String,
    #[serde(default)]
    payload: Payload,
    observed_at: DateTime<Utc>,
    received_at: DateTime<Utc>,
}

impl TryFrom<RawContextRecord> for ContextRecord {
    type Error = ModelError;

    fn try_from(r: RawContextRecord) -> Result<Self, Self::Error> {
        ContextRecord::new(r.source, r.subject, r.context_type, r.payload, r.observed_at, r.received_at)
    }
}

impl ContextRecord {
    pub fn new(
        source: CtxCName,
        subject: CtxCSubjectRef,
        context_type: impl Into<String>,
        payload: Payload,
        observed_at: DateTime<Utc>,
        received_at: DateTime<Utc>,
    ) -> Result<Self, ModelError> {
        let context_type = context_type.into();
        if context_type.is_empty() {
            return Err(ModelError::InvalidContext("context_type is empty".into()));
        }
        if observed_at > received_at {
            return Err(ModelError::InvalidContext(format!(
                "observed_at {observed_at} is after received_at {received_at}"
            )));
        }
        if payload.keys().any(|k| k.is_empty()) {
            return Err(ModelError::InvalidContext("empty payload key".into()));
        }
        Ok(Self {
            source,
            subject,
            context_type,
            payload,
            observed_at,
            received_at,
        })
    }

    pub fn source(&self) -> &CtxCName {
        &self.source
    }

    pub fn subject(&self) -> &CtxCSubjectRef {
        &self.subject
    }

    pub fn context_type(&self) -> &str {
        &self.context_type
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn observed_at(&self) -> DateTime<Utc> {
        self.observed_at
    }

    pub fn received_at(&self) -> DateTime<Utc> {
        self.received_at
    }

    /// Stable hash of the payload, used for redelivery deduplication.
    pub fn payload_digest(&self) -> String {
        let canonical = serde_json::to_vec(&self.payload).expect("payload serializes");
        hex::encode(ring::digest::digest(&ring::digest::SHA256, &canonical))
    }
}

/// Canonicalizes a printed distinguished name.
///
/// Components are split on unescaped commas, trimmed, the attribute type is
/// uppercased and the value is kept byte-for-byte. Multi-valued RDNs (`+`)
/// and hex escapes are rejected.
pub fn canonicalize_dn(dn: &str) -> Result<String, ModelError> {
    if dn.trim().is_empty() {
        return Err(ModelError::MalformedDn("empty DN".into()));
    }
    let mut out = Vec::new();
    for component in split_unescaped(dn, ',')? {
        out.push(canonical_component(component)?);
    }
    Ok(out.join(", "))
}

fn split_unescaped(s: &str, sep: char) -> Result<Vec<&str>, ModelError> {
    let mut parts = Vec::new();
    let mut start = 0;
    let mut chars = s.char_indices();
    while let Some((i, c)) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some((_, next)) if next.is_ascii_hexdigit() => {
                    return Err(ModelError::MalformedDn(format!(
                        "hex escapes are not supported: {s:?}"
                    )))
                }
                Some(_) => {}
                None => return Err(ModelError::MalformedDn(format!("dangling escape: {s:?}"))),
            }
        } else if c == sep {
            parts.push(&s[start..i]);
            start = i + c.len_utf8();
        }
    }
    parts.push(&s[start..]);
    Ok(parts)
}

/// Trims trailing whitespace unless the last whitespace character is escaped.
fn trim_end_unescaped(s: &str) -> &str {
    let mut end = s.len();
    while let Some(c) = s[..end].chars().next_back() {
        if !c.is_whitespace() {
            break;
        }
        let before = &s[..end - c.len_utf8()];
        let backslashes = before.bytes().rev().take_while(|&b| b == b'\\').count();
        if backslashes % 2 == 1 {
            break;
        }
        end -= c.len_utf8();
    }
    &s[..end]
}

fn canonical_component(component: &str) -> Result<String, ModelError> {
    let component = trim_end_unescaped(component.trim_start());
    let Some(eq) = find_unescaped(component, '=') else {
        return Err(ModelError::MalformedDn(format!("component {component:?} lacks '='")));
    };
    let attr = component[..eq].trim();
    let value = component[eq + 1..].trim_start();
    if attr.is_empty()
        || !attr
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'-')
    {
        return Err(ModelError::MalformedDn(format!("bad attribute type {attr:?}")));
    }
    if find_unescaped(value, '+').is_some() {
        return Err(ModelError::MalformedDn(format!(
            "multi-valued RDN not supported: {component:?}"
        )));
    }
    Ok(format!("{}={}", attr.to_ascii_uppercase(), value))
}

fn find_unescaped(s: &str, target: char) -> Option<usize> {
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if escaped {
            escaped = false;
        } else if c == '\\' {
            escaped = true;
        } else if c == target {
            return Some(i);
        }
    }
    None
}

/// Normalizes a printed certificate serial to lowercase hex without prefix
/// or leading zeros.
pub fn normalize_serial(serial: &str) -> Result<String, ModelError> {
    let trimmed = serial.trim();
    let digits = trimmed
        .strip_prefix("0x")
        .or_else(|| trimmed.strip_prefix("0X"))
        .unwrap_or(trimmed);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(ModelError::MalformedSerial(serial.to_owned()));
    }
    let stripped = digits.trim_start_matches('0');
    if stripped.is_empty() {
        return Ok("0".to_owned());
    }
    Ok(stripped.to_ascii_lowercase())
}

/// SHA-256 over the exact DER bytes of a well-formed certificate.
pub fn cert_fingerprint(der: &[u8]) -> Result<CertFingerprint, ModelError> {
    parse_der(der)?;
    Ok(CertFingerprint(hex::encode(ring::digest::digest(
        &ring::digest::SHA256,
        der,
    ))))
}

pub(crate) fn parse_der(
    der: &[u8],
) -> Result<x509_parser::certificate::X509Certificate<'_>, ModelError> {
    use x509_parser::prelude::FromDer;
    let (rest, cert) = x509_parser::certificate::X509Certificate::from_der(der)
        .map_err(|e| ModelError::MalformedCertificate(e.to_string()))?;
    if !rest.is_empty() {
        return Err(ModelError::MalformedCertificate(format!(
            "{} trailing bytes after certificate",
            rest.len()
        )));
    }
    Ok(cert)
}

/// Decodes one certificate from PEM or raw DER input.
pub fn certificate_der_from_bytes(input: &[u8]) -> Result<Vec<u8>, ModelError> {
    let looks_pem = input
        .iter()
        .skip_while(|b| b.is_ascii_whitespace())
        .take(5)
        .eq(b"-----".iter());
    let der = if looks_pem {
        let (_, pem) = x509_parser::pem::parse_x509_pem(input)
            .map_err(|e| ModelError::MalformedCertificate(e.to_string()))?;
        pem.contents
    } else {
        input.to_vec()
    };
    parse_der(&der)?;
    Ok(der)
}

/// Decodes every certificate in a PEM bundle.
pub fn certificates_from_pem(input: &[u8]) -> Result<Vec<Vec<u8>>, ModelError> {
    let mut out = Vec::new();
    for pem in x509_parser::pem::Pem::iter_from_buffer(input) {
        let pem = pem.map_err(|e| ModelError::MalformedCertificate(e.to_string()))?;
        parse_der(&pem.contents)?;
        out.push(pem.contents);
    }
    if out.is_empty() {
        return Err(ModelError::MalformedCertificate("no PEM certificates found".into()));
    }
    Ok(out)
}

/// Renders an X.509 name in canonical comma form, most specific RDN first.
pub(crate) fn render_x509_name(name: &x509_parser::x509::X509Name<'_>) -> Result<String, ModelError> {
    let mut parts = Vec::new();
    for rdn in name.iter_rdn().collect::<Vec<_>>().into_iter().rev() {
        let attrs: Vec<_> = rdn.iter().collect();
        if attrs.len() != 1 {
            return Err(ModelError::MalformedDn("multi-valued RDN in certificate name".into()));
        }
        let attr = attrs[0];
        let oid = attr.attr_type();
        let ty = short_attr_name(&oid.to_id_string());
        let value = attr
            .as_str()
            .map_err(|_| ModelError::MalformedDn(format!("non-string value for {ty}")))?;
        parts.push(format!("{ty}={}", escape_dn_value(value)));
    }
    if parts.is_empty() {
        return Err(ModelError::MalformedDn("empty certificate name".into()));
    }
    canonicalize_dn(&parts.join(","))
}

fn short_attr_name(oid: &str) -> String {
    match oid {
        "2.5.4.3" => "CN",
        "2.5.4.6" => "C",
        "2.5.4.7" => "L",
        "2.5.4.8" => "ST",
        "2.5.4.10" => "O",
        "2.5.4.11" => "OU",
        "2.5.4.5" => "SERIALNUMBER",
        "0.9.2342.19200300.100.1.25" => "DC",
        "0.9.2342.19200300.100.1.1" => "UID",
        "1.2.840.113549.1.9.1" => "EMAILADDRESS",
        other => other,
    }
    .to_owned()
}

fn escape_dn_value(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    let last = value.chars().count().saturating_sub(1);
    for (i, c) in value.chars().enumerate() {
        let needs = matches!(c, ',' | '+' | '"' | '\\' | '<' | '>' | ';')
            || (i == 0 && (c == '#' || c == ' '))
            || (i == last && c == ' ');
        if needs {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    #[test]
    fn canonical_dn_is_unchanged() {
        assert_eq!(canonicalize_dn("CN=Device 1, O=Lab").unwrap(), "CN=Device 1, O=Lab");
    }

    #[test]
    fn dn_spacing_and_case_fixed() {
        assert_eq!(canonicalize_dn("cn = Device 1,o=Lab").unwrap(), "CN=Device 1, O=Lab");
    }

    #[test]
    fn dn_escaped_comma_kept_inside_value() {
        // Python `cryptography` (x509.Name.from_rfc4514_string) parses this
        // input into exactly two RDNs: CN="Doe, Jane" and O="Lab".
        assert_eq!(
            canonicalize_dn(r"CN=Doe\, Jane,O=Lab").unwrap(),
            r"CN=Doe\, Jane, O=Lab"
        );
    }

    #[test]
    fn dn_errors() {
        assert!(matches!(canonicalize_dn("CN=x,garbage"), Err(ModelError::MalformedDn(_))));
        assert!(matches!(canonicalize_dn(""), Err(ModelError::MalformedDn(_))));
        assert!(matches!(canonicalize_dn("CN=a+UID=b"), Err(ModelError::MalformedDn(_))));
        assert!(matches!(canonicalize_dn(r"CN=\41bc"), Err(ModelError::MalformedDn(_))));
        assert!(matches!(canonicalize_dn(r"CN=abc\"), Err(ModelError::MalformedDn(_))));
        assert!(matches!(canonicalize_dn("CN=a,,O=b"), Err(ModelError::MalformedDn(_))));
    }

    #[test]
    fn dn_escaped_trailing_space_survives() {
        assert_eq!(canonicalize_dn(r"CN=a\ ,O=b").unwrap(), r"CN=a\ , O=b");
    }

    #[test]
    fn serial_examples() {
        assert_eq!(normalize_serial("0x00AB3F").unwrap(), "ab3f");
        assert_eq!(normalize_serial("0").unwrap(), "0");
        assert_eq!(normalize_serial("0000").unwrap(), "0");
        assert_eq!(normalize_serial("1F3a").unwrap(), "1f3a");
        assert!(matches!(normalize_serial("12:34"), Err(ModelError::MalformedSerial(_))));
        assert!(matches!(normalize_serial("0x"), Err(ModelError::MalformedSerial(_))));
        assert!(matches!(normalize_serial("zz"), Err(ModelError::MalformedSerial(_))));
    }

    #[test]
    fn cap_id_validation() {
        assert!(CapId::new("alice").is_ok());
        assert!(CapId::new("").is_err());
        assert!(CapId::new("a b").is_err());
        assert!(CapId::new("x".repeat(129)).is_err());
        assert!(CapId::new("x".repeat(128)).is_ok());
        assert!(serde_json::from_str::<CapId>("\"has/slash\"").is_err());
    }

    #[test]
    fn truncated_der_is_malformed() {
        let key = rcgen::KeyPair::generate().unwrap();
        let cert = rcgen::CertificateParams::new(vec!["dev".into()])
            .unwrap()
            .self_signed(&key)
            .unwrap();
        let der = cert.der().to_vec();
        assert!(cert_fingerprint(&der).is_ok());
        assert!(matches!(
            cert_fingerprint(&der[..der.len() - 10]),
            Err(ModelError::MalformedCertificate(_))
        ));
        let from_pem = certificate_der_from_bytes(cert.pem().as_bytes()).unwrap();
        assert_eq!(cert_fingerprint(&from_pem).unwrap(), cert_fingerprint(&der).unwrap());
    }

    #[test]
    fn context_record_invariants() {
        let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let t1 = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 1).unwrap();
        let src = CtxCName::new("radius-lab").unwrap();
        let subj = CtxCSubjectRef::local(src.clone(), "mac").unwrap();
        assert!(ContextRecord::new(src.clone(), subj.clone(), "t", Payload::new(), t0, t1).is_ok());
        assert!(ContextRecord::new(src.clone(), subj.clone(), "t", Payload::new(), t1, t0).is_err());
        assert!(ContextRecord::new(src.clone(), subj.clone(), "", Payload::new(), t0, t1).is_err());
        assert!(CtxCSubjectRef::local(src, "").is_err());

        // Deserialization enforces the same checks.
        let bad = r#"{"source":"radius-lab","subject":{"kind":"local_id","ctxc":"radius-lab","local_id":"m"},
            "context_type":"t","payload":{},"observed_at":"2024-01-02T00:00:00Z","received_at":"2024-01-01T00:00:00Z"}"#;
        assert!(serde_json::from_str::<ContextRecord>(bad).is_err());
        let empty_local = r#"{"source":"radius-lab","subject":{"kind":"local_id","ctxc":"radius-lab","local_id":""},
            "context_type":"t","payload":{},"observed_at":"2024-01-01T00:00:00Z","received_at":"2024-01-01T00:00:00Z"}"#;
        assert!(serde_json::from_str::<ContextRecord>(empty_local).is_err());
    }

    #[test]
    fn hundred_generated_certs_have_distinct_fingerprints() {
        let key = rcgen::KeyPair::generate().unwrap();
        let mut seen = std::collections::HashSet::new();
        for i in 0..100 {
            let cert = rcgen::CertificateParams::new(vec![format!("dev{i}")])
                .unwrap()
                .self_signed(&key)
                .unwrap();
            assert!(seen.insert(cert_fingerprint(cert.der()).unwrap()));
        }
    }

    fn dn_strategy() -> impl Strategy<Value = String> {
        let attr = prop::sample::select(vec!["cn", "CN", "o", "Ou", "C", "dc", "2.5.4.3"]);
        let value = r"[A-Za-z0-9 .\-]{0,12}(\\,[a-z ]{0,4})?";
        let component = (attr, r"[ \t]{0,2}", r"[ \t]{0,2}", value)
            .prop_map(|(a, s1, s2, v)| format!("{a}{s1}={s2}{v}"));
        (prop::collection::vec(component, 1..5), r"[ ]{0,2}")
            .prop_map(|(cs, sep)| cs.join(&format!(",{sep}")))
    }

    proptest! {
        #[test]
        fn dn_canonicalization_is_idempotent(dn in dn_strategy()) {
            let once = canonicalize_dn(&dn).unwrap();
            prop_assert_eq!(canonicalize_dn(&once).unwrap(), once);
        }

        #[test]
        fn serial_ignores_case_prefix_and_padding(v in any::<u64>(), zeros in 0usize..4, upper: bool, prefix: bool) {
            let mut s = format!("{}{:x}", "0".repeat(zeros), v);
            if upper { s = s.to_uppercase(); }
            if prefix { s = format!("0x{s}"); }
            prop_assert_eq!(normalize_serial(&s).unwrap(), format!("{v:x}"));
        }

        #[test]
        fn context_records_reject_inverted_times(offset in 1i64..1_000_000) {
            let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
            let src = CtxCName::new("c").unwrap();
            let subj = CtxCSubjectRef::local(src.clone(), "x").unwrap();
            let later = t0 + chrono::Duration::seconds(offset);
            prop_assert!(ContextRecord::new(src, subj, "t", Payload::new(), later, t0).is_err());
        }
    }
}
