//! Certificate chain validation and proof-of-possession signature checks.
//!
//! Validation is intentionally narrow: signatures along the path, CA flags on
//! issuers, and validity windows. Revocation is not consulted.

use chrono::{DateTime, Utc};
use thiserror::Error;
use x509_parser::certificate::X509Certificate;
use x509_parser::public_key::PublicKey;
use x509_parser::time::ASN1Time;

use crate::model::{self, cert_fingerprint, normalize_serial, CertFingerprint, ModelError};

const OID_ED25519: &str = "1.3.101.112";
const OID_EC_PUBLIC_KEY: &str = "1.2.840.10045.2.1";
const OID_CURVE_P256: &str = "1.2.840.10045.3.1.7";
const OID_RSA_ENCRYPTION: &str = "1.2.840.113549.1.1.1";
const MAX_PATH_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("certificate chain does not lead to a trust anchor")]
    Untrusted,
    #[error("certificate outside its validity period")]
    Expired,
    #[error(transparent)]
    Malformed(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PopError {
    #[error("signature does not verify under the leaf key")]
    BadSignature,
    #[error("leaf key algorithm not in the allowlist: {0}")]
    UnsupportedAlgorithm(String),
}

/// Signature algorithms accepted for leaf keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKeyAlgorithm {
    Ed25519,
    EcdsaP256Sha256,
    Rsa2048Pkcs1Sha256,
}

/// Identity fields of a certificate used as binding keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertIdentity {
    pub fingerprint: CertFingerprint,
    pub issuer: String,
    pub serial: String,
}

pub fn cert_identity(der: &[u8]) -> Result<CertIdentity, ModelError> {
    let cert = model::parse_der(der)?;
    let issuer = model::render_x509_name(cert.issuer())?;
    let serial = normalize_serial(&hex::encode(cert.raw_serial()))?;
    Ok(CertIdentity {
        fingerprint: cert_fingerprint(der)?,
        issuer,
        serial,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrustAnchors {
    anchors: Vec<Vec<u8>>,
}

impl TrustAnchors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_der(&mut self, der: Vec<u8>) -> Result<(), ModelError> {
        model::parse_der(&der)?;
        if !self.anchors.contains(&der) {
            self.anchors.push(der);
        }
        Ok(())
    }

    pub fn from_ders(ders: impl IntoIterator<Item = Vec<u8>>) -> Result<Self, ModelError> {
        let mut anchors = Self::new();
        for der in ders {
            anchors.add_der(der)?;
        }
        Ok(anchors)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Validates `chain` (leaf first, optional intermediates after) against
    /// the configured anchors at `now`.
    ///
    /// Path errors take precedence: a chain that does not reach an anchor is
    /// `Untrusted` even if it is also expired.
    pub fn verify_chain(&self, chain: &[Vec<u8>], now: DateTime<Utc>) -> Result<(), ChainError> {
        let Some((leaf_der, rest)) = chain.split_first() else {
            return Err(ChainError::Untrusted);
        };
        let leaf = model::parse_der(leaf_der)?;
        let intermediates = rest
            .iter()
            .map(|der| model::parse_der(der))
            .collect::<Result<Vec<_>, _>>()?;
        let anchors = self
            .anchors
            .iter()
            .map(|der| model::parse_der(der))
            .collect::<Result<Vec<_>, _>>()?;

        if is_ca(&leaf) && !anchors.iter().any(|a| a.as_ref() == leaf.as_ref()) {
            return Err(ChainError::Untrusted);
        }

        let mut path: Vec<&X509Certificate<'_>> = vec![&leaf];
        let mut used = vec![false; intermediates.len()];
        let mut current = &leaf;
        loop {
            if let Some(anchor) = anchors.iter().find(|a| issued_by(current, a)) {
                path.push(anchor);
                break;
            }
            if path.len() > MAX_PATH_LEN {
                return Err(ChainError::Untrusted);
            }
            let next = intermediates
                .iter()
                .enumerate()
                .find(|(i, c)| !used[*i] && is_ca(c) && issued_by(current, c));
            match next {
                Some((i, cert)) => {
                    used[i] = true;
                    path.push(cert);
                    current = cert;
                }
                None => return Err(ChainError::Untrusted),
            }
        }

        let at = ASN1Time::from_timestamp(now.timestamp()).map_err(|_| ChainError::Expired)?;
        if path.iter().any(|c| !c.validity().is_valid_at(at)) {
            return Err(ChainError::Expired);
        }
        Ok(())
    }
}

fn is_ca(cert: &X509Certificate<'_>) -> bool {
    matches!(cert.basic_constraints(), Ok(Some(bc)) if bc.value.ca)
}

fn issued_by(child: &X509Certificate<'_>, issuer: &X509Certificate<'_>) -> bool {
    child.issuer().as_raw() == issuer.subject().as_raw()
        && child.verify_signature(Some(issuer.public_key())).is_ok()
}

pub fn leaf_key_algorithm(cert: &X509Certificate<'_>) -> Result<LeafKeyAlgorithm, PopError> {
    let spki = cert.public_key();
    let alg = spki.algorithm.algorithm.to_id_string();
    match alg.as_str() {
        OID_ED25519 => Ok(LeafKeyAlgorithm::Ed25519),
        OID_EC_PUBLIC_KEY => {
            let curve = spki
                .algorithm
                .parameters
                .as_ref()
                .and_then(|p| p.as_oid().ok())
                .map(|o| o.to_id_string());
            if curve.as_deref() == Some(OID_CURVE_P256) {
                Ok(LeafKeyAlgorithm::EcdsaP256Sha256)
            } else {
                Err(PopError::UnsupportedAlgorithm(format!(
                    "EC curve {}",
                    curve.unwrap_or_else(|| "unspecified".into())
                )))
            }
        }
        OID_RSA_ENCRYPTION => match spki.parsed() {
            Ok(PublicKey::RSA(rsa)) if rsa.key_size() >= 2048 => {
                Ok(LeafKeyAlgorithm::Rsa2048Pkcs1Sha256)
            }
            _ => Err(PopError::UnsupportedAlgorithm("RSA key below 2048 bits".into())),
        },
        other => Err(PopError::UnsupportedAlgorithm(other.to_owned())),
    }
}

/// Verifies `signature` over `message` with the leaf certificate's key.
///
/// ECDSA signatures are expected in ASN.1 DER form.
pub fn verify_pop_signature(
    leaf_der: &[u8],
    message: &[u8],
    signature: &[u8],
) -> Result<LeafKeyAlgorithm, PopError> {
    let cert = model::parse_der(leaf_der).map_err(|_| PopError::BadSignature)?;
    let algorithm = leaf_key_algorithm(&cert)?;
    let verifier: &dyn ring::signature::VerificationAlgorithm = match algorithm {
        LeafKeyAlgorithm::Ed25519 => &ring::signature::ED25519,
        LeafKeyAlgorithm::EcdsaP256Sha256 => &ring::signature::ECDSA_P256_SHA256_ASN1,
        LeafKeyAlgorithm::Rsa2048Pkcs1Sha256 => &ring::signature::RSA_PKCS1_2048_8192_SHA256,
    };
    let key_bytes = &cert.public_key().subject_public_key.data;
    ring::signature::UnparsedPublicKey::new(verifier, key_bytes)
        .verify(message, signature)
        .map_err(|_| PopError::BadSignature)?;
    Ok(algorithm)
}
