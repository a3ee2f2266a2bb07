//! Throwaway PKI for simulated devices.

use rcgen::{BasicConstraints, CertificateParams, CertifiedIssuer, DistinguishedName, DnType, IsCa, KeyPair};
use ring::rand::SystemRandom;
use ring::signature::{EcdsaKeyPair, ECDSA_P256_SHA256_ASN1_SIGNING};
use serde::{Deserialize, Serialize};

use ztf_cap::model::CertFingerprint;
use ztf_cap::pki::{cert_identity, TrustAnchors};

pub type Issuer = CertifiedIssuer<'static, KeyPair>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceVariant {
    #[default]
    Valid,
    /// Validity window ended years ago.
    Expired,
    /// Issued by a CA that reuses the root's name but not its key.
    WrongCa,
    /// Issued by the trusted branch CA.
    Branch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    #[serde(default)]
    pub variant: DeviceVariant,
    #[serde(default)]
    pub serial: Option<u64>,
}

impl DeviceSpec {
    pub fn valid(name: impl Into<String>) -> Self {
        Self { name: name.into(), variant: DeviceVariant::Valid, serial: None }
    }
}

#[derive(Clone)]
pub struct TestDevice {
    pub name: String,
    pub variant: DeviceVariant,
    pub cert_der: Vec<u8>,
    key_pkcs8: Vec<u8>,
    /// Normalized serial as the CAP derives it from the certificate.
    pub serial: String,
    /// Canonical RFC 4514 issuer name.
    pub issuer: String,
    pub fingerprint: CertFingerprint,
    /// Chain to present, leaf first, anchor excluded.
    pub chain: Vec<Vec<u8>>,
}

impl std::fmt::Debug for TestDevice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestDevice")
            .field("name", &self.name)
            .field("variant", &self.variant)
            .field("serial", &self.serial)
            .field("issuer", &self.issuer)
            .finish_non_exhaustive()
    }
}

impl TestDevice {
    /// ECDSA P-256 signature (ASN.1 DER) with the device key.
    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        let rng = SystemRandom::new();
        let key = EcdsaKeyPair::from_pkcs8(&ECDSA_P256_SHA256_ASN1_SIGNING, &self.key_pkcs8, &rng)
            .expect("device key is P-256 PKCS#8");
        key.sign(&rng, message).expect("signing succeeds").as_ref().to_vec()
    }

    /// The device certificate in OpenSSL oneline issuer form, as FreeRADIUS
    /// logs it.
    pub fn issuer_oneline(&self) -> String {
        let mut parts: Vec<&str> = self.issuer.split(", ").collect();
        parts.reverse();
        parts.iter().map(|p| format!("/{p}")).collect()
    }
}

pub struct TestPki {
    pub root: Issuer,
    pub branch: Issuer,
    pub rogue: Issuer,
    pub devices: Vec<TestDevice>,
}

fn ca_params(cn: &str, not_after_year: i32) -> CertificateParams {
    let mut params = CertificateParams::new(vec![]).expect("empty SAN list");
    params.distinguished_name = DistinguishedName::new();
    params.distinguished_name.push(DnType::OrganizationName, "Lab");
    params.distinguished_name.push(DnType::CommonName, cn);
    params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
    params.not_before = rcgen::date_time_ymd(2020, 1, 1);
    params.not_after = rcgen::date_time_ymd(not_after_year, 1, 1);
    params
}

fn new_ca(cn: &str) -> Issuer {
    CertifiedIssuer::self_signed(ca_params(cn, 2090), KeyPair::generate().expect("keygen")).expect("self-signed CA")
}

impl TestPki {
    pub fn new() -> Self {
        let root = new_ca("Lab CA");
        let branch = new_ca("Branch CA");
        let rogue = new_ca("Lab CA");
        Self { root, branch, rogue, devices: Vec::new() }
    }

    /// Root CA plus `specs.len()` leaves, in order.
    pub fn generate(specs: &[DeviceSpec]) -> Self {
        let mut pki = Self::new();
        for spec in specs {
            pki.issue(spec);
        }
        pki
    }

    pub fn trust_anchors(&self) -> TrustAnchors {
        TrustAnchors::from_ders([self.root.der().to_vec(), self.branch.der().to_vec()]).expect("CA certs parse")
    }

    pub fn root_pem(&self) -> String {
        self.root.pem()
    }

    pub fn issue(&mut self, spec: &DeviceSpec) -> TestDevice {
        let serial = spec.serial.unwrap_or(0x1000 + self.devices.len() as u64);
        let key = KeyPair::generate_for(&rcgen::PKCS_ECDSA_P256_SHA256).expect("P-256 keygen");
        let mut params = CertificateParams::new(vec![format!("{}.devices.lab", spec.name)]).expect("SAN");
        params.distinguished_name = DistinguishedName::new();
        params.distinguished_name.push(DnType::CommonName, spec.name.as_str());
        params.serial_number = Some(rcgen::SerialNumber::from(serial));
        params.not_before = rcgen::date_time_ymd(2020, 1, 1);
        params.not_after = rcgen::date_time_ymd(2080, 1, 1);
        if spec.variant == DeviceVariant::Expired {
            params.not_before = rcgen::date_time_ymd(2001, 1, 1);
            params.not_after = rcgen::date_time_ymd(2002, 1, 1);
        }
        let issuer = match spec.variant {
            DeviceVariant::WrongCa => &self.rogue,
            DeviceVariant::Branch => &self.branch,
            _ => &self.root,
        };
        let cert = params.signed_by(&key, issuer).expect("leaf signs");
        let der = cert.der().to_vec();
        let identity = cert_identity(&der).expect("generated leaf parses");
        let device = TestDevice {
            name: spec.name.clone(),
            variant: spec.variant,
            chain: vec![der.clone()],
            cert_der: der,
            key_pkcs8: key.serialize_der(),
            serial: identity.serial,
            issuer: identity.issuer,
            fingerprint: identity.fingerprint,
        };
        self.devices.push(device.clone());
        device
    }

    pub fn device(&self, name: &str) -> Option<&TestDevice> {
        self.devices.iter().find(|d| d.name == name)
    }
}

impl Default for TestPki {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Default)]
pub struct PkiOptions {
    pub expired: Vec<usize>,
    pub wrong_ca: Vec<usize>,
    /// Each index gets a branch-CA leaf sharing that device's serial.
    pub duplicate_serial_of: Vec<usize>,
}

/// `n` valid leaves named `dev-0..`, with variants per `options`.
pub fn gen_test_pki(n: usize, options: &PkiOptions) -> TestPki {
    assert!(n >= 1, "at least one device");
    let specs: Vec<DeviceSpec> = (0..n)
        .map(|i| DeviceSpec {
            name: format!("dev-{i}"),
            variant: if options.expired.contains(&i) {
                DeviceVariant::Expired
            } else if options.wrong_ca.contains(&i) {
                DeviceVariant::WrongCa
            } else {
                DeviceVariant::Valid
            },
            serial: None,
        })
        .collect();
    let mut pki = TestPki::generate(&specs);
    for &i in &options.duplicate_serial_of {
        let serial = 0x1000 + i as u64;
        pki.issue(&DeviceSpec { name: format!("dev-{i}-branch"), variant: DeviceVariant::Branch, serial: Some(serial) });
    }
    pki
}
