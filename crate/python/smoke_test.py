"""Smoke test for the ztf_cap extension module.

Build and install the module with `pip install --no-build-isolation -e crates/python`,
then run `pytest python/`.
Expected values are computed independently with the `cryptography` package.
"""

import base64
import datetime as dt
import hashlib
import json

import pytest
from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519
from cryptography.x509.oid import NameOID

import ztf_cap


def b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode()


def make_cert(serial: int):
    key = ec.generate_private_key(ec.SECP256R1())
    issuer = x509.Name([
        x509.NameAttribute(NameOID.ORGANIZATION_NAME, "Lab"),
        x509.NameAttribute(NameOID.COMMON_NAME, "Lab CA"),
    ])
    subject = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "laptop")])
    now = dt.datetime(2024, 1, 1, tzinfo=dt.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(issuer)
        .public_key(key.public_key())
        .serial_number(serial)
        .not_valid_before(now)
        .not_valid_after(now + dt.timedelta(days=365))
        .sign(key, hashes.SHA256())
    )
    return cert


def test_cert_identity_matches_independent_computation():
    cert = make_cert(0x00AB12)
    der = cert.public_bytes(serialization.Encoding.DER)
    ident = ztf_cap.cert_identity(der)
    assert ident["fingerprint"] == hashlib.sha256(der).hexdigest()
    assert ident["serial"] == "ab12"
    assert ident["issuer"] == "CN=Lab CA, O=Lab"
    pem = cert.public_bytes(serialization.Encoding.PEM)
    assert ztf_cap.cert_identity(pem) == ident
    with pytest.raises(ztf_cap.ZtfError, match="^MalformedCertificate"):
        ztf_cap.cert_identity(b"junk")


def test_detail_parse():
    text = (
        "Mon Mar  4 10:00:00 2024\n"
        '\tAcct-Status-Type = Interim-Update\n'
        '\tAcct-Session-Id = "s1"\n'
        "\tAcct-Input-Octets = 1500\n"
        "\tAcct-Output-Octets = 42000\n"
        '\tCalling-Station-Id = "AA-BB-CC-DD-EE-FF"\n'
        "\n"
        "garbage without a timestamp\n"
        "\n"
    )
    parsed = ztf_cap.parse_detail(text.encode())
    assert len(parsed["records"]) == 1
    rec = parsed["records"][0]
    assert rec["kind"] == "acct"
    assert json.dumps(rec)
    assert len(parsed["warnings"]) == 1
    assert ztf_cap.parse_detail(b"") == {"records": [], "warnings": []}


def test_posture_rule_order():
    assert ztf_cap.derive_posture("true", "enabled", "noncompliant", "1")["level"] == "jailbroken"
    assert ztf_cap.derive_posture("false", "disabled", "compliant", "17.2") == {
        "level": "compliant",
        "reasons": ["compliance_state=compliant"],
        "os_version": "17.2",
    }
    # Any lost-mode value other than "disabled" or empty counts as lost.
    assert ztf_cap.derive_posture("false", "off", "compliant", "17.2")["level"] == "lost"
    assert ztf_cap.derive_posture("False", "disabled", "inGracePeriod", "17.2")["level"] == "unknown"


def test_normalize_mac():
    assert ztf_cap.normalize_mac("AA-BB-CC-DD-EE-FF") == ztf_cap.normalize_mac("aa:bb:cc:dd:ee:ff")


def sign_token(key, kid, claims):
    header = b64url(json.dumps({"alg": "Ed25519", "kid": kid}).encode())
    payload = b64url(json.dumps(claims).encode())
    sig = key.sign(f"{header}.{payload}".encode())
    return f"{header}.{payload}.{b64url(sig)}"


def test_pseudo_token_verification():
    key = ed25519.Ed25519PrivateKey.generate()
    pub = key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    kid, pub_b64 = "k1", b64url(pub)
    pseudo = b64url(bytes(range(16)))
    claims = {"pseudo_id": pseudo, "aud": "edr", "iat": 1_700_000_000, "exp": 1_700_003_600, "iss": "cap"}
    token = sign_token(key, kid, claims)
    inside = "2023-11-14T22:30:00Z"
    assert ztf_cap.verify_pseudo_token(token, kid, pub_b64, "edr", now=inside) == pseudo
    with pytest.raises(ztf_cap.ZtfError, match="^WrongAudience"):
        ztf_cap.verify_pseudo_token(token, kid, pub_b64, "hr", now=inside)
    with pytest.raises(ztf_cap.ZtfError, match="^Expired"):
        ztf_cap.verify_pseudo_token(token, kid, pub_b64, "edr", now="2023-11-15T00:00:00Z")
    other = ed25519.Ed25519PrivateKey.generate()
    with pytest.raises(ztf_cap.ZtfError, match="^BadSignature"):
        ztf_cap.verify_pseudo_token(sign_token(other, kid, claims), kid, pub_b64, "edr", now=inside)
