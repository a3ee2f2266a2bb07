//! Renders FreeRADIUS detail-file records.

use chrono::{DateTime, Utc};

use ztf_cap::radius::{format_detail_timestamp, AcctStatus};

fn quote(v: &str) -> String {
    format!("\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\""))
}

fn record(ts: DateTime<Utc>, attrs: &[(&str, String)]) -> String {
    let mut out = format_detail_timestamp(ts);
    out.push('\n');
    for (k, v) in attrs {
        out.push('\t');
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out.push('\n');
    out
}

pub fn auth_accept(ts: DateTime<Utc>, serial: &str, issuer: &str, mac: &str, ap: &str) -> String {
    record(
        ts,
        &[
            ("Packet-Type", "Access-Accept".into()),
            ("User-Name", quote("host/device")),
            ("TLS-Client-Cert-Serial", quote(serial)),
            ("TLS-Client-Cert-Issuer", quote(issuer)),
            ("Called-Station-Id", quote(ap)),
            ("Calling-Station-Id", quote(mac)),
        ],
    )
}

pub fn auth_reject(ts: DateTime<Utc>, mac: &str) -> String {
    record(ts, &[("Packet-Type", "Access-Reject".into()), ("Calling-Station-Id", quote(mac))])
}

pub fn acct(ts: DateTime<Utc>, status: AcctStatus, session: &str, input: u64, output: u64, mac: &str) -> String {
    record(
        ts,
        &[
            ("Acct-Status-Type", status.as_str().into()),
            ("Acct-Session-Id", quote(session)),
            ("Acct-Input-Octets", input.to_string()),
            ("Acct-Output-Octets", output.to_string()),
            ("Calling-Station-Id", quote(mac)),
            ("NAS-IP-Address", "10.0.0.2".into()),
        ],
    )
}
