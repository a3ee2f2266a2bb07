//! Scripted federation scenarios.
//!
//! A scenario declares devices, CtxCs, RPs and an optional mock MDM, then
//! runs steps in order against a live in-process CAP. Each step's `expect`
//! is checked and reported; only infrastructure failures abort the run.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use ztf_cap::linking::{verify_pseudo_token, PseudoIdToken};
use ztf_cap::mdm::{MdmCertificate, MdmConfig};
use ztf_cap::model::{CapId, ContextRecord, CtxCName, CtxCSubjectRef, Payload, PseudoId, Scalar};
use ztf_cap::radius::format_detail_timestamp;
use ztf_cap::service::CapConfig;
use ztf_cap::store::{ContextStore, StoreConfig};
use ztf_cap::webhook::WebhookConfig;

use crate::agent::{DeviceAgent, Tamper};
use crate::client::ApiFailure;
use crate::forwarder::{ForwarderConfig, RadiusForwarder};
use crate::mock_mdm::{MockDevice, MockMdm};
use crate::pki::{DeviceSpec, DeviceVariant, TestPki};
use crate::server::TestCap;
use crate::webhook_rx::WebhookReceiver;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioDevice {
    pub name: String,
    pub cap_id: String,
    #[serde(default)]
    pub variant: DeviceVariant,
    #[serde(default)]
    pub serial: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtxCKind {
    /// Ships a detail file through a forwarder.
    Radius,
    #[default]
    Generic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioCtxC {
    pub name: String,
    #[serde(default)]
    pub kind: CtxCKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioRp {
    pub rp_id: String,
    #[serde(default)]
    pub webhook: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioMdm {
    pub ctxc: String,
    #[serde(default = "default_page_size")]
    pub page_size: usize,
}

fn default_page_size() -> usize {
    2
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertFormat {
    #[default]
    Der,
    IssuerSerial,
}

/// `"ok"` or the expected error code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Expect(pub String);

impl Default for Expect {
    fn default() -> Self {
        Expect("ok".into())
    }
}

impl Expect {
    fn is_ok(&self) -> bool {
        self.0 == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "as", rename_all = "snake_case")]
pub enum SubjectSpec {
    /// The pseudo-ID previously issued for `cap_id` to the emitting CtxC.
    Pseudo { cap_id: String },
    Local { local_id: String },
    Device { device: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryExpect {
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub connected: Option<bool>,
    #[serde(default)]
    pub total_input: Option<u64>,
    #[serde(default)]
    pub total_output: Option<u64>,
    /// Posture level, or `"absent"`.
    #[serde(default)]
    pub posture: Option<String>,
    #[serde(default)]
    pub connectivity_absent: Option<bool>,
    /// Every returned context type must start with one of these.
    #[serde(default)]
    pub only_types: Option<Vec<String>>,
    #[serde(default)]
    pub min_contexts: Option<usize>,
    #[serde(default)]
    pub max_contexts: Option<usize>,
    /// Payload values of the returned contexts, in order, for one key.
    #[serde(default)]
    pub payload_sequence: Option<(String, Vec<Value>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Step {
    IssuePseudo {
        cap_id: String,
        ctxc: String,
        #[serde(default)]
        expect: Expect,
    },
    /// The CtxC verifies its stored token, optionally later or as another
    /// audience.
    VerifyPseudo {
        cap_id: String,
        ctxc: String,
        #[serde(default)]
        as_audience: Option<String>,
        #[serde(default)]
        advance_secs: i64,
        #[serde(default)]
        expect: Expect,
    },
    ImportTable {
        csv: String,
        #[serde(default)]
        expect_imported: Option<usize>,
        #[serde(default)]
        expect_rejected: Option<usize>,
    },
    RunChallenge {
        device: String,
        #[serde(default)]
        cap_id: Option<String>,
        #[serde(default)]
        tamper: Tamper,
        /// Signs with this device's key for `Tamper::WrongKey`.
        #[serde(default)]
        other_device: Option<String>,
        /// Submits the same honest response twice; the second is checked.
        #[serde(default)]
        replay: bool,
        /// Advance the CAP clock between challenge and response.
        #[serde(default)]
        delay_secs: i64,
        #[serde(default)]
        expect: Expect,
    },
    RevokeBinding {
        key: String,
        #[serde(default)]
        expect: Expect,
    },
    GrantConsent {
        cap_id: String,
        rp_id: String,
        prefixes: BTreeSet<String>,
        #[serde(default)]
        expires_in_secs: Option<i64>,
        #[serde(default)]
        expect: Expect,
    },
    RevokeConsent {
        cap_id: String,
        rp_id: String,
        #[serde(default)]
        expect: Expect,
    },
    /// Appends templated detail text to the CtxC's file and waits for the
    /// forwarder to deliver it.
    EmitRadius { ctxc: String, text: String },
    EmitContext {
        ctxc: String,
        subject: SubjectSpec,
        context_type: String,
        #[serde(default)]
        payload: BTreeMap<String, Scalar>,
        #[serde(default)]
        count: Option<usize>,
        #[serde(default)]
        expect_outcome: Option<String>,
    },
    SetMdmDevice {
        device: String,
        #[serde(default)]
        cert_format: CertFormat,
        #[serde(default = "default_os")]
        os_version: String,
        #[serde(default = "default_compliance")]
        compliance_state: String,
        #[serde(default = "default_lost")]
        lost_mode_state: String,
        #[serde(default = "default_jb")]
        jail_broken: String,
    },
    Poll {
        #[serde(default)]
        expect_devices: Option<usize>,
    },
    RpQuery {
        rp_id: String,
        cap_id: String,
        #[serde(default)]
        types: Option<Vec<String>>,
        #[serde(default)]
        expect: QueryExpect,
    },
    ExpectWebhooks {
        rp_id: String,
        count: usize,
        #[serde(default = "default_wait_ms")]
        within_ms: u64,
    },
    Sleep { millis: u64 },
}

fn default_os() -> String {
    "17.4.1".into()
}
fn default_compliance() -> String {
    "compliant".into()
}
fn default_lost() -> String {
    "disabled".into()
}
fn default_jb() -> String {
    "False".into()
}
fn default_wait_ms() -> u64 {
    5_000
}

impl Step {
    pub fn kind(&self) -> &'static str {
        match self {
            Step::IssuePseudo { .. } => "issue_pseudo",
            Step::VerifyPseudo { .. } => "verify_pseudo",
            Step::ImportTable { .. } => "import_table",
            Step::RunChallenge { .. } => "run_challenge",
            Step::RevokeBinding { .. } => "revoke_binding",
            Step::GrantConsent { .. } => "grant_consent",
            Step::RevokeConsent { .. } => "revoke_consent",
            Step::EmitRadius { .. } => "emit_radius",
            Step::EmitContext { .. } => "emit_context",
            Step::SetMdmDevice { .. } => "set_mdm_device",
            Step::Poll { .. } => "poll",
            Step::RpQuery { .. } => "rp_query",
            Step::ExpectWebhooks { .. } => "expect_webhooks",
            Step::Sleep { .. } => "sleep",
        }
    }

    /// The error code this step expects, if it expects one.
    pub fn expected_error(&self) -> Option<&str> {
        let e = match self {
            Step::IssuePseudo { expect, .. }
            | Step::VerifyPseudo { expect, .. }
            | Step::RunChallenge { expect, .. }
            | Step::RevokeBinding { expect, .. }
            | Step::GrantConsent { expect, .. }
            | Step::RevokeConsent { expect, .. } => expect.0.as_str(),
            Step::RpQuery { expect, .. } => return expect.error.as_deref(),
            _ => return None,
        };
        (e != "ok").then_some(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub devices: Vec<ScenarioDevice>,
    /// Subjects without a device.
    #[serde(default)]
    pub subjects: Vec<String>,
    #[serde(default)]
    pub ctxcs: Vec<ScenarioCtxC>,
    #[serde(default)]
    pub rps: Vec<ScenarioRp>,
    #[serde(default)]
    pub mdm: Option<ScenarioMdm>,
    pub steps: Vec<Step>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioAbort> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioAbort::Script(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioAbort> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| ScenarioAbort::Infra(e.to_string()))?;
        Self::from_json(&text)
    }

    /// Steps may only name declared devices, CtxCs and RPs.
    pub fn validate(&self) -> Result<(), ScenarioAbort> {
        let devices: BTreeSet<&str> = self.devices.iter().map(|d| d.name.as_str()).collect();
        let mut ctxcs: BTreeSet<&str> = self.ctxcs.iter().map(|c| c.name.as_str()).collect();
        if let Some(m) = &self.mdm {
            ctxcs.insert(m.ctxc.as_str());
        }
        let rps: BTreeSet<&str> = self.rps.iter().map(|r| r.rp_id.as_str()).collect();
        let bad = |what: &str, name: &str| Err(ScenarioAbort::Script(format!("undeclared {what} {name:?}")));
        for step in &self.steps {
            match step {
                Step::RunChallenge { device, other_device, .. } => {
                    if !devices.contains(device.as_str()) {
                        return bad("device", device);
                    }
                    if let Some(o) = other_device.as_deref().filter(|o| !devices.contains(o)) {
                        return bad("device", o);
                    }
                }
                Step::SetMdmDevice { device, .. } => {
                    if !devices.contains(device.as_str()) {
                        return bad("device", device);
                    }
                    if self.mdm.is_none() {
                        return Err(ScenarioAbort::Script("set_mdm_device without an mdm section".into()));
                    }
                }
                Step::IssuePseudo { ctxc, .. }
                | Step::VerifyPseudo { ctxc, .. }
                | Step::EmitRadius { ctxc, .. }
                | Step::EmitContext { ctxc, .. } => {
                    if !ctxcs.contains(ctxc.as_str()) {
                        return bad("ctxc", ctxc);
                    }
                    if let Step::EmitContext { subject: SubjectSpec::Device { device }, .. } = step {
                        if !devices.contains(device.as_str()) {
                            return bad("device", device);
                        }
                    }
                }
                Step::GrantConsent { rp_id, .. }
                | Step::RevokeConsent { rp_id, .. }
                | Step::RpQuery { rp_id, .. }
                | Step::ExpectWebhooks { rp_id, .. } => {
                    if !rps.contains(rp_id.as_str()) {
                        return bad("rp", rp_id);
                    }
                }
                Step::Poll { .. } if self.mdm.is_none() => {
                    return Err(ScenarioAbort::Script("poll without an mdm section".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum ScenarioAbort {
    #[error("bad scenario script: {0}")]
    Script(String),
    #[error("infrastructure failure: {0}")]
    Infra(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub index: usize,
    pub step: String,
    pub passed: bool,
    pub detail: String,
    /// Error code observed, when the step expected one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed_error: Option<String>,
    pub millis: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub passed: bool,
    pub steps: Vec<StepReport>,
    pub total_millis: u64,
}

impl ScenarioReport {
    /// Error codes that steps expected and observed.
    pub fn covered_errors(&self) -> BTreeSet<String> {
        self.steps
            .iter()
            .filter(|s| s.passed)
            .filter_map(|s| s.observed_error.clone())
            .collect()
    }
}

struct Forwarding {
    path: std::path::PathBuf,
    written: u64,
    progress: watch::Receiver<u64>,
    stop: watch::Sender<bool>,
    task: JoinHandle<RadiusForwarder>,
}

struct Runner {
    cap: TestCap,
    pki: TestPki,
    devices: HashMap<String, (ScenarioDevice, usize)>,
    agents: HashMap<String, DeviceAgent>,
    ctxc_tokens: HashMap<String, String>,
    rp_tokens: HashMap<String, String>,
    pseudo_tokens: HashMap<(String, String), String>,
    forwarders: HashMap<String, Forwarding>,
    mdm: Option<(MockMdm, String)>,
    webhooks: Option<WebhookReceiver>,
    _dir: tempfile::TempDir,
}

type StepResult = Result<(bool, String, Option<String>), ScenarioAbort>;

fn infra(e: impl std::fmt::Display) -> ScenarioAbort {
    ScenarioAbort::Infra(e.to_string())
}

fn check_expect<T>(expect: &Expect, result: Result<T, ApiFailure>, describe: impl FnOnce(&T) -> String) -> StepResult {
    match result {
        Err(ApiFailure::Transport(e)) => Err(ScenarioAbort::Infra(e)),
        Err(e) => {
            let code = e.code().to_owned();
            let passed = expect.0 == code;
            Ok((passed, format!("error {code} (expected {})", expect.0), Some(code)))
        }
        Ok(v) => Ok((expect.is_ok(), format!("ok: {} (expected {})", describe(&v), expect.0), None)),
    }
}

/// MAC address assigned to the `i`th declared device.
pub fn device_mac(i: usize) -> String {
    format!("02:00:00:00:{:02x}:{:02x}", (i >> 8) & 0xff, i & 0xff)
}

impl Runner {
    async fn setup(s: &Scenario) -> Result<Self, ScenarioAbort> {
        let specs: Vec<DeviceSpec> = s
            .devices
            .iter()
            .map(|d| DeviceSpec { name: d.name.clone(), variant: d.variant, serial: d.serial })
            .collect();
        let pki = TestPki::generate(&specs);
        let config = CapConfig {
            webhook: WebhookConfig {
                retry_delays: vec![Duration::from_millis(50), Duration::from_millis(100), Duration::from_millis(200)],
                ..WebhookConfig::default()
            },
            ..CapConfig::default()
        };
        let cap = TestCap::start(pki.trust_anchors(), ContextStore::in_memory(StoreConfig::default()), config)
            .await
            .map_err(infra)?;
        let admin = cap.admin();
        let dir = tempfile::tempdir().map_err(infra)?;

        let mut subjects: BTreeSet<String> = s.subjects.iter().cloned().collect();
        subjects.extend(s.devices.iter().map(|d| d.cap_id.clone()));
        let mut subject_tokens = HashMap::new();
        for cap_id in &subjects {
            subject_tokens.insert(cap_id.clone(), admin.add_subject(cap_id).await.map_err(infra)?);
        }
        let mut devices = HashMap::new();
        let mut agents = HashMap::new();
        for (i, d) in s.devices.iter().enumerate() {
            let device = pki.devices[i].clone();
            let cap_id = CapId::new(d.cap_id.clone()).map_err(|e| ScenarioAbort::Script(e.to_string()))?;
            agents.insert(d.name.clone(), DeviceAgent::new(cap_id, subject_tokens[&d.cap_id].clone(), device));
            devices.insert(d.name.clone(), (d.clone(), i));
        }

        let webhooks = if s.rps.iter().any(|r| r.webhook) { Some(WebhookReceiver::start().await.map_err(infra)?) } else { None };
        let mut rp_tokens = HashMap::new();
        for rp in &s.rps {
            let url = rp.webhook.then(|| webhooks.as_ref().expect("receiver started").url_for(&rp.rp_id));
            rp_tokens.insert(rp.rp_id.clone(), admin.add_rp(&rp.rp_id, url.as_deref()).await.map_err(infra)?);
        }

        let mut ctxc_tokens = HashMap::new();
        let mut forwarders = HashMap::new();
        for c in &s.ctxcs {
            let token = admin.add_ctxc(&c.name).await.map_err(infra)?;
            if c.kind == CtxCKind::Radius {
                let path = dir.path().join(format!("{}.detail", c.name));
                std::fs::File::create(&path).map_err(infra)?;
                let (ptx, prx) = watch::channel(0u64);
                let (stx, srx) = watch::channel(false);
                let fwd = RadiusForwarder::new(ForwarderConfig::new(&path, &c.name, &token), cap.client()).with_progress(ptx);
                let task = tokio::spawn(fwd.run(srx));
                forwarders.insert(c.name.clone(), Forwarding { path, written: 0, progress: prx, stop: stx, task });
            }
            ctxc_tokens.insert(c.name.clone(), token);
        }

        let mdm = match &s.mdm {
            Some(m) => {
                let token = ztf_cap::registry::generate_secret();
                let mock = MockMdm::start(token.clone(), m.page_size).await.map_err(infra)?;
                let ctxc = CtxCName::new(m.ctxc.clone()).map_err(|e| ScenarioAbort::Script(e.to_string()))?;
                let mut config = MdmConfig::new(ctxc, mock.url(), token);
                config.backoff_base_ms = 20;
                config.backoff_cap_ms = 200;
                cap.cap.add_mdm(config);
                Some((mock, m.ctxc.clone()))
            }
            None => None,
        };

        Ok(Self {
            cap,
            pki,
            devices,
            agents,
            ctxc_tokens,
            rp_tokens,
            pseudo_tokens: HashMap::new(),
            forwarders,
            mdm,
            webhooks,
            _dir: dir,
        })
    }

    fn now(&self) -> DateTime<Utc> {
        self.cap.clock.now()
    }

    fn render(&self, template: &str) -> Result<String, ScenarioAbort> {
        let mut out = String::with_capacity(template.len());
        let mut rest = template;
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| ScenarioAbort::Script("unterminated {{".into()))?;
            out.push_str(&self.expand(after[..end].trim())?);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }

    fn expand(&self, var: &str) -> Result<String, ScenarioAbort> {
        if let Some(offset) = var.strip_prefix("now") {
            let secs: i64 = if offset.is_empty() {
                0
            } else {
                offset.trim_start_matches('+').parse().map_err(|_| ScenarioAbort::Script(format!("bad offset in {var}")))?
            };
            return Ok(format_detail_timestamp(self.now() + chrono::Duration::seconds(secs)));
        }
        let (name, field) = var.split_once('.').ok_or_else(|| ScenarioAbort::Script(format!("unknown variable {var}")))?;
        let (_, idx) = self.devices.get(name).ok_or_else(|| ScenarioAbort::Script(format!("unknown device {name}")))?;
        let device = &self.pki.devices[*idx];
        Ok(match field {
            "serial" => device.serial.clone(),
            "issuer" => device.issuer.clone(),
            "issuer_oneline" => device.issuer_oneline(),
            "mac" => device_mac(*idx),
            "fingerprint" => device.fingerprint.to_string(),
            other => return Err(ScenarioAbort::Script(format!("unknown device field {other}"))),
        })
    }

    async fn step(&mut self, step: &Step) -> StepResult {
        let client = self.cap.client();
        let admin = self.cap.admin();
        match step {
            Step::IssuePseudo { cap_id, ctxc, expect } => {
                let r = admin.issue_pseudo(cap_id, ctxc).await;
                if let Ok(issued) = &r {
                    self.pseudo_tokens.insert((cap_id.clone(), ctxc.clone()), issued.token.clone());
                }
                check_expect(expect, r, |i| format!("pseudo binding {}", i.binding.key.selector()))
            }
            Step::VerifyPseudo { cap_id, ctxc, as_audience, advance_secs, expect } => {
                let token = self
                    .pseudo_tokens
                    .get(&(cap_id.clone(), ctxc.clone()))
                    .ok_or_else(|| ScenarioAbort::Script(format!("no pseudo token for {cap_id}@{ctxc}")))?;
                let keys = client.keys().await.map_err(infra)?;
                let aud = CtxCName::new(as_audience.clone().unwrap_or_else(|| ctxc.clone()))
                    .map_err(|e| ScenarioAbort::Script(e.to_string()))?;
                let at = self.now() + chrono::Duration::seconds(*advance_secs);
                let r = verify_pseudo_token(&PseudoIdToken(token.clone()), &keys, &aud, at);
                let r = r.map_err(|e| ApiFailure::Http { status: 0, code: e.code().to_owned(), message: e.to_string() });
                check_expect(expect, r, |p| format!("pseudo-id {p}"))
            }
            Step::ImportTable { csv, expect_imported, expect_rejected } => {
                let report = admin.import_table(csv).await.map_err(infra)?;
                let passed = expect_imported.is_none_or(|n| n == report.imported)
                    && expect_rejected.is_none_or(|n| n == report.rejected.len());
                Ok((passed, format!("imported {} rejected {}", report.imported, report.rejected.len()), None))
            }
            Step::RunChallenge { device, cap_id, tamper, other_device, replay, delay_secs, expect } => {
                let mut agent = self.agents[device].clone();
                if let Some(id) = cap_id {
                    let id = CapId::new(id.clone()).map_err(|e| ScenarioAbort::Script(e.to_string()))?;
                    let token = admin.add_subject(id.as_str()).await.map_err(infra)?;
                    agent = DeviceAgent::new(id, token, agent.device.clone());
                }
                let challenge = match agent.request_challenge(&client).await {
                    Ok(c) => c,
                    Err(e) => return check_expect::<()>(expect, Err(e), |_| String::new()),
                };
                if *delay_secs != 0 {
                    self.cap.clock.advance(chrono::Duration::seconds(*delay_secs));
                }
                let other = other_device.as_ref().map(|o| &self.agents[o].device);
                let sig = agent.signature_for(&challenge, *tamper, other);
                let mut r = agent.respond(&client, &challenge, &sig).await;
                if *replay {
                    r = agent.respond(&client, &challenge, &sig).await;
                }
                check_expect(expect, r, |b| format!("binding {} -> {}", b.key.selector(), b.cap_id))
            }
            Step::RevokeBinding { key, expect } => {
                let key = self.render(key)?;
                check_expect(expect, admin.revoke_binding(&key).await, |b| format!("revoked {}", b.key.selector()))
            }
            Step::GrantConsent { cap_id, rp_id, prefixes, expires_in_secs, expect } => {
                let expires = expires_in_secs.map(|s| self.now() + chrono::Duration::seconds(s));
                check_expect(expect, admin.grant_consent(cap_id, rp_id, prefixes, expires).await, |c| {
                    format!("consent {:?}", c.context_type_prefixes)
                })
            }
            Step::RevokeConsent { cap_id, rp_id, expect } => {
                check_expect(expect, admin.revoke_consent(cap_id, rp_id).await, |_| "revoked".into())
            }
            Step::EmitRadius { ctxc, text } => {
                let rendered = self.render(text)?;
                let mut rendered = rendered.replace("\r\n", "\n");
                if !rendered.ends_with("\n\n") {
                    rendered.push_str(if rendered.ends_with('\n') { "\n" } else { "\n\n" });
                }
                let fwd = self
                    .forwarders
                    .get_mut(ctxc)
                    .ok_or_else(|| ScenarioAbort::Script(format!("{ctxc} is not a radius ctxc")))?;
                let mut f = std::fs::OpenOptions::new().append(true).open(&fwd.path).map_err(infra)?;
                f.write_all(rendered.as_bytes()).map_err(infra)?;
                fwd.written += rendered.len() as u64;
                let target = fwd.written;
                let waited = tokio::time::timeout(Duration::from_secs(10), fwd.progress.wait_for(|&acked| acked >= target)).await;
                match waited {
                    Ok(Ok(_)) => Ok((true, format!("forwarded {} bytes", rendered.len()), None)),
                    _ => Err(ScenarioAbort::Infra("forwarder did not deliver within 10 s".into())),
                }
            }
            Step::EmitContext { ctxc, subject, context_type, payload, count, expect_outcome } => {
                let source = CtxCName::new(ctxc.clone()).map_err(|e| ScenarioAbort::Script(e.to_string()))?;
                let subject = self.subject_ref(&source, subject, &client).await?;
                let token = &self.ctxc_tokens[ctxc];
                let mut outcomes = BTreeMap::<String, usize>::new();
                for n in 0..count.unwrap_or(1) {
                    let mut p: Payload = payload.clone();
                    p.insert("n".into(), Scalar::Int(n as i64));
                    let now = self.now();
                    let rec = ContextRecord::new(source.clone(), subject.clone(), context_type.clone(), p, now, now)
                        .map_err(|e| ScenarioAbort::Script(e.to_string()))?;
                    let outcome = client.ingest_context(ctxc, token, &rec).await.map_err(infra)?;
                    let label = serde_json::to_value(&outcome).map_err(infra)?["outcome"].as_str().unwrap_or("").to_owned();
                    *outcomes.entry(label).or_default() += 1;
                }
                let passed = expect_outcome.as_ref().is_none_or(|o| outcomes.keys().all(|k| k == o));
                Ok((passed, format!("outcomes {outcomes:?}"), None))
            }
            Step::SetMdmDevice { device, cert_format, os_version, compliance_state, lost_mode_state, jail_broken } => {
                let (mock, _) = self.mdm.as_ref().expect("validated");
                let (_, idx) = self.devices[device];
                let d = &self.pki.devices[idx];
                let certificate = match cert_format {
                    CertFormat::Der => MdmCertificate::from_der(&d.cert_der),
                    CertFormat::IssuerSerial => MdmCertificate::IssuerSerial { issuer: d.issuer.clone(), serial: d.serial.clone() },
                };
                mock.set_device(&MockDevice {
                    id: format!("mdm-{device}"),
                    os_version: os_version.clone(),
                    compliance_state: compliance_state.clone(),
                    lost_mode_state: lost_mode_state.clone(),
                    jail_broken: jail_broken.clone(),
                    certificate,
                });
                Ok((true, format!("mdm record for {device}"), None))
            }
            Step::Poll { expect_devices } => {
                let reports = admin.poll_mdm().await.map_err(infra)?;
                let devices = reports[0]["devices"].as_u64().unwrap_or(0) as usize;
                let passed = expect_devices.is_none_or(|n| n == devices);
                Ok((passed, format!("polled {devices} devices: {}", reports[0]["ingest"]), None))
            }
            Step::RpQuery { rp_id, cap_id, types, expect } => {
                let token = &self.rp_tokens[rp_id];
                let r = client.rp_contexts(token, cap_id, types.as_deref(), None, None).await;
                evaluate_query(expect, r)
            }
            Step::ExpectWebhooks { rp_id, count, within_ms } => {
                let rx = self.webhooks.as_ref().ok_or_else(|| ScenarioAbort::Script("no webhook RP declared".into()))?;
                let deadline = Instant::now() + Duration::from_millis(*within_ms);
                loop {
                    let events = rx.events(rp_id);
                    let mut seqs: Vec<u64> = events.iter().map(|e| e.sequence).collect();
                    let monotone = seqs.windows(2).all(|w| w[0] < w[1]);
                    seqs.dedup();
                    if events.len() >= *count || Instant::now() >= deadline {
                        // Give stragglers a moment so over-delivery is caught too.
                        tokio::time::sleep(Duration::from_millis(100)).await;
                        let n = rx.events(rp_id).len();
                        let passed = n == *count && monotone;
                        return Ok((passed, format!("{n} webhook events (expected {count}), monotone={monotone}"), None));
                    }
                    tokio::time::sleep(Duration::from_millis(20)).await;
                }
            }
            Step::Sleep { millis } => {
                tokio::time::sleep(Duration::from_millis(*millis)).await;
                Ok((true, format!("slept {millis} ms"), None))
            }
        }
    }

    async fn subject_ref(
        &self,
        source: &CtxCName,
        spec: &SubjectSpec,
        client: &crate::client::CapClient,
    ) -> Result<CtxCSubjectRef, ScenarioAbort> {
        Ok(match spec {
            SubjectSpec::Local { local_id } => {
                CtxCSubjectRef::local(source.clone(), local_id.clone()).map_err(|e| ScenarioAbort::Script(e.to_string()))?
            }
            SubjectSpec::Device { device } => {
                let (_, idx) = self.devices[device];
                let d = &self.pki.devices[idx];
                CtxCSubjectRef::CertRef {
                    cert: ztf_cap::model::CertificateRef::full(d.cert_der.clone()).map_err(infra)?,
                }
            }
            SubjectSpec::Pseudo { cap_id } => {
                let token = self
                    .pseudo_tokens
                    .get(&(cap_id.clone(), source.to_string()))
                    .ok_or_else(|| ScenarioAbort::Script(format!("no pseudo token for {cap_id}@{source}")))?;
                let keys = client.keys().await.map_err(infra)?;
                let pseudo_id: PseudoId = verify_pseudo_token(&PseudoIdToken(token.clone()), &keys, source, self.now())
                    .map_err(|e| ScenarioAbort::Script(format!("stored pseudo token invalid: {e}")))?;
                CtxCSubjectRef::PseudoId { pseudo_id }
            }
        })
    }

    async fn shutdown(self) {
        for (_, f) in self.forwarders {
            let _ = f.stop.send(true);
            let _ = f.task.await;
        }
        self.cap.server.stop().await;
    }
}

fn evaluate_query(expect: &QueryExpect, r: Result<ztf_cap::provider::RpContextResponse, ApiFailure>) -> StepResult {
    let resp = match (r, &expect.error) {
        (Err(ApiFailure::Transport(e)), _) => return Err(ScenarioAbort::Infra(e)),
        (Err(e), Some(want)) => {
            let code = e.code().to_owned();
            return Ok((&code == want, format!("error {code} (expected {want})"), Some(code)));
        }
        (Err(e), None) => return Ok((false, format!("unexpected error {e}"), None)),
        (Ok(_), Some(want)) => return Ok((false, format!("succeeded, expected {want}"), None)),
        (Ok(resp), None) => resp,
    };
    let mut failures = Vec::new();
    let conn = resp.derived.connectivity;
    if let Some(want) = expect.connected {
        if conn.map(|c| c.connected) != Some(want) {
            failures.push(format!("connected {:?} != {want}", conn.map(|c| c.connected)));
        }
    }
    if let Some(want) = expect.total_input {
        if conn.map(|c| c.total_input) != Some(want) {
            failures.push(format!("total_input {:?} != {want}", conn.map(|c| c.total_input)));
        }
    }
    if let Some(want) = expect.total_output {
        if conn.map(|c| c.total_output) != Some(want) {
            failures.push(format!("total_output {:?} != {want}", conn.map(|c| c.total_output)));
        }
    }
    if expect.connectivity_absent == Some(true) && conn.is_some() {
        failures.push("connectivity present".into());
    }
    if let Some(want) = &expect.posture {
        let got = resp.derived.posture.as_ref().map(|p| p.level.as_str()).unwrap_or("absent");
        if got != want {
            failures.push(format!("posture {got} != {want}"));
        }
    }
    if let Some(prefixes) = &expect.only_types {
        if let Some(c) = resp.contexts.iter().find(|c| !prefixes.iter().any(|p| c.record.context_type().starts_with(p.as_str()))) {
            failures.push(format!("unexpected type {}", c.record.context_type()));
        }
    }
    if expect.min_contexts.is_some_and(|n| resp.contexts.len() < n) || expect.max_contexts.is_some_and(|n| resp.contexts.len() > n) {
        failures.push(format!("{} contexts outside [{:?}, {:?}]", resp.contexts.len(), expect.min_contexts, expect.max_contexts));
    }
    if let Some((key, want)) = &expect.payload_sequence {
        let got: Vec<Value> = resp
            .contexts
            .iter()
            .filter_map(|c| c.record.payload().get(key))
            .map(|v| serde_json::to_value(v).unwrap_or(Value::Null))
            .collect();
        if &got != want {
            failures.push(format!("payload {key} sequence {got:?} != {want:?}"));
        }
    }
    let detail = format!(
        "{} contexts; connectivity {:?}; posture {:?}",
        resp.contexts.len(),
        conn,
        resp.derived.posture.as_ref().map(|p| p.level)
    );
    if failures.is_empty() {
        Ok((true, detail, None))
    } else {
        Ok((false, format!("{detail}; {}", failures.join("; ")), None))
    }
}

pub async fn run_scenario(s: &Scenario) -> Result<ScenarioReport, ScenarioAbort> {
    s.validate()?;
    let started = Instant::now();
    let mut runner = Runner::setup(s).await?;
    let mut steps = Vec::with_capacity(s.steps.len());
    let mut outcome = Ok(());
    for (index, step) in s.steps.iter().enumerate() {
        let t = Instant::now();
        match runner.step(step).await {
            Ok((passed, detail, observed_error)) => steps.push(StepReport {
                index,
                step: step.kind().into(),
                passed,
                detail,
                observed_error,
                millis: t.elapsed().as_millis() as u64,
            }),
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }
    runner.shutdown().await;
    outcome?;
    Ok(ScenarioReport {
        name: s.name.clone(),
        passed: steps.iter().all(|r| r.passed),
        steps,
        total_millis: started.elapsed().as_millis() as u64,
    })
}

/// Shared handle so several scenario runs can reuse one tokio runtime.
pub type SharedScenario = Arc<Scenario>;
