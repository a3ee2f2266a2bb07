//! `ztf-admin`: operator commands against a running CAP's admin API.
//!
//! Exit codes: 0 success, 1 the CAP rejected the request (or a table import
//! rejected rows), 2 usage, transport, authentication or server failure.

mod client;
pub mod views;

use std::io::{Read, Write};
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use client::Api;
use views::*;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_TRANSPORT: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("{code}: {message}")]
    Auth { code: String, message: String },
    #[error("{code}: {message}")]
    Server { code: String, message: String },
    #[error("{code}: {message}")]
    Domain { code: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Domain { .. } => EXIT_DOMAIN,
            _ => EXIT_TRANSPORT,
        }
    }

    fn code(&self) -> &str {
        match self {
            CliError::Usage(_) => "Usage",
            CliError::Transport(_) => "Transport",
            CliError::Auth { code, .. } | CliError::Server { code, .. } | CliError::Domain { code, .. } => code,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Table,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "ztf-admin", version, about = "Administer a ztf-cap deployment")]
pub struct Cli {
    /// Base URL of the CAP.
    #[arg(long, env = "ZTF_ENDPOINT", global = true, default_value = "http://127.0.0.1:8080")]
    pub endpoint: String,
    /// Admin bearer token.
    #[arg(long, env = "ZTF_ADMIN_TOKEN", global = true, hide_env_values = true)]
    pub token: Option<String>,
    #[arg(long, value_enum, global = true, default_value = "table")]
    pub output: OutputFormat,
    #[command(subcommand)]
    pub command: Noun,
}

#[derive(Debug, Subcommand)]
pub enum Noun {
    /// Administrator-maintained (ctxc_name, local_id, cap_id) table.
    #[command(subcommand)]
    Table(TableCmd),
    /// Links between CtxC-side identifiers and CAP-ids.
    #[command(subcommand)]
    Bindings(BindingsCmd),
    /// Which context types a relying party may read for a subject.
    #[command(subcommand)]
    Consent(ConsentCmd),
    /// Stored contexts and derived state.
    #[command(subcommand)]
    Contexts(ContextsCmd),
    /// Relying parties.
    #[command(subcommand)]
    Rp(RpCmd),
    /// Context collectors.
    #[command(subcommand)]
    Ctxc(CtxcCmd),
    /// Subjects and their device-agent tokens.
    #[command(subcommand)]
    Subject(SubjectCmd),
}

#[derive(Debug, Subcommand)]
pub enum TableCmd {
    /// Import a CSV file; `-` reads stdin.
    Import {
        #[arg(long)]
        file: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum BindingsCmd {
    List {
        /// Include revoked bindings.
        #[arg(long)]
        all: bool,
    },
    Revoke {
        /// `admin:<ctxc>:<local_id>`, `cert:<fingerprint>` or `pseudo:<audience>:<pseudo_id>`.
        #[arg(long)]
        key: String,
    },
}

#[derive(Debug, Args)]
pub struct Pair {
    #[arg(long)]
    pub cap_id: String,
    #[arg(long)]
    pub rp_id: String,
}

#[derive(Debug, Subcommand)]
pub enum ConsentCmd {
    Grant {
        #[command(flatten)]
        pair: Pair,
        /// Context-type prefix; repeat for several.
        #[arg(long = "prefix", required = true)]
        prefixes: Vec<String>,
        /// RFC 3339 expiry.
        #[arg(long)]
        expires_at: Option<DateTime<Utc>>,
    },
    Revoke {
        #[command(flatten)]
        pair: Pair,
    },
    List {
        #[arg(long)]
        cap_id: Option<String>,
        #[arg(long)]
        rp_id: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ContextsCmd {
    /// Derived state and the newest stored contexts of a subject.
    Show {
        #[arg(long)]
        cap_id: String,
        #[arg(long, default_value_t = 10)]
        last: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum RpCmd {
    Add {
        #[arg(long)]
        rp_id: String,
        #[arg(long)]
        webhook_url: Option<String>,
        /// Bearer token for the RP; generated when omitted.
        #[arg(long)]
        secret: Option<String>,
    },
    List,
}

#[derive(Debug, Subcommand)]
pub enum CtxcCmd {
    Add {
        #[arg(long)]
        name: String,
        /// Ingest token; generated when omitted.
        #[arg(long)]
        secret: Option<String>,
    },
    List,
}

#[derive(Debug, Subcommand)]
pub enum SubjectCmd {
    Add {
        #[arg(long)]
        cap_id: String,
        /// Device-agent token; generated when omitted.
        #[arg(long)]
        secret: Option<String>,
    },
    List,
}

/// What a command produced: a JSON document plus its table rendering.
struct Rendered {
    json: serde_json::Value,
    text: String,
    code: i32,
}

impl Rendered {
    fn new(value: &impl Serialize, text: String) -> Self {
        Self { json: serde_json::to_value(value).expect("views serialize"), text, code: EXIT_OK }
    }
}

fn list_text<T>(items: &[T], headers: &[&str], row: impl Fn(&T) -> Vec<String>, empty: &str) -> String {
    if items.is_empty() {
        format!("{empty}\n")
    } else {
        table(headers, items.iter().map(row).collect())
    }
}

fn read_table(file: &PathBuf) -> Result<String, CliError> {
    let mut text = String::new();
    let res = if file.as_os_str() == "-" {
        std::io::stdin().read_to_string(&mut text).map(|_| ())
    } else {
        std::fs::read_to_string(file).map(|t| text = t)
    };
    res.map_err(|e| CliError::Domain { code: "Io".into(), message: format!("{}: {e}", file.display()) })?;
    Ok(text)
}

fn execute(api: &Api, noun: Noun) -> Result<Rendered, CliError> {
    Ok(match noun {
        Noun::Table(TableCmd::Import { file }) => {
            let csv = read_table(&file)?;
            let report: ImportReport = api.post_text(&["admin", "table"], csv)?;
            let mut text = format!("imported: {}\n", report.imported);
            for r in &report.rejected {
                text.push_str(&format!("rejected line {}: {} ({})\n", r.line, r.reason, r.row));
            }
            let mut out = Rendered::new(&report, text);
            if !report.rejected.is_empty() {
                out.code = EXIT_DOMAIN;
            }
            out
        }
        Noun::Bindings(BindingsCmd::List { all }) => {
            let query = if all { vec![("all", "true".to_owned())] } else { vec![] };
            let wire: Vec<WireBinding> = api.get(&["admin", "bindings"], &query)?;
            let mut list: Vec<BindingView> = wire.into_iter().map(Into::into).collect();
            list.sort_by(|a, b| (a.created_at, &a.key).cmp(&(b.created_at, &b.key)));
            let text = list_text(&list, &BINDING_HEADERS, BindingView::row, "no bindings");
            Rendered::new(&list, text)
        }
        Noun::Bindings(BindingsCmd::Revoke { key }) => {
            let wire: WireBinding = api.post(&["admin", "bindings", "revoke"], &json!({ "key": key }))?;
            let b = BindingView::from(wire);
            let text = format!("revoked {} ({})\n", b.display_key(), b.cap_id);
            Rendered::new(&b, text)
        }
        Noun::Consent(ConsentCmd::Grant { pair, prefixes, expires_at }) => {
            let body = json!({
                "cap_id": pair.cap_id,
                "rp_id": pair.rp_id,
                "prefixes": prefixes,
                "expires_at": expires_at,
            });
            let wire: WireConsent = api.post(&["consents"], &body)?;
            let c = ConsentView::from(wire);
            let text = table(&CONSENT_HEADERS, vec![c.row()]);
            Rendered::new(&c, text)
        }
        Noun::Consent(ConsentCmd::Revoke { pair }) => {
            let r: ConsentRevoked = api.delete(&["consents", &pair.cap_id, &pair.rp_id])?;
            let text = format!("revoked consent {} -> {}\n", r.cap_id, r.rp_id);
            Rendered::new(&r, text)
        }
        Noun::Consent(ConsentCmd::List { cap_id, rp_id }) => {
            let wire: Vec<WireConsent> = api.get(&["consents"], &[])?;
            let mut list: Vec<ConsentView> = wire
                .into_iter()
                .map(ConsentView::from)
                .filter(|c| cap_id.as_ref().is_none_or(|id| &c.cap_id == id))
                .filter(|c| rp_id.as_ref().is_none_or(|id| &c.rp_id == id))
                .collect();
            list.sort_by(|a, b| (&a.cap_id, &a.rp_id).cmp(&(&b.cap_id, &b.rp_id)));
            let text = list_text(&list, &CONSENT_HEADERS, ConsentView::row, "no consents");
            Rendered::new(&list, text)
        }
        Noun::Contexts(ContextsCmd::Show { cap_id, last }) => {
            let wire: WireContexts = api.get(&["admin", "contexts", &cap_id], &[("last", last.to_string())])?;
            let view = ContextsView::from(wire);
            let text = view.render();
            Rendered::new(&view, text)
        }
        Noun::Rp(RpCmd::Add { rp_id, webhook_url, secret }) => {
            let body = json!({ "rp_id": rp_id, "webhook_url": webhook_url, "token": secret });
            let rp: RpView = api.post(&["admin", "rps"], &body)?;
            let text = format!("rp: {}\ntoken: {}\n", rp.rp_id, rp.token.as_deref().unwrap_or("-"));
            Rendered::new(&rp, text)
        }
        Noun::Rp(RpCmd::List) => {
            let mut list: Vec<RpView> = api.get(&["admin", "rps"], &[])?;
            list.sort_by(|a, b| a.rp_id.cmp(&b.rp_id));
            let row = |r: &RpView| vec![r.rp_id.clone(), r.webhook_url.clone().unwrap_or_else(|| "-".into())];
            let text = list_text(&list, &["RP_ID", "WEBHOOK_URL"], row, "no relying parties");
            Rendered::new(&list, text)
        }
        Noun::Ctxc(CtxcCmd::Add { name, secret }) => {
            let c: CtxcView = api.post(&["admin", "ctxcs"], &json!({ "name": name, "token": secret }))?;
            let text = format!("ctxc: {}\ntoken: {}\n", c.name, c.token.as_deref().unwrap_or("-"));
            Rendered::new(&c, text)
        }
        Noun::Ctxc(CtxcCmd::List) => {
            let names: Vec<String> = api.get(&["admin", "ctxcs"], &[])?;
            let list: Vec<CtxcView> = names.into_iter().map(|name| CtxcView { name, token: None }).collect();
            let text = list_text(&list, &["NAME"], |c| vec![c.name.clone()], "no ctxcs");
            Rendered::new(&list, text)
        }
        Noun::Subject(SubjectCmd::Add { cap_id, secret }) => {
            let s: SubjectView = api.post(&["admin", "subjects"], &json!({ "cap_id": cap_id, "token": secret }))?;
            let text = format!("subject: {}\nagent_token: {}\n", s.cap_id, s.agent_token.as_deref().unwrap_or("-"));
            Rendered::new(&s, text)
        }
        Noun::Subject(SubjectCmd::List) => {
            let ids: Vec<String> = api.get(&["admin", "subjects"], &[])?;
            let list: Vec<SubjectView> = ids.into_iter().map(|cap_id| SubjectView { cap_id, agent_token: None }).collect();
            let text = list_text(&list, &["CAP_ID"], |s| vec![s.cap_id.clone()], "no subjects");
            Rendered::new(&list, text)
        }
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_TRANSPORT } else { EXIT_OK };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let format = cli.output;
    let result = match cli.token.as_deref() {
        None => Err(CliError::Usage("no admin token: pass --token or set ZTF_ADMIN_TOKEN".into())),
        Some(token) => Api::new(&cli.endpoint, token).and_then(|api| execute(&api, cli.command)),
    };
    match result {
        Ok(r) => {
            let _ = match format {
                OutputFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(&r.json).expect("value serializes")),
                OutputFormat::Table => write!(out, "{}", r.text),
            };
            r.code
        }
        Err(e) => {
            let _ = match format {
                OutputFormat::Json => writeln!(err, "{}", json!({ "error": e.code(), "message": e.to_string() })),
                OutputFormat::Table => writeln!(err, "error: {e}"),
            };
            e.exit_code()
        }
    }
}
