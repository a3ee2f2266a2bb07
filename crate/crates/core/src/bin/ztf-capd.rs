use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use serde::Deserialize;
use tracing_subscriber::EnvFilter;

use ztf_cap::api::{router, AppState};
use ztf_cap::linking::{LinkerConfig, SigningMaterial};
use ztf_cap::mdm::MdmConfig;
use ztf_cap::model::{certificates_from_pem, CapId, CtxCName};
use ztf_cap::pki::TrustAnchors;
use ztf_cap::service::{Cap, CapConfig};
use ztf_cap::store::{ContextStore, StoreConfig};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error + Send + Sync>>;

/// Context Attribute Provider daemon.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    #[arg(long, env = "ZTF_ADMIN_TOKEN", hide_env_values = true)]
    admin_token: String,
    /// Holds the context log and the signing key; in-memory if omitted.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// PEM file with one or more trust-anchor certificates.
    #[arg(long = "trust-anchor")]
    trust_anchors: Vec<PathBuf>,
    /// JSON file pre-registering CtxCs, RPs, subjects and MDM endpoints.
    #[arg(long)]
    bootstrap: Option<PathBuf>,
    #[arg(long, default_value_t = 3600)]
    sweep_interval_secs: u64,
    #[arg(long, default_value_t = 900)]
    stale_after_secs: i64,
    #[arg(long, default_value = "ztf-cap")]
    issuer: String,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Bootstrap {
    #[serde(default)]
    ctxcs: Vec<NamedToken>,
    #[serde(default)]
    subjects: Vec<SubjectEntry>,
    #[serde(default)]
    rps: Vec<RpEntry>,
    #[serde(default)]
    mdm: Vec<MdmConfig>,
}

#[derive(Deserialize)]
struct NamedToken {
    name: String,
    token: String,
}

#[derive(Deserialize)]
struct SubjectEntry {
    cap_id: String,
    token: String,
}

#[derive(Deserialize)]
struct RpEntry {
    rp_id: String,
    token: String,
    webhook_url: Option<String>,
}

fn load_signing_material(data_dir: Option<&PathBuf>) -> Result<SigningMaterial> {
    let Some(dir) = data_dir else { return Ok(SigningMaterial::generate()) };
    let path = dir.join("signing.json");
    if path.exists() {
        return Ok(serde_json::from_slice(&std::fs::read(&path)?)?);
    }
    let material = SigningMaterial::generate();
    std::fs::write(&path, serde_json::to_vec(&material)?)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o600))?;
    }
    tracing::info!(path = %path.display(), "generated signing key");
    Ok(material)
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();

    if let Some(dir) = &args.data_dir {
        std::fs::create_dir_all(dir)?;
    }
    let material = load_signing_material(args.data_dir.as_ref())?;
    let mut trust = TrustAnchors::new();
    for path in &args.trust_anchors {
        for der in certificates_from_pem(&std::fs::read(path)?)? {
            trust.add_der(der)?;
        }
    }
    let store_config = StoreConfig { stale_after: chrono::Duration::seconds(args.stale_after_secs), ..StoreConfig::default() };
    let store = match &args.data_dir {
        Some(dir) => ContextStore::open(dir.join("contexts.log"), store_config)?,
        None => ContextStore::in_memory(store_config),
    };
    let config = CapConfig {
        linker: LinkerConfig { issuer: args.issuer.clone(), ..LinkerConfig::default() },
        store: store_config,
        ..CapConfig::default()
    };
    let cap = Arc::new(Cap::new(&material, trust, store, config)?);

    if let Some(path) = &args.bootstrap {
        let boot: Bootstrap = serde_json::from_slice(&std::fs::read(path)?)?;
        for c in boot.ctxcs {
            cap.directory.register_ctxc_with_token(CtxCName::new(c.name)?, &c.token);
        }
        for s in boot.subjects {
            cap.directory.register_subject_with_token(CapId::new(s.cap_id)?, &s.token);
        }
        for rp in boot.rps {
            cap.provider.register_rp_with_token(&rp.rp_id, rp.webhook_url, &rp.token)?;
        }
        for m in boot.mdm {
            cap.add_mdm(m);
        }
    }

    for mdm in cap.mdm_configs() {
        let cap = cap.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(mdm.poll_interval_secs.max(1)));
            loop {
                tick.tick().await;
                match cap.poll_mdm(&mdm).await {
                    Ok(r) => tracing::info!(mdm = %r.ctxc, devices = r.devices, stored = r.ingest.stored, "MDM poll"),
                    Err(e) => tracing::error!(mdm = %mdm.ctxc, error = %e, "MDM poll failed"),
                }
            }
        });
    }
    {
        let cap = cap.clone();
        let every = Duration::from_secs(args.sweep_interval_secs.max(1));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            tick.tick().await;
            loop {
                tick.tick().await;
                if let Err(e) = cap.sweep(chrono::Utc::now()) {
                    tracing::error!(error = %e, "retention sweep failed");
                }
            }
        });
    }

    let listener = tokio::net::TcpListener::bind(args.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(AppState::new(cap, &args.admin_token)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
