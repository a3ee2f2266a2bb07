//! Loopback HTTP servers on ephemeral ports.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use axum::Router;
use chrono::{DateTime, Duration, Utc};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use ztf_cap::api::{router, AppState};
use ztf_cap::linking::SigningMaterial;
use ztf_cap::pki::TrustAnchors;
use ztf_cap::registry::generate_secret;
use ztf_cap::service::{Cap, CapConfig};
use ztf_cap::store::ContextStore;

use crate::client::{AdminClient, CapClient};

/// A running server; stopped on drop.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

pub async fn spawn(router: Router) -> std::io::Result<ServerHandle> {
    spawn_on("127.0.0.1:0".parse().expect("loopback address"), router).await
}

pub async fn spawn_on(addr: SocketAddr, router: Router) -> std::io::Result<ServerHandle> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    Ok(ServerHandle { addr, shutdown: Some(tx), task: Some(task) })
}

/// Wall clock plus an adjustable offset.
#[derive(Debug, Clone, Default)]
pub struct OffsetClock(Arc<AtomicI64>);

impl OffsetClock {
    pub fn now(&self) -> DateTime<Utc> {
        Utc::now() + Duration::milliseconds(self.0.load(Ordering::SeqCst))
    }

    pub fn advance(&self, by: Duration) {
        self.0.fetch_add(by.num_milliseconds(), Ordering::SeqCst);
    }
}

/// An in-process CAP behind its HTTP API.
pub struct TestCap {
    pub cap: Arc<Cap>,
    pub admin_token: String,
    pub clock: OffsetClock,
    pub server: ServerHandle,
}

impl TestCap {
    pub async fn start(trust: TrustAnchors, store: ContextStore, config: CapConfig) -> std::io::Result<Self> {
        let cap = Cap::new(&SigningMaterial::generate(), trust, store, config)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        Self::serve(Arc::new(cap)).await
    }

    pub async fn serve(cap: Arc<Cap>) -> std::io::Result<Self> {
        let admin_token = generate_secret();
        let clock = OffsetClock::default();
        let c = clock.clone();
        let state = AppState::with_clock(cap.clone(), &admin_token, Arc::new(move || c.now()));
        let server = spawn(router(state)).await?;
        Ok(Self { cap, admin_token, clock, server })
    }

    pub fn url(&self) -> String {
        self.server.url()
    }

    pub fn client(&self) -> CapClient {
        CapClient::new(self.url())
    }

    pub fn admin(&self) -> AdminClient {
        AdminClient::new(self.url(), self.admin_token.clone())
    }
}
