//! Tails a FreeRADIUS detail file and forwards complete records to the CAP.
//!
//! A record is complete once the blank line that ends it has been written;
//! a partial trailing record stays buffered. A batch stays at the head of
//! the buffer until the CAP acknowledges it, so delivery is at-least-once.

use std::path::PathBuf;
use std::time::Duration;

use tokio::io::{AsyncReadExt, AsyncSeekExt};
use tokio::sync::watch;

use ztf_cap::service::IngestReport;

use crate::client::{ApiFailure, CapClient};

/// Length of the longest prefix of `buf` that ends with a blank line.
pub fn complete_prefix(buf: &[u8]) -> usize {
    let mut end = 0;
    let mut line_start = 0;
    let mut seen_content = false;
    for (i, &b) in buf.iter().enumerate() {
        if b == b'\n' {
            let line = &buf[line_start..i];
            if line.iter().all(|c| c.is_ascii_whitespace()) {
                if seen_content {
                    end = i + 1;
                    seen_content = false;
                }
            } else {
                seen_content = true;
            }
            line_start = i + 1;
        }
    }
    end
}

#[derive(Debug, Clone)]
pub struct ForwarderConfig {
    pub path: PathBuf,
    pub ctxc: String,
    pub token: String,
    pub poll_interval: Duration,
    pub retry_base: Duration,
    pub retry_cap: Duration,
}

impl ForwarderConfig {
    pub fn new(path: impl Into<PathBuf>, ctxc: impl Into<String>, token: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            ctxc: ctxc.into(),
            token: token.into(),
            poll_interval: Duration::from_millis(50),
            retry_base: Duration::from_millis(50),
            retry_cap: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ForwardError {
    #[error("reading detail file: {0}")]
    Io(#[from] std::io::Error),
    #[error("delivery failed: {0}")]
    Delivery(ApiFailure),
}

pub struct RadiusForwarder {
    config: ForwarderConfig,
    client: CapClient,
    offset: u64,
    buffer: Vec<u8>,
    progress: Option<watch::Sender<u64>>,
    pub batches_sent: usize,
    pub failures: usize,
}

impl RadiusForwarder {
    pub fn new(config: ForwarderConfig, client: CapClient) -> Self {
        Self { config, client, offset: 0, buffer: Vec::new(), progress: None, batches_sent: 0, failures: 0 }
    }

    /// Publishes the file offset up to which the CAP has acknowledged data.
    pub fn with_progress(mut self, tx: watch::Sender<u64>) -> Self {
        self.progress = Some(tx);
        self
    }

    async fn read_new(&mut self) -> std::io::Result<()> {
        let mut file = match tokio::fs::File::open(&self.config.path).await {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e),
        };
        let len = file.metadata().await?.len();
        if len < self.offset {
            tracing::warn!(path = %self.config.path.display(), "detail file shrank, restarting from the top");
            self.offset = 0;
        }
        file.seek(std::io::SeekFrom::Start(self.offset)).await?;
        let mut fresh = Vec::new();
        file.read_to_end(&mut fresh).await?;
        self.offset += fresh.len() as u64;
        self.buffer.extend_from_slice(&fresh);
        Ok(())
    }

    /// Bytes read but not yet acknowledged, including any partial record.
    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Reads appended data and sends one batch if a complete record exists.
    pub async fn step(&mut self) -> Result<Option<IngestReport>, ForwardError> {
        self.read_new().await?;
        let n = complete_prefix(&self.buffer);
        if n == 0 {
            return Ok(None);
        }
        let batch = self.buffer[..n].to_vec();
        match self.client.ingest_radius(&self.config.ctxc, &self.config.token, batch).await {
            Ok(report) => {
                self.buffer.drain(..n);
                self.batches_sent += 1;
                if let Some(tx) = &self.progress {
                    let _ = tx.send(self.offset - self.buffer.len() as u64);
                }
                Ok(Some(report))
            }
            Err(e) => {
                self.failures += 1;
                Err(ForwardError::Delivery(e))
            }
        }
    }

    /// Forwards until `stop` becomes true and nothing complete is left.
    pub async fn run(mut self, mut stop: watch::Receiver<bool>) -> Self {
        let mut backoff = self.config.retry_base;
        loop {
            match self.step().await {
                Ok(Some(_)) => {
                    backoff = self.config.retry_base;
                    continue;
                }
                Ok(None) => {
                    backoff = self.config.retry_base;
                    if *stop.borrow() {
                        return self;
                    }
                    tokio::select! {
                        _ = tokio::time::sleep(self.config.poll_interval) => {}
                        _ = stop.changed() => {}
                    }
                }
                Err(e) => {
                    tracing::warn!(error = %e, ?backoff, "forwarder retrying");
                    tokio::time::sleep(backoff).await;
                    backoff = (backoff * 2).min(self.config.retry_cap);
                }
            }
        }
    }
}
