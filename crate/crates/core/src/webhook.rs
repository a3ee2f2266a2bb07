//! Asynchronous webhook push to Relying Parties.
//!
//! Each RP has a bounded FIFO drained by one worker task, so deliveries to
//! an RP stay in sequence order. The head event is retried until it is
//! delivered or its retry schedule is exhausted; a full queue drops its
//! oldest event.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::model::{CapId, Payload};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebhookEvent {
    pub cap_id: CapId,
    pub context_type: String,
    pub payload: Payload,
    pub sequence: u64,
    pub observed_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct WebhookConfig {
    /// Delays before each retry; the number of retries is its length.
    pub retry_delays: Vec<Duration>,
    pub queue_capacity: usize,
    pub request_timeout: Duration,
}

impl Default for WebhookConfig {
    fn default() -> Self {
        Self {
            retry_delays: vec![Duration::from_secs(1), Duration::from_secs(5), Duration::from_secs(25)],
            queue_capacity: 1024,
            request_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryStats {
    pub delivered: u64,
    pub attempts: u64,
    pub failed: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone)]
struct Queued {
    url: String,
    event: WebhookEvent,
}

#[derive(Debug, Default)]
struct RpQueue {
    items: VecDeque<Queued>,
    in_flight: bool,
    worker: bool,
    stats: DeliveryStats,
}

#[derive(Debug)]
struct Shared {
    queues: Mutex<HashMap<String, RpQueue>>,
    notify: Mutex<HashMap<String, Arc<Notify>>>,
    idle: Notify,
    client: reqwest::Client,
    config: WebhookConfig,
}

#[derive(Debug, Clone)]
pub struct WebhookDispatcher {
    shared: Arc<Shared>,
}

impl WebhookDispatcher {
    pub fn new(config: WebhookConfig) -> Self {
        let client = reqwest::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .expect("HTTP client builds");
        Self {
            shared: Arc::new(Shared {
                queues: Mutex::new(HashMap::new()),
                notify: Mutex::new(HashMap::new()),
                idle: Notify::new(),
                client,
                config,
            }),
        }
    }

    /// Queues an event without blocking. Workers need a tokio runtime; if
    /// none is running the event waits until one enqueues from inside one.
    pub fn enqueue(&self, rp_id: &str, url: &str, event: WebhookEvent) {
        let spawn = {
            let mut queues = self.shared.queues.lock().unwrap();
            let q = queues.entry(rp_id.to_owned()).or_default();
            if q.items.len() >= self.shared.config.queue_capacity.max(1) {
                let dropped = q.items.pop_front();
                q.stats.dropped += 1;
                tracing::warn!(rp_id, sequence = dropped.map(|d| d.event.sequence), "webhook queue full, dropped oldest event");
            }
            q.items.push_back(Queued { url: url.to_owned(), event });
            let spawn = !q.worker && tokio::runtime::Handle::try_current().is_ok();
            if spawn {
                q.worker = true;
            }
            spawn
        };
        let notify = self.notifier(rp_id);
        if spawn {
            let shared = self.shared.clone();
            let rp = rp_id.to_owned();
            tokio::spawn(worker(shared, rp, notify.clone()));
        }
        notify.notify_one();
    }

    fn notifier(&self, rp_id: &str) -> Arc<Notify> {
        self.shared.notify.lock().unwrap().entry(rp_id.to_owned()).or_default().clone()
    }

    pub fn stats(&self, rp_id: &str) -> DeliveryStats {
        self.shared.queues.lock().unwrap().get(rp_id).map(|q| q.stats).unwrap_or_default()
    }

    pub fn queued(&self) -> usize {
        self.shared.queues.lock().unwrap().values().map(|q| q.items.len()).sum()
    }

    fn is_idle(&self) -> bool {
        self.shared.queues.lock().unwrap().values().all(|q| q.items.is_empty() && !q.in_flight)
    }

    /// Waits until every queue is drained; `false` on timeout.
    pub async fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notified = self.shared.idle.notified();
            if self.is_idle() {
                return true;
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return self.is_idle();
            }
        }
    }
}

async fn worker(shared: Arc<Shared>, rp_id: String, notify: Arc<Notify>) {
    loop {
        let head = {
            let mut queues = shared.queues.lock().unwrap();
            let q = queues.get_mut(&rp_id).expect("queue exists for worker");
            let head = q.items.front().cloned();
            q.in_flight = head.is_some();
            head
        };
        let Some(head) = head else {
            shared.idle.notify_waiters();
            notify.notified().await;
            continue;
        };
        let delivered = deliver(&shared, &rp_id, &head).await;
        let mut queues = shared.queues.lock().unwrap();
        let q = queues.get_mut(&rp_id).expect("queue exists for worker");
        if q.items.front().is_some_and(|f| f.event.sequence == head.event.sequence) {
            q.items.pop_front();
        }
        q.in_flight = false;
        if delivered {
            q.stats.delivered += 1;
        } else {
            q.stats.failed += 1;
        }
        if q.items.is_empty() {
            shared.idle.notify_waiters();
        }
    }
}

async fn deliver(shared: &Shared, rp_id: &str, item: &Queued) -> bool {
    let delays = &shared.config.retry_delays;
    for attempt in 0..=delays.len() {
        if attempt > 0 {
            tokio::time::sleep(delays[attempt - 1]).await;
        }
        if let Some(q) = shared.queues.lock().unwrap().get_mut(rp_id) {
            q.stats.attempts += 1;
        }
        match shared.client.post(&item.url).json(&item.event).send().await {
            Ok(resp) if resp.status().is_success() => return true,
            Ok(resp) => {
                tracing::warn!(rp_id, sequence = item.event.sequence, attempt, status = %resp.status(), "webhook rejected");
            }
            Err(e) => {
                tracing::warn!(rp_id, sequence = item.event.sequence, attempt, error = %e, "webhook delivery failed");
            }
        }
    }
    tracing::error!(rp_id, sequence = item.event.sequence, "webhook delivery abandoned");
    false
}
