use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use chrono::Utc;

use ztf_cap::model::{CapId, Payload};
use ztf_cap::webhook::{WebhookConfig, WebhookDispatcher, WebhookEvent};

#[derive(Default)]
struct Rx {
    got: Mutex<Vec<u64>>,
    fail_next: AtomicU32,
    always_fail: bool,
}

async fn hook(State(rx): State<Arc<Rx>>, Json(ev): Json<WebhookEvent>) -> StatusCode {
    if rx.always_fail || rx.fail_next.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok() {
        return StatusCode::SERVICE_UNAVAILABLE;
    }
    rx.got.lock().unwrap().push(ev.sequence);
    StatusCode::OK
}

async fn receiver(rx: Arc<Rx>) -> String {
    let app = Router::new().route("/hook", post(hook)).with_state(rx);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/hook")
}

fn event(sequence: u64) -> WebhookEvent {
    WebhookEvent {
        cap_id: CapId::new("alice").unwrap(),
        context_type: "radius.traffic".into(),
        payload: Payload::new(),
        sequence,
        observed_at: Utc::now(),
    }
}

fn fast(capacity: usize) -> WebhookConfig {
    WebhookConfig {
        retry_delays: vec![Duration::from_millis(5), Duration::from_millis(10), Duration::from_millis(20)],
        queue_capacity: capacity,
        request_timeout: Duration::from_secs(2),
    }
}

#[tokio::test]
async fn deliveries_keep_order_through_retries() {
    let rx = Arc::new(Rx::default());
    rx.fail_next.store(2, Ordering::SeqCst);
    let url = receiver(rx.clone()).await;
    let d = WebhookDispatcher::new(fast(1024));
    for seq in 1..=50 {
        d.enqueue("rp", &url, event(seq));
    }
    assert!(d.wait_idle(Duration::from_secs(10)).await);
    assert_eq!(*rx.got.lock().unwrap(), (1..=50).collect::<Vec<_>>());
    let stats = d.stats("rp");
    assert_eq!((stats.delivered, stats.attempts, stats.failed), (50, 52, 0));
}

#[tokio::test]
async fn exhausted_retries_move_on_to_the_next_event() {
    let rx = Arc::new(Rx { always_fail: true, ..Rx::default() });
    let url = receiver(rx).await;
    let d = WebhookDispatcher::new(fast(1024));
    d.enqueue("rp", &url, event(1));
    d.enqueue("rp", &url, event(2));
    assert!(d.wait_idle(Duration::from_secs(10)).await);
    let stats = d.stats("rp");
    // One initial attempt plus one per configured delay, per event.
    assert_eq!((stats.delivered, stats.attempts, stats.failed), (0, 8, 2));
}

#[test]
fn full_queue_drops_oldest() {
    let d = WebhookDispatcher::new(fast(3));
    let rt = tokio::runtime::Runtime::new().unwrap();
    let rx = Arc::new(Rx::default());
    let url = rt.block_on(receiver(rx.clone()));
    // Outside a runtime nothing drains, so the queue fills up.
    for seq in 1..=10 {
        d.enqueue("rp", &url, event(seq));
    }
    assert_eq!(d.queued(), 3);
    assert_eq!(d.stats("rp").dropped, 7);
    rt.block_on(async {
        d.enqueue("rp", &url, event(11));
        assert!(d.wait_idle(Duration::from_secs(10)).await);
    });
    assert_eq!(*rx.got.lock().unwrap(), vec![9, 10, 11]);
}
