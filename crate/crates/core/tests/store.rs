use std::collections::HashMap;

use chrono::{DateTime, Duration, TimeZone, Utc};
use proptest::prelude::*;

use ztf_cap::model::{CapId, CtxCName};
use ztf_cap::radius::{format_detail_timestamp, RadiusIngestor};
use ztf_cap::store::{derive_state, ContextStore, IngestOutcome, StoreConfig};

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 4, 10, 0, 0).unwrap()
}

#[derive(Debug, Clone)]
struct Acct {
    at: i64,
    status: &'static str,
    session: u8,
    input: u64,
    output: u64,
}

fn acct() -> impl Strategy<Value = Acct> {
    (0i64..600, prop::sample::select(vec!["Start", "Interim-Update", "Stop"]), 0u8..4, 0u64..1_000_000, 0u64..1_000_000)
        .prop_map(|(at, status, session, input, output)| Acct { at, status, session, input, output })
}

fn render(records: &[Acct]) -> String {
    records
        .iter()
        .map(|r| {
            format!(
                "{}\n\tAcct-Status-Type = {}\n\tAcct-Session-Id = \"s{}\"\n\tAcct-Input-Octets = {}\n\tAcct-Output-Octets = {}\n\tCalling-Station-Id = \"02:00:00:00:00:01\"\n\n",
                format_detail_timestamp(t0() + Duration::seconds(r.at)),
                r.status,
                r.session,
                r.input,
                r.output
            )
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn derived_state_survives_replay_and_matches_raw_maxima(records in prop::collection::vec(acct(), 1..40), split in 0usize..40) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("contexts.log");
        let cap = CapId::new("alice").unwrap();
        let wifi = CtxCName::new("wifi").unwrap();
        let now = t0() + Duration::seconds(700);
        let ingestor = RadiusIngestor::new();
        let store = ContextStore::open(&path, StoreConfig::default()).unwrap();
        let split = split.min(records.len());
        let mut last_sequence: Option<u64> = None;
        for chunk in [&records[..split], &records[split..]] {
            for ctx in ingestor.ingest(&wifi, render(chunk).as_bytes(), now).contexts {
                let (outcome, _) = store.ingest(ctx, |_, _| Some(cap.clone()), now).unwrap();
                if let IngestOutcome::Stored { sequence, .. } = outcome {
                    prop_assert!(last_sequence.is_none_or(|l| sequence > l));
                    last_sequence = Some(sequence);
                }
            }
        }
        let live = store.derived_state(&cap, now);

        // Oracle: per-session maxima of the raw counters.
        let mut maxima: HashMap<u8, (u64, u64)> = HashMap::new();
        for r in &records {
            let m = maxima.entry(r.session).or_default();
            *m = (m.0.max(r.input), m.1.max(r.output));
        }
        prop_assert_eq!(live.connectivity.total_input, maxima.values().map(|m| m.0).sum::<u64>());
        prop_assert_eq!(live.connectivity.total_output, maxima.values().map(|m| m.1).sum::<u64>());

        let recomputed = derive_state(&cap, &store.all_stored(), now, StoreConfig::default().stale_after);
        prop_assert_eq!(&recomputed, &live);
        drop(store);
        let reopened = ContextStore::open(&path, StoreConfig::default()).unwrap();
        prop_assert_eq!(reopened.derived_state(&cap, now), live);
    }
}

#[test]
fn pending_and_evictions_survive_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("contexts.log");
    let cfg = StoreConfig { pending_ttl: Duration::hours(1), ..StoreConfig::default() };
    let hr = CtxCName::new("hr").unwrap();
    let record = |n: i64, at: DateTime<Utc>| {
        let mut p = ztf_cap::model::Payload::new();
        p.insert("n".into(), n.into());
        let subject = ztf_cap::model::CtxCSubjectRef::local(hr.clone(), "emp-1").unwrap();
        ztf_cap::model::ContextRecord::new(hr.clone(), subject, "hr.status", p, at, at).unwrap()
    };
    let store = ContextStore::open(&path, cfg).unwrap();
    store.ingest(record(1, t0()), |_, _| None, t0()).unwrap();
    store.ingest(record(2, t0() + Duration::hours(2)), |_, _| None, t0() + Duration::hours(2)).unwrap();
    let report = store.retention_sweep(t0() + Duration::hours(2)).unwrap();
    assert_eq!(report.pending_evicted, 1);
    drop(store);

    let store = ContextStore::open(&path, cfg).unwrap();
    assert_eq!(store.pending_len(), 1);
    assert_eq!(store.evictions().len(), 1);
    let cap = CapId::new("carol").unwrap();
    let flushed = store.flush_pending(&cap, |_, _| Some(cap.clone()), t0() + Duration::hours(2)).unwrap();
    assert_eq!(flushed.len(), 1);
    assert_eq!(flushed[0].record.payload()["n"], 2.into());
    // A duplicate of the flushed record is recognised after another reopen.
    drop(store);
    let store = ContextStore::open(&path, StoreConfig::default()).unwrap();
    let (outcome, _) = store.ingest(record(2, t0() + Duration::hours(2)), |_, _| Some(cap.clone()), t0() + Duration::hours(3)).unwrap();
    assert!(matches!(outcome, IngestOutcome::Duplicate { .. }), "{outcome:?}");
}
