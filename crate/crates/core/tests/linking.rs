use std::collections::HashMap;

use chrono::{Duration, TimeZone, Utc};
use proptest::prelude::*;

use ztf_cap::linking::BindingSelector;
use ztf_cap::model::{CapId, CtxCName, CtxCSubjectRef};
use ztf_cap::pki::TrustAnchors;
use ztf_cap::service::Cap;

#[derive(Debug, Clone)]
enum Op {
    Import { local: u8, cap: u8 },
    Revoke { local: u8 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0u8..6, 0u8..4).prop_map(|(local, cap)| Op::Import { local, cap }),
        1 => (0u8..6).prop_map(|local| Op::Revoke { local }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Table imports replace rows, revocations end them, and resolution
    /// follows the latest active row only.
    #[test]
    fn admin_bindings_follow_a_model(ops in prop::collection::vec(op(), 1..40)) {
        let cap = Cap::ephemeral(TrustAnchors::new());
        let hr = CtxCName::new("hr").unwrap();
        cap.directory.register_ctxc(hr.clone());
        for c in 0..4 {
            cap.directory.register_subject(CapId::new(format!("user-{c}")).unwrap());
        }
        let mut model: HashMap<u8, u8> = HashMap::new();
        let mut now = Utc.with_ymd_and_hms(2024, 3, 4, 10, 0, 0).unwrap();
        for op in &ops {
            now += Duration::seconds(1);
            match *op {
                Op::Import { local, cap: c } => {
                    let report = cap.import_admin_table(&format!("ctxc_name,local_id,cap_id\nhr,emp-{local},user-{c}\n"), now).unwrap();
                    prop_assert_eq!(report.imported, 1);
                    model.insert(local, c);
                }
                Op::Revoke { local } => {
                    let selector: BindingSelector = format!("admin:hr:emp-{local}").parse().unwrap();
                    let result = cap.revoke_binding(&selector, now);
                    prop_assert_eq!(result.is_ok(), model.remove(&local).is_some());
                }
            }
            for local in 0..6u8 {
                let subject = CtxCSubjectRef::local(hr.clone(), format!("emp-{local}")).unwrap();
                let got = cap.linker.resolve_subject(&hr, &subject);
                let want = model.get(&local).map(|c| CapId::new(format!("user-{c}")).unwrap());
                prop_assert_eq!(got, want);
            }
        }
        let active = cap.linker.active_bindings();
        prop_assert_eq!(active.len(), model.len());
        for b in cap.linker.bindings().iter().filter(|b| !b.is_active()) {
            // Every revoked or replaced binding key is either gone or owned by a newer active binding.
            let live = active.iter().find(|a| a.key == b.key);
            prop_assert!(live.is_none_or(|a| a.created_at >= b.created_at));
        }
    }
}

#[test]
fn local_ids_only_resolve_for_their_own_ctxc() {
    let cap = Cap::ephemeral(TrustAnchors::new());
    for name in ["hr", "edr"] {
        cap.directory.register_ctxc(CtxCName::new(name).unwrap());
    }
    cap.directory.register_subject(CapId::new("carol").unwrap());
    cap.import_admin_table("ctxc_name,local_id,cap_id\nhr,emp-1,carol\n", Utc::now()).unwrap();
    let hr = CtxCName::new("hr").unwrap();
    let edr = CtxCName::new("edr").unwrap();
    let subject = CtxCSubjectRef::local(hr.clone(), "emp-1").unwrap();
    assert_eq!(cap.linker.resolve_subject(&hr, &subject), Some(CapId::new("carol").unwrap()));
    assert_eq!(cap.linker.resolve_subject(&edr, &subject), None);
    let edr_subject = CtxCSubjectRef::local(edr.clone(), "emp-1").unwrap();
    assert_eq!(cap.linker.resolve_subject(&edr, &edr_subject), None);
}
