use std::collections::BTreeSet;
use std::path::Path;

use ztf_harness::scenario::{run_scenario, Scenario, ScenarioAbort};

fn scenario_files() -> Vec<std::path::PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bundled_scenarios_pass_and_cover_the_linking_failures() {
    let mut covered = BTreeSet::new();
    for path in scenario_files() {
        let s = Scenario::load(&path).unwrap();
        let report = run_scenario(&s).await.unwrap();
        for step in &report.steps {
            assert!(step.passed, "{}: step {} ({}) failed: {}", report.name, step.index, step.step, step.detail);
        }
        covered.extend(report.covered_errors());
    }
    for code in [
        "BadPopSignature",
        "UntrustedChain",
        "CertificateExpired",
        "ChallengeExpired",
        "ChallengeReplayed",
        "BindingConflict",
        "WrongAudience",
        "Expired",
        "ConsentDenied",
        "NoSuchConsent",
    ] {
        assert!(covered.contains(code), "no scenario exercises {code}; covered {covered:?}");
    }
}

#[tokio::test]
async fn a_wrong_expectation_is_reported_not_hidden() {
    let s = Scenario::from_json(
        r#"{ "name": "x", "devices": [{ "name": "d", "cap_id": "a", "variant": "wrong_ca" }],
             "steps": [{ "step": "run_challenge", "device": "d" }] }"#,
    )
    .unwrap();
    let report = run_scenario(&s).await.unwrap();
    assert!(!report.passed);
    assert!(report.steps[0].detail.contains("UntrustedChain"));
}

#[test]
fn undeclared_names_are_script_errors() {
    let err = Scenario::from_json(r#"{ "name": "x", "steps": [{ "step": "run_challenge", "device": "ghost" }] }"#).unwrap_err();
    assert!(matches!(err, ScenarioAbort::Script(m) if m.contains("ghost")));
    let err = Scenario::from_json(r#"{ "name": "x", "steps": [{ "step": "poll" }] }"#).unwrap_err();
    assert!(matches!(err, ScenarioAbort::Script(_)));
}

#[test]
fn unknown_fields_are_rejected() {
    assert!(Scenario::from_json(r#"{ "name": "x", "stepz": [] , "steps": [] }"#).is_err());
}
