use prima_core::scenarios::{builtins, run_scenario, TransportKind};

fn run_everything(kind: TransportKind) {
    let mut failures = Vec::new();
    for script in builtins() {
        let report = run_scenario(&script, kind).unwrap();
        println!("{report}");
        if !report.passed() {
            failures.push(report.to_string());
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn all_scripts_over_loopback() {
    run_everything(TransportKind::Loopback);
}

#[test]
fn all_scripts_over_http() {
    run_everything(TransportKind::Http);
}

#[test]
fn dob_assertion_catches_oversharing() {
    let mut script = prima_core::scenarios::builtin("cinema").unwrap();
    script.actors.sps[0].required.push("reveal:date_of_birth".parse().unwrap());
    if let prima_core::scenarios::Step::Login { consent, .. } = &mut script.steps[1] {
        *consent = None;
    }
    let report = run_scenario(&script, TransportKind::Loopback).unwrap();
    let why = report.failure.expect("oversharing must be caught");
    assert!(why.contains("1990-04-12"), "{why}");
}

#[test]
fn wrong_expectation_is_reported() {
    let mut script = prima_core::scenarios::builtin("tampered-attribute").unwrap();
    if let prima_core::scenarios::Step::Login { expect, .. } = &mut script.steps[1] {
        *expect = prima_core::scenarios::Expected::TokenGranted;
    }
    let report = run_scenario(&script, TransportKind::Loopback).unwrap();
    assert!(report.failure.unwrap().contains("bad-packed-signature"));
}

#[test]
fn transcript_records_both_directions_for_every_peer() {
    let report = run_scenario(&prima_core::scenarios::builtin("cinema").unwrap(), TransportKind::Loopback).unwrap();
    let paths: Vec<_> = report.transcript.iter().map(|m| (m.peer.as_str(), m.path.as_str())).collect();
    let cinema = "sp:cinema-sentinel-5a7e21c9d0";
    for expected in [
        ("idp", "/idp-key"),
        ("idp", "/register"),
        (cinema, "/request-access"),
        ("idp", "/infer"),
        ("idp", "/sign-nonce"),
        (cinema, "/present"),
    ] {
        assert_eq!(paths.iter().filter(|p| **p == expected).count(), 2, "{expected:?}");
    }
}
