//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{Datelike, Days, NaiveDate};
use num_bigint::{BigUint, RandBigInt};
use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use prima_core::agent::{self, Consent, LoginOptions, Wallet};
use prima_core::bench::{self, BenchConfig, BenchKeys, BenchReport, Experiment};
use prima_core::clock::{Clock, ManualClock, Timestamp};
use prima_core::credential::{select_disclosure, Attribute, Nonce, SessionId, UnsignedPresentation};
use prima_core::crypto::{
    batch_verify, exponentiation_count, pack, reset_exponentiation_count, verify_attribute, AttributeBinding,
    Signature, SignedMessage,
};
use prima_core::idp::{issue_signatures, nonce_payload, IdentityProvider};
use prima_core::inference::{completed_years, evaluate, Predicate, DATE_OF_BIRTH};
use prima_core::scenarios::{builtin, builtins, run_scenario, Expected, ScenarioReport, Step, TransportKind};
use prima_core::sp::{Challenge, ServicePolicy, ServiceProvider};
use prima_core::wire::{
    decode, encode, loopback, paths, Body, Capture, ChallengeResponse, Direction, Envelope, LoopbackOptions, Method,
    RawAttribute, Service,
};

use common::key;

type Outcome = Result<String, String>;

fn report(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = started.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{tag}] criterion {id}: {name} ({secs:.1}s) {detail}");
    outcome.is_ok()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn packing_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x5eed_0001);
    let mut agreed = 0usize;
    let mut compared = 0usize;
    for i in 0..500 {
        let bits = if i % 2 == 0 { 1024 } else { 2048 };
        let idp = key(bits, i / 2);
        let user = key(1024, i);
        let vk = idp.verification_key();
        let n = vk.modulus();
        let count = rng.gen_range(1..=50);
        let attributes: Vec<Attribute> = (0..count)
            .map(|j| Attribute::new(format!("attr_{j}"), format!("{:x}", rng.gen::<u64>())).unwrap())
            .collect();
        let t_exp = Timestamp::from_unix(rng.gen_range(1_500_000_000..4_000_000_000));
        let sigs = issue_signatures(idp.signing_key(), &attributes, user.verification_key(), t_exp);

        let mut subset: Vec<usize> = (0..count).filter(|_| rng.gen_bool(0.5)).collect();
        if subset.is_empty() {
            subset.push(rng.gen_range(0..count));
        }
        let bindings: Vec<_> = subset
            .iter()
            .map(|&j| AttributeBinding { attribute: &attributes[j], user_vk: user.verification_key(), t_exp })
            .collect();

        let mut chosen: Vec<Signature> = subset.iter().map(|&j| sigs[j].clone()).collect();
        let mut trial = |chosen: &[Signature]| -> Result<(), String> {
            let batch = batch_verify(vk, &bindings, &pack(chosen, n).unwrap()).map_err(|e| e.to_string())?;
            let individual = bindings
                .iter()
                .zip(chosen)
                .all(|(b, s)| verify_attribute(vk, b.attribute, b.user_vk, b.t_exp, s));
            compared += 1;
            if batch == individual {
                agreed += 1;
            }
            Ok(())
        };
        trial(&chosen)?;

        let victim = rng.gen_range(0..chosen.len());
        chosen[victim] = match rng.gen_range(0..3) {
            0 => Signature::from_biguint(rng.gen_biguint_range(&BigUint::from(1u8), n)),
            1 => sigs[(subset[victim] + 1) % count].clone(),
            _ => Signature::from_biguint((chosen[victim].value() + 1u8) % n),
        };
        if chosen[victim].value() == &BigUint::from(0u8) || (count == 1 && chosen[victim] == sigs[0]) {
            chosen[victim] = Signature::from_biguint(BigUint::from(2u8));
        }
        trial(&chosen)?;
    }
    let elapsed = started.elapsed();
    ensure(agreed == compared, || format!("{agreed}/{compared} agreed"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("{agreed}/{compared} agree in {:.1}s", elapsed.as_secs_f64()))
}

fn single_exponentiation() -> Outcome {
    let idp = key(2048, 0);
    let user = key(1024, 0);
    let clock = Arc::new(ManualClock::new(Timestamp::from_ymd_hms(2020, 1, 1, 0, 0, 0).unwrap()));
    let t_exp = clock.now().plus_seconds(86_400);
    let attributes: Vec<Attribute> =
        (0..50).map(|j| Attribute::new(format!("attr_{j:02}"), format!("v{j}")).unwrap()).collect();
    let credential = common::issue(idp, user, attributes, clock.now(), t_exp);
    let mut seen = Vec::new();
    for n in [1usize, 5, 20, 50] {
        let required: Vec<Predicate> = (0..n).map(|j| Predicate::reveal(format!("attr_{j:02}")).unwrap()).collect();
        let policy = ServicePolicy::new("counter", required, idp.verification_key().clone()).unwrap();
        let sp = ServiceProvider::new(policy, clock.clone()).unwrap();
        let challenge = sp.create_challenge(user.verification_key());
        let (disclosed, packed) =
            select_disclosure(&credential, &sp.policy().required_keys(), idp.verification_key().modulus()).unwrap();
        let presentation = UnsignedPresentation {
            disclosed,
            packed,
            user_vk: user.verification_key().clone(),
            expires_at: t_exp,
            timestamp: clock.now(),
            session_id: challenge.session_id,
            signed_nonce: SignedMessage::sign(
                idp.signing_key(),
                nonce_payload(user.verification_key(), &challenge.nonce),
            ),
        }
        .sign(user.signing_key(), challenge.nonce.as_bytes());
        reset_exponentiation_count();
        let token = sp.verify_presentation(&presentation, &challenge.nonce).map_err(|e| e.to_string())?;
        let count = exponentiation_count();
        ensure(token.granted_keys.len() == n, || format!("|A*|={n}: granted {}", token.granted_keys.len()))?;
        ensure(count.attribute == 1, || format!("|A*|={n}: {} attribute exponentiations", count.attribute))?;
        ensure(count.total() == 3, || format!("|A*|={n}: {} exponentiations in total", count.total()))?;
        seen.push(format!("{n}:{}", count.attribute));
    }
    Ok(format!("attribute exponentiations per |A*| {} (3 in total with both message signatures)", seen.join(" ")))
}

fn script_outcomes(r: &ScenarioReport) -> String {
    r.steps
        .iter()
        .filter(|s| matches!(s.expected, Expected::Error(_)))
        .map(|s| s.outcome.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn run_named(names: &[&str]) -> Result<Vec<ScenarioReport>, String> {
    let mut out = Vec::new();
    for name in names {
        let script = builtin(name).ok_or_else(|| format!("no script {name}"))?;
        let r = run_scenario(&script, TransportKind::Loopback).map_err(|e| e.to_string())?;
        ensure(r.passed(), || r.to_string())?;
        out.push(r);
    }
    Ok(out)
}

fn story_scenarios() -> Outcome {
    let reports = run_named(&["bank", "cinema"])?;
    let assertions: usize = ["bank", "cinema"].iter().map(|n| builtin(n).unwrap().wire_assertions.len()).sum();
    Ok(format!("bank and cinema granted; {assertions} transcript assertions held; {} steps", reports.iter().map(|r| r.steps.len()).sum::<usize>()))
}

/// SP front end that hands out a preset nonce instead of a random one.
struct PinnedNonce {
    sp: ServiceProvider,
    nonce: Mutex<Nonce>,
}

impl Service for PinnedNonce {
    fn handle(&self, method: Method, path: &str, body: &[u8]) -> Vec<u8> {
        if path != paths::REQUEST_ACCESS {
            return self.sp.handle(method, path, body);
        }
        let Ok(Envelope::Message(Body::ChallengeReq(req))) = decode(body) else {
            return self.sp.handle(method, path, body);
        };
        let policy = self.sp.policy();
        let challenge = Challenge {
            nonce: *self.nonce.lock(),
            session_id: SessionId::random(),
            required: policy.required.clone(),
            issued_at: Timestamp::from_ymd_hms(2024, 5, 5, 10, 0, 0).unwrap(),
            ttl: policy.challenge_ttl,
        };
        self.sp.import_challenge(challenge.clone(), &req.user_vk);
        encode(&Envelope::Message(Body::ChallengeResp(ChallengeResponse { challenge })))
    }
}

fn unlinkability() -> Outcome {
    let now = Timestamp::from_ymd_hms(2024, 5, 5, 10, 0, 0).unwrap();
    let clock = Arc::new(ManualClock::new(now));
    let idp_key = key(1024, 0).clone();
    let idp = Arc::new(IdentityProvider::new(idp_key.clone(), clock.clone()));
    let capture = Capture::new();
    let (idp_client, idp_server) = loopback(LoopbackOptions::default().capture(&capture, "idp"));
    idp_server.serve(idp);

    let sps: Vec<_> = [
        ("cinema-linkage-probe-0a1b2c3d", vec![Predicate::age_over(16).unwrap(), Predicate::reveal("country").unwrap()]),
        ("bank-linkage-probe-4e5f6a7b", vec![Predicate::reveal("full_name").unwrap(), Predicate::reveal("country").unwrap()]),
    ]
    .into_iter()
    .map(|(name, required)| {
        let policy = ServicePolicy::new(name, required, idp_key.verification_key().clone()).unwrap();
        let front = Arc::new(PinnedNonce {
            sp: ServiceProvider::new(policy, clock.clone()).unwrap(),
            nonce: Mutex::new(Nonce::random()),
        });
        let (client, server) = loopback(LoopbackOptions::default());
        server.serve(front.clone());
        (name, front, client)
    })
    .collect();

    let mut wallets = Vec::new();
    for u in 0..4 {
        let mut w = Wallet::new(key(1024, u).clone());
        let attrs = [("full_name", format!("User {u}")), ("country", "DE".into()), (DATE_OF_BIRTH, "1990-01-01".into())]
            .into_iter()
            .map(|(k, v)| RawAttribute { key: k.into(), value: v })
            .collect();
        agent::enroll(&mut w, &idp_client, "idp", attrs, Duration::from_secs(86_400 * 365), false, clock.as_ref())
            .map_err(|e| e.to_string())?;
        wallets.push(w);
    }

    let mut rng = StdRng::seed_from_u64(0x5eed_0004);
    let mut identical = 0;
    for trial in 0..1000 {
        let nonce = Nonce(rng.gen());
        let w = &mut wallets[rng.gen_range(0..4)];
        let mut requests = Vec::new();
        for (name, front, client) in &sps {
            *front.nonce.lock() = nonce;
            capture.clear();
            agent::login(w, &idp_client, client, |r| Consent::new(r), &LoginOptions::default(), clock.as_ref())
                .map_err(|e| format!("trial {trial} at {name}: {e}"))?;
            let sent: Vec<_> = capture
                .messages()
                .into_iter()
                .filter(|m| m.path == paths::SIGN_NONCE && m.direction == Direction::Request)
                .collect();
            ensure(sent.len() == 1, || format!("trial {trial}: {} nonce requests", sent.len()))?;
            ensure(!sent[0].contains(name.as_bytes()), || format!("trial {trial}: SP name reached the IdP"))?;
            requests.push(sent[0].bytes.clone());
        }
        if requests[0] == requests[1] {
            identical += 1;
        }
    }
    ensure(identical == 1000, || format!("{identical}/1000 identical"))?;
    Ok(format!("{identical}/1000 nonce-sign requests byte-identical across two SPs"))
}

fn adversary_suite() -> Outcome {
    let attacks = [
        "malicious-sp-replay",
        "cross-sp-replay",
        "stolen-credential",
        "expired-credential",
        "revoked-then-login",
        "tampered-attribute",
    ];
    let reports = run_named(&attacks)?;
    let codes: Vec<String> = reports.iter().map(|r| format!("{}={}", r.name, script_outcomes(r))).collect();

    let mut burst = builtin("replay-burst").unwrap();
    let step = burst.steps.iter().find(|s| matches!(s, Step::ReplayBurst { .. })).unwrap().clone();
    while burst.steps.iter().filter(|s| matches!(s, Step::ReplayBurst { .. })).count() < 100 {
        burst.steps.push(step.clone());
    }
    let r = run_scenario(&burst, TransportKind::Loopback).map_err(|e| e.to_string())?;
    ensure(r.passed(), || r.to_string())?;
    let bursts = r.steps.iter().filter(|s| s.action.contains("burst")).count();
    ensure(bursts == 100, || format!("{bursts} bursts ran"))?;
    Ok(format!("{}; 100 bursts of 16 each granted exactly one token", codes.join(" ")))
}

/// Walks the calendar one day at a time, bumping the age on each birthday.
fn age_by_day_count(dob: NaiveDate, today: NaiveDate) -> i32 {
    let leap_baby = dob.month() == 2 && dob.day() == 29;
    let mut age = 0;
    let mut d = dob;
    while d < today {
        d = d.succ_opt().unwrap();
        let birthday = if leap_baby && NaiveDate::from_ymd_opt(d.year(), 2, 29).is_none() {
            d.month() == 3 && d.day() == 1
        } else {
            d.month() == dob.month() && d.day() == dob.day()
        };
        if birthday {
            age += 1;
        }
    }
    age
}

fn age_oracle() -> Outcome {
    let base = NaiveDate::from_ymd_opt(1900, 1, 1).unwrap();
    let span = (NaiveDate::from_ymd_opt(2100, 12, 31).unwrap() - base).num_days() as u64;
    let mut rng = StdRng::seed_from_u64(0x5eed_0006);
    let mut pairs = Vec::new();
    for _ in 0..10_000 {
        let a = base + Days::new(rng.gen_range(0..=span));
        let b = base + Days::new(rng.gen_range(0..=span));
        pairs.push((a.min(b), a.max(b)));
    }
    let leap_days: Vec<NaiveDate> = (1904..=2096).step_by(4).filter_map(|y| NaiveDate::from_ymd_opt(y, 2, 29)).collect();
    for &dob in &leap_days {
        for y in (dob.year()..=2100).step_by(7) {
            for (m, d) in [(2, 28), (2, 29), (3, 1)] {
                if let Some(now) = NaiveDate::from_ymd_opt(y, m, d).filter(|now| *now >= dob) {
                    pairs.push((dob, now));
                }
            }
        }
    }
    let feb29 = pairs.iter().filter(|(d, _)| d.month() == 2 && d.day() == 29).count();
    let mut mismatches = Vec::new();
    for &(dob, now) in &pairs {
        let expected = age_by_day_count(dob, now);
        if completed_years(dob, now) != expected {
            mismatches.push(format!("{dob}->{now}"));
            continue;
        }
        let stored = [Attribute::new(DATE_OF_BIRTH, dob.format("%Y-%m-%d").to_string()).unwrap()];
        let at = Timestamp::from_unix(now.and_hms_opt(12, 0, 0).unwrap().and_utc().timestamp());
        let holds = |t: i32| evaluate(&Predicate::age_over(t as u32).unwrap(), &stored, at).is_ok();
        if (1..=150).contains(&expected) && !holds(expected) || (0..150).contains(&expected) && holds(expected + 1) {
            mismatches.push(format!("{dob}->{now} threshold"));
        }
    }
    ensure(pairs.len() >= 10_000, || format!("only {} pairs", pairs.len()))?;
    ensure(mismatches.is_empty(), || format!("{} mismatches, first {:?}", mismatches.len(), mismatches.first()))?;
    Ok(format!("{} pairs ({feb29} with Feb-29 birthdays) agree", pairs.len()))
}

fn performance() -> Outcome {
    let started = Instant::now();
    let cfg = BenchConfig::default();
    let mut results = Vec::new();
    for bits in [1024, 2048] {
        let keys = BenchKeys::generate(bits).map_err(|e| e.to_string())?;
        for e in Experiment::ALL {
            results.extend(bench::run(&keys, e, &cfg));
        }
    }
    let elapsed = started.elapsed();
    let report = BenchReport { results };
    let mut out = std::io::stdout().lock();
    for line in report.render().lines() {
        let _ = writeln!(out, "    {line}");
    }
    drop(out);

    let mut failed: Vec<String> = report
        .linearity_checks()
        .into_iter()
        .chain(report.ordering_checks())
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    let floor = report
        .results
        .iter()
        .filter(|r| r.experiment == Experiment::Requests && r.key_bits == 2048)
        .map(|r| r.throughput_per_s)
        .fold(f64::INFINITY, f64::min);
    if !(floor >= 300.0) {
        failed.push(format!("2048-bit throughput {floor:.0} req/s below 300"));
    }
    if elapsed > Duration::from_secs(600) {
        failed.push(format!("bench took {elapsed:?}"));
    }
    ensure(failed.is_empty(), || failed.join("; "))?;
    Ok(format!("linear, ordered, 2048-bit floor {floor:.0} req/s, bench {:.0}s", elapsed.as_secs_f64()))
}

fn transport_equivalence() -> Outcome {
    let scripts = builtins();
    let mut outcomes: Vec<Vec<(String, Vec<Expected>)>> = Vec::new();
    for kind in TransportKind::ALL {
        let mut per_kind = Vec::new();
        for s in &scripts {
            let r = run_scenario(s, kind).map_err(|e| e.to_string())?;
            ensure(r.passed(), || r.to_string())?;
            per_kind.push((r.name.clone(), r.steps.iter().map(|s| s.outcome.clone()).collect()));
        }
        outcomes.push(per_kind);
    }
    ensure(outcomes.windows(2).all(|w| w[0] == w[1]), || "step outcomes differ between transports".into())?;
    Ok(format!("{} scripts pass with identical step outcomes over {} transports", scripts.len(), outcomes.len()))
}

#[test]
fn acceptance_criteria() {
    let results = [
        report(1, "packing agrees with individual verification", packing_oracle),
        report(2, "one attribute exponentiation per presentation", single_exponentiation),
        report(3, "bank and cinema scenarios", story_scenarios),
        report(4, "nonce-sign requests unlinkable across SPs", unlinkability),
        report(5, "adversary suite and replay burst", adversary_suite),
        report(6, "completed-years oracle", age_oracle),
        report(7, "performance properties", performance),
        report(8, "loopback and HTTP equivalence", transport_equivalence),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
