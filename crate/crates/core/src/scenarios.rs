//! Scripted end-to-end runs over a capturing transport.
//!
//! A script names an IdP, some service providers and some users, then lists
//! protocol steps with their expected outcomes and assertions over the
//! captured bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use parking_lot::Mutex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::agent::{self, AgentError, Consent, LoginOptions, Tamper, Wallet};
use crate::clock::{ManualClock, Timestamp};
use crate::credential::canonicalize_attribute;
use crate::crypto::keygen;
use crate::idp::IdentityProvider;
use crate::inference::Predicate;
use crate::sp::{ServicePolicy, ServiceProvider};
use crate::wire::{
    decode, encode, loopback, paths, Body, Capture, CapturedMessage, Direction, Envelope, ErrorBody, HttpClient,
    HttpServer, LoopbackOptions, MessageType, Method, RawAttribute, Service, Transport, TransportError,
};

/// Scripts shipped with the crate.
pub const BUILTIN: &[(&str, &str)] = &[
    ("bank", include_str!("../scenarios/bank.json")),
    ("cinema", include_str!("../scenarios/cinema.json")),
    ("cached-inference", include_str!("../scenarios/cached-inference.json")),
    ("consent-denied", include_str!("../scenarios/consent-denied.json")),
    ("malicious-sp-replay", include_str!("../scenarios/malicious-sp-replay.json")),
    ("cross-sp-replay", include_str!("../scenarios/cross-sp-replay.json")),
    ("replay-burst", include_str!("../scenarios/replay-burst.json")),
    ("stolen-credential", include_str!("../scenarios/stolen-credential.json")),
    ("expired-credential", include_str!("../scenarios/expired-credential.json")),
    ("revoked-then-login", include_str!("../scenarios/revoked-then-login.json")),
    ("tampered-attribute", include_str!("../scenarios/tampered-attribute.json")),
    ("stale-timestamp", include_str!("../scenarios/stale-timestamp.json")),
];

pub fn builtin(name: &str) -> Option<ScenarioScript> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, text)| serde_json::from_str(text).expect("builtin scripts parse"))
}

pub fn builtins() -> Vec<ScenarioScript> {
    BUILTIN.iter().map(|(_, text)| serde_json::from_str(text).expect("builtin scripts parse")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Loopback,
    Http,
}

impl TransportKind {
    pub const ALL: [TransportKind; 2] = [TransportKind::Loopback, TransportKind::Http];
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::Loopback => "loopback",
            TransportKind::Http => "http",
        })
    }
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loopback" => Ok(TransportKind::Loopback),
            "http" => Ok(TransportKind::Http),
            _ => Err(format!("unknown transport {s:?}")),
        }
    }
}

/// Predicates in their short text form, e.g. `age_over:16`.
mod predicate_strings {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[Predicate], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|p| p.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Predicate>, D::Error> {
        Vec::<String>::deserialize(d)?.iter().map(|s| s.parse().map_err(serde::de::Error::custom)).collect()
    }
}

mod opt_predicate_strings {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<Vec<Predicate>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => predicate_strings::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<Predicate>>, D::Error> {
        predicate_strings::deserialize(d).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdpActor {
    pub key_bits: usize,
    pub start: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpActor {
    pub name: String,
    #[serde(with = "predicate_strings")]
    pub required: Vec<Predicate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserActor {
    pub name: String,
    pub key_bits: usize,
    pub attributes: Vec<RawAttribute>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Actors {
    pub idp: IdpActor,
    pub sps: Vec<SpActor>,
    pub users: Vec<UserActor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expected {
    Ok,
    TokenGranted,
    Error(String),
}

impl fmt::Display for Expected {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expected::Ok => f.write_str("ok"),
            Expected::TokenGranted => f.write_str("token-granted"),
            Expected::Error(code) => write!(f, "error {code}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TamperSpec {
    #[serde(default)]
    pub value: Option<(String, String)>,
    #[serde(default)]
    pub timestamp_offset_secs: i64,
    /// Present this other user's credential instead of one's own.
    #[serde(default)]
    pub credential_of: Option<String>,
}

fn token_granted() -> Expected {
    Expected::TokenGranted
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Enroll {
        user: String,
        validity_days: u64,
    },
    Login {
        user: String,
        sp: String,
        /// Approved predicates; absent means approve whatever is asked.
        #[serde(default, with = "opt_predicate_strings", skip_serializing_if = "Option::is_none")]
        consent: Option<Vec<Predicate>>,
        #[serde(default)]
        tamper: Option<TamperSpec>,
        #[serde(default)]
        fresh: bool,
        #[serde(default = "token_granted")]
        expect: Expected,
    },
    AdvanceClock {
        seconds: i64,
    },
    Revoke {
        user: String,
    },
    Reinstate {
        user: String,
    },
    /// Resends the last presentation captured on its way to `from_sp`.
    Replay {
        from_sp: String,
        to_sp: String,
        expect: Expected,
    },
    /// Builds one presentation and submits it `concurrency` times at once.
    ReplayBurst {
        user: String,
        sp: String,
        concurrency: usize,
        expect_tokens: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    All,
    /// Everything except enrollment.
    Auth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WireAssertion {
    /// `sentinel` appears in no request sent to `to` (`idp`, `sp`, or `sp:<name>`).
    Absent {
        sentinel: String,
        to: String,
        #[serde(default)]
        phase: Phase,
    },
    Present {
        sentinel: String,
        to: String,
        #[serde(default)]
        phase: Phase,
    },
    /// The values reaching `sp` out of `user`'s attributes are exactly those of `keys`.
    SpValuesExactly {
        user: String,
        sp: String,
        keys: Vec<String>,
    },
    RequestCount {
        to: String,
        path: String,
        count: usize,
    },
    /// Every nonce-signing request carries exactly the minimal field set.
    NonceRequestMinimal,
    /// No SP name, endpoint or session id reaches the IdP, and SP nonces reach
    /// it only inside nonce-signing requests.
    SpIdentifiersAbsentFromIdp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    pub description: String,
    pub actors: Actors,
    pub steps: Vec<Step>,
    pub expected: Expected,
    pub wire_assertions: Vec<WireAssertion>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScriptError {
    #[error("step {step}: unknown {kind} {name:?}")]
    UnknownActor { step: usize, kind: &'static str, name: String },
    #[error("assertion {index}: unknown {kind} {name:?}")]
    UnknownAssertionActor { index: usize, kind: &'static str, name: String },
    #[error("duplicate actor name {0:?}")]
    DuplicateActor(String),
    #[error("script has no steps")]
    NoSteps,
    #[error("scenario setup failed: {0}")]
    Setup(String),
}

impl ScenarioScript {
    /// Checks that every step and assertion names a defined actor.
    pub fn validate(&self) -> Result<(), ScriptError> {
        let mut names = BTreeSet::new();
        for n in self.actors.sps.iter().map(|s| &s.name).chain(self.actors.users.iter().map(|u| &u.name)) {
            if !names.insert(n.as_str()) {
                return Err(ScriptError::DuplicateActor(n.clone()));
            }
        }
        if self.steps.is_empty() {
            return Err(ScriptError::NoSteps);
        }
        let sps: BTreeSet<&str> = self.actors.sps.iter().map(|s| s.name.as_str()).collect();
        let users: BTreeSet<&str> = self.actors.users.iter().map(|u| u.name.as_str()).collect();
        for (i, step) in self.steps.iter().enumerate() {
            let check = |kind: &'static str, set: &BTreeSet<&str>, name: &str| {
                if set.contains(name) {
                    Ok(())
                } else {
                    Err(ScriptError::UnknownActor { step: i, kind, name: name.to_string() })
                }
            };
            match step {
                Step::Enroll { user, .. } | Step::Revoke { user } | Step::Reinstate { user } => check("user", &users, user)?,
                Step::Login { user, sp, tamper, .. } => {
                    check("user", &users, user)?;
                    check("sp", &sps, sp)?;
                    if let Some(victim) = tamper.as_ref().and_then(|t| t.credential_of.as_ref()) {
                        check("user", &users, victim)?;
                    }
                }
                Step::ReplayBurst { user, sp, .. } => {
                    check("user", &users, user)?;
                    check("sp", &sps, sp)?;
                }
                Step::Replay { from_sp, to_sp, .. } => {
                    check("sp", &sps, from_sp)?;
                    check("sp", &sps, to_sp)?;
                }
                Step::AdvanceClock { .. } => {}
            }
        }
        for (index, a) in self.wire_assertions.iter().enumerate() {
            let bad = |kind, name: &str| ScriptError::UnknownAssertionActor { index, kind, name: name.to_string() };
            match a {
                WireAssertion::SpValuesExactly { user, sp, .. } => {
                    if !users.contains(user.as_str()) {
                        return Err(bad("user", user));
                    }
                    if !sps.contains(sp.as_str()) {
                        return Err(bad("sp", sp));
                    }
                }
                WireAssertion::Absent { to, .. } | WireAssertion::Present { to, .. } | WireAssertion::RequestCount { to, .. } => {
                    if let Some(name) = to.strip_prefix("sp:") {
                        if !sps.contains(name) {
                            return Err(bad("sp", name));
                        }
                    } else if to != "sp" && to != "idp" {
                        return Err(bad("peer", to));
                    }
                }
                WireAssertion::NonceRequestMinimal | WireAssertion::SpIdentifiersAbsentFromIdp => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepReport {
    pub index: usize,
    pub action: String,
    pub outcome: Expected,
    pub expected: Expected,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub name: String,
    pub transport: TransportKind,
    pub steps: Vec<StepReport>,
    /// First violated expectation or assertion.
    pub failure: Option<String>,
    pub transcript: Vec<CapturedMessage>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failure {
            None => write!(f, "[pass] {} ({})", self.name, self.transport),
            Some(why) => write!(f, "[FAIL] {} ({}): {why}", self.name, self.transport),
        }
    }
}

/// Captures the bytes of `/present` instead of delivering them.
struct Withhold<'a> {
    inner: &'a dyn Transport,
    held: Mutex<Option<Vec<u8>>>,
}

impl Transport for Withhold<'_> {
    fn round_trip(&self, method: Method, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        if path == paths::PRESENT {
            *self.held.lock() = Some(body.to_vec());
            let error = ErrorBody::new("withheld", "presentation held back by the harness");
            return Ok(encode(&Envelope::Error { message_type: MessageType::PresentResp, error }));
        }
        self.inner.round_trip(method, path, body)
    }
}

struct SpNode {
    name: String,
    endpoint: String,
    transport: Box<dyn Transport>,
}

struct UserNode {
    wallet: Wallet,
    attributes: Vec<RawAttribute>,
}

struct World {
    clock: ManualClock,
    capture: Capture,
    idp_endpoint: String,
    idp_transport: Box<dyn Transport>,
    sps: BTreeMap<String, SpNode>,
    users: BTreeMap<String, UserNode>,
    _servers: Vec<HttpServer>,
}

fn connect(
    kind: TransportKind,
    service: Arc<dyn Service>,
    capture: &Capture,
    peer: &str,
    servers: &mut Vec<HttpServer>,
) -> Result<(Box<dyn Transport>, String), ScriptError> {
    match kind {
        TransportKind::Loopback => {
            let (client, server) = loopback(LoopbackOptions::default().capture(capture, peer));
            server.serve(service);
            Ok((Box::new(client), format!("loopback://{peer}")))
        }
        TransportKind::Http => {
            let server = HttpServer::spawn(service, "127.0.0.1:0".parse().unwrap())
                .map_err(|e| ScriptError::Setup(e.to_string()))?;
            let url = server.base_url();
            servers.push(server);
            let client = HttpClient::new(url.clone()).map_err(|e| ScriptError::Setup(e.to_string()))?;
            Ok((Box::new(client.with_capture(capture, peer)), url))
        }
    }
}

impl World {
    fn build(script: &ScenarioScript, kind: TransportKind) -> Result<World, ScriptError> {
        let clock = ManualClock::new(script.actors.idp.start);
        let capture = Capture::new();
        let mut servers = Vec::new();
        let idp_key = keygen(script.actors.idp.key_bits).map_err(|e| ScriptError::Setup(e.to_string()))?;
        let idp = Arc::new(IdentityProvider::new(idp_key, Arc::new(clock.clone())));
        let (idp_transport, idp_endpoint) = connect(kind, idp.clone(), &capture, "idp", &mut servers)?;
        let mut sps = BTreeMap::new();
        for a in &script.actors.sps {
            let policy = ServicePolicy::new(&a.name, a.required.clone(), idp.verification_key().clone())
                .map_err(|e| ScriptError::Setup(e.to_string()))?;
            let sp = Arc::new(ServiceProvider::new(policy, Arc::new(clock.clone())).map_err(|e| ScriptError::Setup(e.to_string()))?);
            let peer = format!("sp:{}", a.name);
            let (transport, endpoint) = connect(kind, sp, &capture, &peer, &mut servers)?;
            sps.insert(a.name.clone(), SpNode { name: a.name.clone(), endpoint, transport });
        }
        let mut users = BTreeMap::new();
        for u in &script.actors.users {
            let wallet = Wallet::generate(u.key_bits).map_err(|e| ScriptError::Setup(e.to_string()))?;
            users.insert(u.name.clone(), UserNode { wallet, attributes: u.attributes.clone() });
        }
        Ok(World { clock, capture, idp_endpoint, idp_transport, sps, users, _servers: servers })
    }

    fn user(&mut self, name: &str) -> &mut UserNode {
        self.users.get_mut(name).expect("validated")
    }
}

fn outcome_of(r: Result<Expected, AgentError>) -> Expected {
    match r {
        Ok(e) => e,
        Err(e) => Expected::Error(e.code().to_string()),
    }
}

fn response_outcome(bytes: Result<Vec<u8>, TransportError>) -> Expected {
    match bytes.map(|b| decode(&b)) {
        Ok(Ok(Envelope::Message(Body::PresentResp(_)))) => Expected::TokenGranted,
        Ok(Ok(Envelope::Error { error, .. })) => Expected::Error(error.code),
        Ok(Ok(other)) => Expected::Error(format!("unexpected {}", other.message_type())),
        Ok(Err(e)) => Expected::Error(format!("undecodable: {e}")),
        Err(e) => Expected::Error(format!("network: {e}")),
    }
}

/// Where each step's traffic sits in the transcript.
struct StepSpan {
    enroll: bool,
    range: std::ops::Range<usize>,
}

pub fn run_scenario(script: &ScenarioScript, kind: TransportKind) -> Result<ScenarioReport, ScriptError> {
    script.validate()?;
    let mut world = World::build(script, kind)?;
    let mut reports = Vec::new();
    let mut spans = Vec::new();
    let mut failure = None;

    for (index, step) in script.steps.iter().enumerate() {
        let start = world.capture.len();
        let (action, outcome, expected) = run_step(&mut world, step);
        spans.push(StepSpan { enroll: matches!(step, Step::Enroll { .. }), range: start..world.capture.len() });
        if outcome != expected && failure.is_none() {
            failure = Some(format!("step {index} ({action}): expected {expected}, got {outcome}"));
        }
        reports.push(StepReport { index, action, outcome, expected });
    }
    if failure.is_none() {
        if let Some(last) = reports.last() {
            if last.outcome != script.expected {
                failure = Some(format!("final outcome {} differs from expected {}", last.outcome, script.expected));
            }
        }
    }
    let transcript = world.capture.messages();
    if failure.is_none() {
        failure = check_assertions(script, &world, &transcript, &spans).err();
    }
    Ok(ScenarioReport { name: script.name.clone(), transport: kind, steps: reports, failure, transcript })
}

fn run_step(world: &mut World, step: &Step) -> (String, Expected, Expected) {
    match step {
        Step::Enroll { user, validity_days } => {
            let idp_endpoint = world.idp_endpoint.clone();
            let clock = world.clock.clone();
            let idp_transport: &dyn Transport = world.idp_transport.as_ref();
            let node = world.users.get_mut(user).expect("validated");
            let r = agent::enroll(
                &mut node.wallet,
                idp_transport,
                &idp_endpoint,
                node.attributes.clone(),
                Duration::from_secs(validity_days * 86400),
                false,
                &clock,
            )
            .map(|_| Expected::Ok);
            (format!("enroll {user}"), outcome_of(r), Expected::Ok)
        }
        Step::Login { user, sp, consent, tamper, fresh, expect } => {
            let mut options = LoginOptions { fresh: *fresh, ..LoginOptions::default() };
            if let Some(t) = tamper {
                options.tamper = Tamper {
                    value_override: t.value.clone(),
                    timestamp_offset_secs: t.timestamp_offset_secs,
                    credential: t.credential_of.as_ref().and_then(|victim| {
                        world.users[victim].wallet.entries().next().map(|e| e.credential.clone())
                    }),
                };
            }
            let r = login(world, user, sp, consent.as_deref(), &options, None).map(|_| Expected::TokenGranted);
            (format!("login {user} at {sp}"), outcome_of(r), expect.clone())
        }
        Step::AdvanceClock { seconds } => {
            world.clock.advance(*seconds);
            (format!("advance clock {seconds}s"), Expected::Ok, Expected::Ok)
        }
        Step::Revoke { user } | Step::Reinstate { user } => {
            let revoke = matches!(step, Step::Revoke { .. });
            let vk = world.user(user).wallet.user_vk().clone();
            let r = crate::idp::client::set_status(world.idp_transport.as_ref(), &vk, revoke)
                .map(|_| Expected::Ok)
                .map_err(|e| e.to_string());
            let outcome = r.unwrap_or_else(Expected::Error);
            (format!("{} {user}", if revoke { "revoke" } else { "reinstate" }), outcome, Expected::Ok)
        }
        Step::Replay { from_sp, to_sp, expect } => {
            let peer = format!("sp:{from_sp}");
            let captured = world
                .capture
                .messages()
                .into_iter()
                .rev()
                .find(|m| m.peer == peer && m.direction == Direction::Request && m.path == paths::PRESENT);
            let outcome = match captured {
                Some(m) => response_outcome(world.sps[to_sp].transport.round_trip(Method::Post, paths::PRESENT, &m.bytes)),
                None => Expected::Error("nothing-captured".into()),
            };
            (format!("replay {from_sp} -> {to_sp}"), outcome, expect.clone())
        }
        Step::ReplayBurst { user, sp, concurrency, expect_tokens } => {
            let tokens = replay_burst(world, user, sp, *concurrency);
            let outcome = match tokens {
                Ok(n) if n == *expect_tokens => Expected::Ok,
                Ok(n) => Expected::Error(format!("{n} tokens")),
                Err(e) => Expected::Error(e),
            };
            (format!("replay burst x{concurrency} at {sp}"), outcome, Expected::Ok)
        }
    }
}

fn login(
    world: &mut World,
    user: &str,
    sp: &str,
    consent: Option<&[Predicate]>,
    options: &LoginOptions,
    withhold: Option<&dyn Transport>,
) -> Result<agent::LoginOutcome, AgentError> {
    let clock = world.clock.clone();
    let idp_transport: &dyn Transport = world.idp_transport.as_ref();
    let sp_transport: &dyn Transport = withhold.unwrap_or(world.sps[sp].transport.as_ref());
    let node = world.users.get_mut(user).expect("validated");
    let decide = |required: &[Predicate]| match consent {
        Some(allowed) => Consent::new(allowed),
        None => Consent::new(required),
    };
    agent::login(&mut node.wallet, idp_transport, sp_transport, decide, options, &clock)
}

/// Number of tokens granted when one presentation is submitted `n` times concurrently.
fn replay_burst(world: &mut World, user: &str, sp: &str, n: usize) -> Result<usize, String> {
    let sp_transport: &dyn Transport = world.sps[sp].transport.as_ref();
    // The wrapper borrows the SP transport while `login` needs the world mutably,
    // so run the flow against a detached copy of the user's wallet.
    let held = Withhold { inner: sp_transport, held: Mutex::new(None) };
    let mut wallet = world.users[user].wallet.clone();
    let clock = world.clock.clone();
    let r = agent::login(&mut wallet, world.idp_transport.as_ref(), &held, |req| Consent::new(req), &LoginOptions::default(), &clock);
    match r {
        Err(AgentError::Sp(e)) if e.code == "withheld" => {}
        Err(e) => return Err(e.code().to_string()),
        Ok(_) => return Err("presentation was not withheld".into()),
    }
    world.users.get_mut(user).expect("validated").wallet = wallet;
    let bytes = held.held.lock().take().ok_or("no presentation captured")?;
    let outcomes: Vec<Expected> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|_| s.spawn(|| response_outcome(sp_transport.round_trip(Method::Post, paths::PRESENT, &bytes))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("replay thread")).collect()
    });
    let tokens = outcomes.iter().filter(|o| **o == Expected::TokenGranted).count();
    if let Some(other) = outcomes.iter().find(|o| **o != Expected::TokenGranted && **o != Expected::Error("session-consumed".into())) {
        return Err(format!("unexpected burst outcome {other}"));
    }
    Ok(tokens)
}

fn matches_peer(m: &CapturedMessage, to: &str) -> bool {
    match to {
        "sp" => m.peer.starts_with("sp:"),
        other => m.peer == other,
    }
}

fn requests_to<'a>(
    transcript: &'a [CapturedMessage],
    spans: &'a [StepSpan],
    to: String,
    phase: Phase,
) -> impl Iterator<Item = &'a CapturedMessage> + 'a {
    let in_phase = move |i: usize| match phase {
        Phase::All => true,
        Phase::Auth => !spans.iter().any(|s| s.enroll && s.range.contains(&i)),
    };
    transcript
        .iter()
        .enumerate()
        .filter(move |(i, m)| m.direction == Direction::Request && matches_peer(m, &to) && in_phase(*i))
        .map(|(_, m)| m)
}

fn check_assertions(
    script: &ScenarioScript,
    world: &World,
    transcript: &[CapturedMessage],
    spans: &[StepSpan],
) -> Result<(), String> {
    let requests = |to: &str, phase: Phase| requests_to(transcript, spans, to.to_string(), phase);
    for (i, a) in script.wire_assertions.iter().enumerate() {
        match a {
            WireAssertion::Absent { sentinel, to, phase } => {
                if let Some(m) = requests(to, *phase).find(|m| m.contains(sentinel.as_bytes())) {
                    return Err(format!("assertion {i}: {sentinel:?} reached {} at {}", m.peer, m.path));
                }
            }
            WireAssertion::Present { sentinel, to, phase } => {
                if !requests(to, *phase).any(|m| m.contains(sentinel.as_bytes())) {
                    return Err(format!("assertion {i}: {sentinel:?} never reached {to}"));
                }
            }
            WireAssertion::SpValuesExactly { user, sp, keys } => {
                let want: BTreeSet<&str> = keys.iter().map(String::as_str).collect();
                let peer = format!("sp:{sp}");
                for raw in &world.users[user].attributes {
                    let Ok(a) = canonicalize_attribute(&raw.key, &raw.value) else { continue };
                    let needle = format!("\"value\":{}", serde_json::to_string(a.value()).unwrap());
                    let seen = requests(&peer, Phase::All).any(|m| m.contains(needle.as_bytes()));
                    if seen != want.contains(a.key()) {
                        return Err(format!(
                            "assertion {i}: value of {:?} {} {sp}",
                            a.key(),
                            if seen { "reached" } else { "never reached" }
                        ));
                    }
                }
            }
            WireAssertion::RequestCount { to, path, count } => {
                let n = requests(to, Phase::All).filter(|m| &m.path == path).count();
                if n != *count {
                    return Err(format!("assertion {i}: {n} requests to {to} {path}, expected {count}"));
                }
            }
            WireAssertion::NonceRequestMinimal => {
                for m in requests("idp", Phase::All).filter(|m| m.path == paths::SIGN_NONCE) {
                    let v: serde_json::Value = serde_json::from_slice(&m.bytes).map_err(|e| e.to_string())?;
                    let fields: BTreeSet<&str> =
                        v["body"].as_object().map(|o| o.keys().map(String::as_str).collect()).unwrap_or_default();
                    let minimal: BTreeSet<&str> = ["nonce", "requested_at", "user_signature", "user_vk"].into();
                    if fields != minimal || v["message_type"] != "nonce-sign-req" {
                        return Err(format!("assertion {i}: nonce-sign request fields {fields:?}"));
                    }
                }
            }
            WireAssertion::SpIdentifiersAbsentFromIdp => sp_identifiers_absent(world, transcript).map_err(|e| format!("assertion {i}: {e}"))?,
        }
    }
    Ok(())
}

fn sp_identifiers_absent(world: &World, transcript: &[CapturedMessage]) -> Result<(), String> {
    let mut forbidden: Vec<(String, Vec<u8>)> = Vec::new();
    let mut nonces: Vec<Vec<u8>> = Vec::new();
    for sp in world.sps.values() {
        forbidden.push((format!("name of {}", sp.name), sp.name.clone().into_bytes()));
        forbidden.push((format!("endpoint of {}", sp.name), sp.endpoint.clone().into_bytes()));
    }
    for m in transcript.iter().filter(|m| m.peer.starts_with("sp:") && m.direction == Direction::Response) {
        if let Ok(Envelope::Message(Body::ChallengeResp(r))) = decode(&m.bytes) {
            let sid = r.challenge.session_id;
            forbidden.push(("session id".into(), URL_SAFE_NO_PAD.encode(sid.as_bytes()).into_bytes()));
            forbidden.push(("raw session id".into(), sid.as_bytes().to_vec()));
            nonces.push(URL_SAFE_NO_PAD.encode(r.challenge.nonce.as_bytes()).into_bytes());
        }
    }
    for m in transcript.iter().filter(|m| m.peer == "idp" && m.direction == Direction::Request) {
        if let Some((what, _)) = forbidden.iter().find(|(_, b)| m.contains(b)) {
            return Err(format!("{what} reached the IdP at {}", m.path));
        }
        if m.path != paths::SIGN_NONCE && nonces.iter().any(|n| m.contains(n)) {
            return Err(format!("an SP nonce reached the IdP at {}", m.path));
        }
    }
    Ok(())
}

/// Runs the given scripts over one transport.
pub fn run_all(scripts: &[ScenarioScript], kind: TransportKind) -> Vec<Result<ScenarioReport, ScriptError>> {
    scripts.iter().map(|s| run_scenario(s, kind)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_scripts_parse_and_validate() {
        for (name, text) in BUILTIN {
            let s: ScenarioScript = serde_json::from_str(text).unwrap();
            assert_eq!(&s.name, name);
            s.validate().unwrap();
        }
    }

    #[test]
    fn builtin_scripts_use_sorted_keys() {
        for (name, text) in BUILTIN {
            let v: serde_json::Value = serde_json::from_str(text).unwrap();
            let compact: String = text.split_whitespace().collect();
            let canonical: String = serde_json::to_string(&v).unwrap().split_whitespace().collect();
            assert_eq!(compact, canonical, "{name} is not in canonical key order");
        }
    }

    #[test]
    fn reference_errors_are_reported() {
        let mut s = builtin("cinema").unwrap();
        s.steps.push(Step::Revoke { user: "bob".into() });
        assert_eq!(s.validate(), Err(ScriptError::UnknownActor { step: 2, kind: "user", name: "bob".into() }));
        let mut s = builtin("cinema").unwrap();
        s.wire_assertions.push(WireAssertion::RequestCount { to: "sp:nowhere".into(), path: "/x".into(), count: 0 });
        assert!(matches!(s.validate(), Err(ScriptError::UnknownAssertionActor { .. })));
        let mut s = builtin("cinema").unwrap();
        s.steps.clear();
        assert_eq!(s.validate(), Err(ScriptError::NoSteps));
        let mut s = builtin("stolen-credential").unwrap();
        s.actors.users[1].name = "alice".into();
        assert_eq!(s.validate(), Err(ScriptError::DuplicateActor("alice".into())));
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = BUILTIN[0].1.replacen("\"description\"", "\"extra\": 1, \"description\"", 1);
        assert!(serde_json::from_str::<ScenarioScript>(&text).is_err());
    }

    #[test]
    fn cinema_over_loopback() {
        let r = run_scenario(&builtin("cinema").unwrap(), TransportKind::Loopback).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.steps.len(), 2);
    }
}
