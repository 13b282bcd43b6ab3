//! Service provider: issues challenges, verifies presentations offline and
//! hands out access tokens.
//!
//! Verification never talks to the IdP. Everything it needs is the trusted
//! IdP key in the policy and the local table of pending challenges.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{duration_secs, Clock, Timestamp};
use crate::credential::{Nonce, Presentation, SessionId, TokenId};
use crate::crypto::VerificationKey;
use crate::idp::nonce_payload;
use crate::inference::{Predicate, PredicateKind};
use crate::wire::{
    decode, encode, paths, Body, ChallengeResponse, Envelope, ErrorBody, MessageType, Method, PolicyResponse,
    PresentResponse, Service,
};

pub const DEFAULT_CLOCK_SKEW: Duration = Duration::from_secs(120);
pub const DEFAULT_CHALLENGE_TTL: Duration = Duration::from_secs(300);
pub const DEFAULT_TOKEN_TTL: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Challenge {
    pub nonce: Nonce,
    pub session_id: SessionId,
    pub required: Vec<Predicate>,
    pub issued_at: Timestamp,
    #[serde(with = "duration_secs")]
    pub ttl: Duration,
}

impl Challenge {
    pub fn expires_at(&self) -> Timestamp {
        self.issued_at.saturating_add(self.ttl)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessToken {
    pub token_id: TokenId,
    pub user_vk: VerificationKey,
    pub granted_at: Timestamp,
    pub expires_at: Timestamp,
    pub granted_keys: Vec<String>,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy must require at least one attribute or predicate")]
    EmptyRequirements,
    #[error("service name must not be empty")]
    EmptyName,
    #[error("{0} must be positive")]
    ZeroDuration(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServicePolicy {
    pub service_name: String,
    /// Plain attribute keys appear as `reveal` predicates.
    pub required: Vec<Predicate>,
    pub idp_vk: VerificationKey,
    #[serde(with = "duration_secs")]
    pub clock_skew: Duration,
    #[serde(with = "duration_secs")]
    pub token_ttl: Duration,
    #[serde(with = "duration_secs")]
    pub challenge_ttl: Duration,
}

impl ServicePolicy {
    pub fn new(service_name: impl Into<String>, required: Vec<Predicate>, idp_vk: VerificationKey) -> Result<Self, PolicyError> {
        let p = ServicePolicy {
            service_name: service_name.into(),
            required,
            idp_vk,
            clock_skew: DEFAULT_CLOCK_SKEW,
            token_ttl: DEFAULT_TOKEN_TTL,
            challenge_ttl: DEFAULT_CHALLENGE_TTL,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.required.is_empty() {
            return Err(PolicyError::EmptyRequirements);
        }
        if self.service_name.is_empty() {
            return Err(PolicyError::EmptyName);
        }
        if self.token_ttl.is_zero() {
            return Err(PolicyError::ZeroDuration("token_ttl"));
        }
        if self.challenge_ttl.is_zero() {
            return Err(PolicyError::ZeroDuration("challenge_ttl"));
        }
        Ok(())
    }

    /// Attribute keys a presentation must disclose to satisfy the policy.
    pub fn required_keys(&self) -> BTreeSet<String> {
        self.required.iter().map(Predicate::statement_key).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("user signature does not verify")]
    BadUserSignature,
    #[error("no pending challenge for this session")]
    UnknownSession,
    #[error("challenge already used")]
    SessionConsumed,
    #[error("presentation timestamp outside the accepted window")]
    StaleTimestamp,
    #[error("credential expired")]
    CredentialExpired,
    #[error("IdP nonce signature does not verify")]
    BadIdpNonceSignature,
    #[error("missing required attributes: {}", .0.join(", "))]
    MissingRequired(Vec<String>),
    #[error("packed signature does not verify")]
    BadPackedSignature,
}

impl VerifyError {
    pub fn code(&self) -> &'static str {
        match self {
            VerifyError::BadUserSignature => "bad-user-signature",
            VerifyError::UnknownSession => "unknown-session",
            VerifyError::SessionConsumed => "session-consumed",
            VerifyError::StaleTimestamp => "stale-timestamp",
            VerifyError::CredentialExpired => "credential-expired",
            VerifyError::BadIdpNonceSignature => "bad-idp-nonce-signature",
            VerifyError::MissingRequired(_) => "missing-required",
            VerifyError::BadPackedSignature => "bad-packed-signature",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum SessionState {
    Pending,
    Claimed,
    Consumed,
}

#[derive(Debug, Clone, Serialize)]
struct PendingChallenge {
    challenge: Challenge,
    user_vk: VerificationKey,
    state: SessionState,
}

/// Everything the SP keeps between requests.
#[derive(Debug, Clone, Serialize)]
pub struct SpState {
    challenges: Vec<PendingChallenge>,
    tokens: Vec<AccessToken>,
}

pub struct ServiceProvider {
    policy: ServicePolicy,
    clock: Arc<dyn Clock>,
    pending: Mutex<HashMap<SessionId, PendingChallenge>>,
    tokens: RwLock<HashMap<TokenId, AccessToken>>,
}

impl ServiceProvider {
    pub fn new(policy: ServicePolicy, clock: Arc<dyn Clock>) -> Result<Self, PolicyError> {
        policy.validate()?;
        Ok(ServiceProvider { policy, clock, pending: Mutex::new(HashMap::new()), tokens: RwLock::new(HashMap::new()) })
    }

    pub fn policy(&self) -> &ServicePolicy {
        &self.policy
    }

    /// Issues a fresh challenge bound to `user_vk`.
    pub fn create_challenge(&self, user_vk: &VerificationKey) -> Challenge {
        let challenge = Challenge {
            nonce: Nonce::random(),
            session_id: SessionId::random(),
            required: self.policy.required.clone(),
            issued_at: self.clock.now(),
            ttl: self.policy.challenge_ttl,
        };
        self.import_challenge(challenge.clone(), user_vk);
        challenge
    }

    #[doc(hidden)]
    pub fn import_challenge(&self, challenge: Challenge, user_vk: &VerificationKey) {
        let entry = PendingChallenge { challenge, user_vk: user_vk.clone(), state: SessionState::Pending };
        self.pending.lock().insert(entry.challenge.session_id, entry);
    }

    /// Moves the session to `Claimed` if it is pending, fresh and bound to
    /// this user and nonce.
    fn claim(&self, p: &Presentation, sp_nonce: &Nonce, now: Timestamp) -> Result<Challenge, VerifyError> {
        let mut pending = self.pending.lock();
        let entry = pending.get_mut(&p.session_id).ok_or(VerifyError::UnknownSession)?;
        if now >= entry.challenge.expires_at() {
            pending.remove(&p.session_id);
            return Err(VerifyError::UnknownSession);
        }
        if entry.challenge.nonce != *sp_nonce || entry.user_vk != p.user_vk {
            return Err(VerifyError::UnknownSession);
        }
        if entry.state != SessionState::Pending {
            return Err(VerifyError::SessionConsumed);
        }
        entry.state = SessionState::Claimed;
        Ok(entry.challenge.clone())
    }

    fn settle(&self, session_id: &SessionId, state: SessionState) {
        if let Some(e) = self.pending.lock().get_mut(session_id) {
            e.state = state;
        }
    }

    /// Runs the seven checks in order and reports the first failure.
    pub fn verify_presentation(&self, p: &Presentation, sp_nonce: &Nonce) -> Result<AccessToken, VerifyError> {
        let now = self.clock.now();
        if !p.verify_user_signature(sp_nonce.as_bytes()) {
            return Err(VerifyError::BadUserSignature);
        }
        let challenge = self.claim(p, sp_nonce, now)?;
        match self.check_claimed(p, &challenge, now) {
            Ok(token) => {
                self.settle(&p.session_id, SessionState::Consumed);
                self.tokens.write().insert(token.token_id, token.clone());
                Ok(token)
            }
            Err(e) => {
                self.settle(&p.session_id, SessionState::Pending);
                Err(e)
            }
        }
    }

    fn check_claimed(&self, p: &Presentation, challenge: &Challenge, now: Timestamp) -> Result<AccessToken, VerifyError> {
        if now.abs_diff(p.timestamp) > self.policy.clock_skew {
            return Err(VerifyError::StaleTimestamp);
        }
        if now >= p.expires_at {
            return Err(VerifyError::CredentialExpired);
        }
        if p.signed_nonce.payload != nonce_payload(&p.user_vk, &challenge.nonce)
            || !p.signed_nonce.verify(&self.policy.idp_vk)
        {
            return Err(VerifyError::BadIdpNonceSignature);
        }
        let missing: Vec<String> =
            challenge.required.iter().filter(|r| !satisfied(r, p)).map(Predicate::statement_key).collect();
        if !missing.is_empty() {
            return Err(VerifyError::MissingRequired(missing));
        }
        match p.verify_packed(&self.policy.idp_vk) {
            Ok(true) => {}
            Ok(false) | Err(_) => return Err(VerifyError::BadPackedSignature),
        }
        Ok(AccessToken {
            token_id: TokenId::random(),
            user_vk: p.user_vk.clone(),
            granted_at: now,
            expires_at: now.saturating_add(self.policy.token_ttl),
            granted_keys: p.disclosed.iter().map(|a| a.key().to_string()).collect(),
        })
    }

    /// Drops challenges whose TTL has passed, consumed or not.
    pub fn expire_challenges(&self) -> usize {
        let now = self.clock.now();
        let mut pending = self.pending.lock();
        let before = pending.len();
        pending.retain(|_, e| now < e.challenge.expires_at());
        before - pending.len()
    }

    pub fn validate_token(&self, token_id: &TokenId) -> bool {
        let now = self.clock.now();
        self.tokens.read().get(token_id).is_some_and(|t| now < t.expires_at)
    }

    pub fn pending_count(&self) -> usize {
        self.pending.lock().len()
    }

    /// Snapshot of the SP's stored records.
    pub fn state_snapshot(&self) -> SpState {
        SpState {
            challenges: self.pending.lock().values().cloned().collect(),
            tokens: self.tokens.read().values().cloned().collect(),
        }
    }

    fn dispatch(&self, method: Method, path: &str, body: &[u8]) -> Result<Body, ErrorBody> {
        let request = || -> Result<Body, ErrorBody> {
            match decode(body) {
                Ok(Envelope::Message(b)) => Ok(b),
                Ok(Envelope::Error { .. }) => Err(ErrorBody::new("bad-request", "request carries an error")),
                Err(e) => Err(ErrorBody::new("bad-request", e)),
            }
        };
        match (method, path) {
            (Method::Get, paths::POLICY) => Ok(Body::PolicyResp(PolicyResponse {
                service_name: self.policy.service_name.clone(),
                required: self.policy.required.clone(),
                idp_key_id: self.policy.idp_vk.key_id(),
            })),
            (Method::Post, paths::REQUEST_ACCESS) => match request()? {
                Body::ChallengeReq(r) => {
                    Ok(Body::ChallengeResp(ChallengeResponse { challenge: self.create_challenge(&r.user_vk) }))
                }
                other => Err(ErrorBody::new("bad-request", format!("unexpected message type {}", other.message_type()))),
            },
            (Method::Post, paths::PRESENT) => match request()? {
                Body::PresentReq(r) => self
                    .verify_presentation(&r.presentation, &r.nonce)
                    .map(|token| Body::PresentResp(PresentResponse { token }))
                    .map_err(|e| ErrorBody::new(e.code(), &e)),
                other => Err(ErrorBody::new("bad-request", format!("unexpected message type {}", other.message_type()))),
            },
            _ => Err(ErrorBody::new("not-found", format!("{} {path}", method.as_str()))),
        }
    }
}

/// A plain key needs the attribute disclosed; a predicate needs its
/// `proof:` statement disclosed with value `true`.
fn satisfied(required: &Predicate, p: &Presentation) -> bool {
    let key = required.statement_key();
    p.disclosed.iter().any(|a| {
        a.key() == key && (required.kind() == PredicateKind::Reveal || a.value() == "true")
    })
}

impl Service for ServiceProvider {
    fn handle(&self, method: Method, path: &str, body: &[u8]) -> Vec<u8> {
        let envelope = match self.dispatch(method, path, body) {
            Ok(b) => Envelope::Message(b),
            Err(error) => {
                let message_type = match path {
                    paths::REQUEST_ACCESS => MessageType::ChallengeResp,
                    paths::POLICY => MessageType::PolicyResp,
                    _ => MessageType::PresentResp,
                };
                Envelope::Error { message_type, error }
            }
        };
        encode(&envelope)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use super::*;
    use crate::clock::ManualClock;
    use crate::credential::{select_disclosure, Credential, UnsignedPresentation};
    use crate::crypto::{keygen, KeyPair, SignedMessage};
    use crate::idp::{IdentityProvider, NonceSignRequest};
    use crate::wire::RawAttribute;

    struct World {
        idp: IdentityProvider,
        user: KeyPair,
        credential: Credential,
        clock: ManualClock,
    }

    fn keys() -> &'static (KeyPair, KeyPair) {
        static K: OnceLock<(KeyPair, KeyPair)> = OnceLock::new();
        K.get_or_init(|| (keygen(1024).unwrap(), keygen(1024).unwrap()))
    }

    fn world() -> World {
        let clock = ManualClock::new(Timestamp::from_ymd_hms(2016, 6, 1, 12, 0, 0).unwrap());
        let (idp_key, user) = keys().clone();
        let idp = IdentityProvider::new(idp_key, Arc::new(clock.clone()));
        let attrs = [("full_name", "Alice Example"), ("country", "DE"), ("date_of_birth", "1990-04-12")]
            .map(|(k, v)| RawAttribute { key: k.into(), value: v.into() });
        let credential = idp.register(&attrs, user.verification_key(), Duration::from_secs(365 * 86400)).unwrap();
        World { idp, user, credential, clock }
    }

    fn sp(w: &World, required: Vec<Predicate>) -> ServiceProvider {
        let policy = ServicePolicy::new("test", required, w.idp.verification_key().clone()).unwrap();
        ServiceProvider::new(policy, Arc::new(w.clock.clone())).unwrap()
    }

    fn present(w: &World, sp: &ServiceProvider, keys: &[&str]) -> (Presentation, Nonce) {
        let ch = sp.create_challenge(w.user.verification_key());
        let signed_nonce = w
            .idp
            .sign_nonce(&NonceSignRequest { user_vk: w.user.verification_key().clone(), nonce: ch.nonce })
            .unwrap();
        let keys: BTreeSet<String> = keys.iter().map(|k| k.to_string()).collect();
        let (disclosed, packed) =
            select_disclosure(&w.credential, &keys, w.idp.verification_key().modulus()).unwrap();
        let p = UnsignedPresentation {
            disclosed,
            packed,
            user_vk: w.user.verification_key().clone(),
            expires_at: w.credential.expires_at(),
            timestamp: w.clock.now(),
            session_id: ch.session_id,
            signed_nonce,
        }
        .sign(w.user.signing_key(), ch.nonce.as_bytes());
        (p, ch.nonce)
    }

    fn reveal(keys: &[&str]) -> Vec<Predicate> {
        keys.iter().map(|k| Predicate::reveal(*k).unwrap()).collect()
    }

    #[test]
    fn challenges_are_fresh() {
        let w = world();
        let sp = sp(&w, reveal(&["country"]));
        let a = sp.create_challenge(w.user.verification_key());
        let b = sp.create_challenge(w.user.verification_key());
        assert_ne!(a.nonce, b.nonce);
        assert_ne!(a.session_id, b.session_id);
        assert_eq!(a.required, reveal(&["country"]));
    }

    #[test]
    fn honest_presentation_then_replay() {
        let w = world();
        let sp = sp(&w, reveal(&["country", "full_name"]));
        let (p, nonce) = present(&w, &sp, &["country", "full_name"]);
        let token = sp.verify_presentation(&p, &nonce).unwrap();
        assert_eq!(token.granted_keys, ["country", "full_name"]);
        assert!(sp.validate_token(&token.token_id));
        assert_eq!(sp.verify_presentation(&p, &nonce), Err(VerifyError::SessionConsumed));
        w.clock.advance(3600);
        assert!(!sp.validate_token(&token.token_id));
    }

    #[test]
    fn each_check_has_its_code() {
        let w = world();
        let sp = sp(&w, reveal(&["country"]));

        let (mut p, nonce) = present(&w, &sp, &["country"]);
        p.timestamp = p.timestamp.plus_seconds(1);
        assert_eq!(sp.verify_presentation(&p, &nonce).unwrap_err().code(), "bad-user-signature");

        let (p, _) = present(&w, &sp, &["country"]);
        let foreign = Nonce::random();
        assert_eq!(sp.verify_presentation(&p, &foreign).unwrap_err().code(), "bad-user-signature");

        let (p, nonce) = present(&w, &sp, &["full_name"]);
        assert_eq!(sp.verify_presentation(&p, &nonce), Err(VerifyError::MissingRequired(vec!["country".into()])));
        // A failed check leaves the session usable.
        assert_eq!(sp.verify_presentation(&p, &nonce).unwrap_err().code(), "missing-required");

        let (p, nonce) = present(&w, &sp, &["country"]);
        w.clock.advance(121);
        assert_eq!(sp.verify_presentation(&p, &nonce).unwrap_err().code(), "stale-timestamp");
        w.clock.advance(-121);

        let (mut p, nonce) = present(&w, &sp, &["country"]);
        p.packed.value = (&p.packed.value * 2u32) % w.idp.verification_key().modulus();
        let p = resign(&w, p, &nonce);
        assert_eq!(sp.verify_presentation(&p, &nonce).unwrap_err().code(), "bad-packed-signature");

        let (mut p, nonce) = present(&w, &sp, &["country"]);
        p.signed_nonce = SignedMessage { payload: p.signed_nonce.payload.clone(), signature: p.user_signature.clone() };
        let p = resign(&w, p, &nonce);
        assert_eq!(sp.verify_presentation(&p, &nonce).unwrap_err().code(), "bad-idp-nonce-signature");
    }

    fn resign(w: &World, p: Presentation, nonce: &Nonce) -> Presentation {
        UnsignedPresentation {
            disclosed: p.disclosed,
            packed: p.packed,
            user_vk: p.user_vk,
            expires_at: p.expires_at,
            timestamp: p.timestamp,
            session_id: p.session_id,
            signed_nonce: p.signed_nonce,
        }
        .sign(w.user.signing_key(), nonce.as_bytes())
    }

    #[test]
    fn expired_credential_and_challenge() {
        let w = world();
        let sp = sp(&w, reveal(&["country"]));
        let (p, nonce) = present(&w, &sp, &["country"]);
        w.clock.advance(301);
        assert_eq!(sp.verify_presentation(&p, &nonce), Err(VerifyError::UnknownSession));
        assert_eq!(sp.expire_challenges(), 0);
        assert_eq!(sp.pending_count(), 0);

        w.clock.set(w.credential.expires_at());
        let (p, nonce) = present(&w, &sp, &["country"]);
        assert_eq!(sp.verify_presentation(&p, &nonce), Err(VerifyError::CredentialExpired));
        w.clock.advance(400);
        assert_eq!(sp.expire_challenges(), 1);
    }

    #[test]
    fn concurrent_replays_yield_one_token() {
        let w = world();
        let sp = Arc::new(sp(&w, reveal(&["country"])));
        let (p, nonce) = present(&w, &sp, &["country"]);
        let handles: Vec<_> = (0..16)
            .map(|_| {
                let (sp, p) = (sp.clone(), p.clone());
                std::thread::spawn(move || sp.verify_presentation(&p, &nonce))
            })
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
        assert!(results.iter().filter_map(|r| r.as_ref().err()).all(|e| *e == VerifyError::SessionConsumed));
    }

    #[test]
    fn policy_validation() {
        let w = world();
        assert!(matches!(
            ServicePolicy::new("x", vec![], w.idp.verification_key().clone()),
            Err(PolicyError::EmptyRequirements)
        ));
        let p = ServicePolicy::new("x", vec![Predicate::age_over(16).unwrap()], w.idp.verification_key().clone()).unwrap();
        assert_eq!(p.required_keys().into_iter().collect::<Vec<_>>(), ["proof:age_over:16"]);
    }
}
