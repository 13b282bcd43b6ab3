//! Identity provider: certifies attributes at registration, signs login
//! nonces for active accounts, revokes accounts and hosts the inference
//! engine.
//!
//! Revocation takes effect at nonce signing. Credentials live with the user,
//! so the only point where the IdP can refuse a revoked account is the fresh
//! nonce signature every login needs.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Timestamp};
use crate::codec::Writer;
use crate::credential::{canonicalize_attribute, Attribute, CertifiedAttribute, Credential, CredentialError, Nonce};
use crate::crypto::{sign_attribute, KeyPair, Signature, SignedMessage, SigningKey, VerificationKey};
use crate::inference::{self, InferenceError, Predicate};
use crate::wire::{
    decode, encode, paths, Body, Envelope, ErrorBody, IdpKeyResponse, InferResponse, MessageType, Method,
    NonceSignResponse, RawAttribute, RegisterResponse, RevokeResponse, Service,
};

pub const NONCE_TAG: &str = "PRIMA-NONCE-v1";
/// Accepted distance between a signed request's timestamp and the IdP clock.
pub const DEFAULT_REQUEST_SKEW: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountStatus {
    Active,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountRecord {
    pub user_vk: VerificationKey,
    pub attributes: Vec<Attribute>,
    pub status: AccountStatus,
    pub registered_at: Timestamp,
    /// Expiry of the account's current credential; derived statements inherit it.
    pub expires_at: Timestamp,
}

/// What the IdP needs to sign a login nonce. Nothing in it refers to the
/// service provider that issued the nonce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonceSignRequest {
    pub user_vk: VerificationKey,
    pub nonce: Nonce,
}

impl NonceSignRequest {
    pub fn payload(&self) -> Vec<u8> {
        nonce_payload(&self.user_vk, &self.nonce)
    }
}

/// `len(tag) || len(vk_U) || len(nonce)`, the bytes under the IdP's nonce signature.
pub fn nonce_payload(user_vk: &VerificationKey, nonce: &Nonce) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(NONCE_TAG).bytes(&user_vk.to_bytes()).bytes(nonce.as_bytes());
    w.finish()
}

#[derive(Debug, Error)]
pub enum IdpError {
    #[error("account already registered")]
    DuplicateRegistration,
    #[error("duplicate attribute key {0:?}")]
    DuplicateAttribute(String),
    #[error("no attributes supplied")]
    EmptyAttributes,
    #[error("invalid attribute: {0}")]
    InvalidAttribute(CredentialError),
    #[error("attribute key {0:?} uses the reserved proof: prefix")]
    ReservedAttribute(String),
    #[error("validity must be positive")]
    InvalidValidity,
    #[error("attribute validation rejected the registration: {0}")]
    ValidationRejected(String),
    #[error("unknown account")]
    AccountUnknown,
    #[error("account is revoked")]
    AccountRevoked,
    #[error("too many requests for this account")]
    RateLimited,
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("journal I/O: {0}")]
    Journal(#[from] io::Error),
}

impl IdpError {
    pub fn code(&self) -> &'static str {
        match self {
            IdpError::DuplicateRegistration => "duplicate-registration",
            IdpError::DuplicateAttribute(_) => "duplicate-attribute",
            IdpError::EmptyAttributes => "empty-attributes",
            IdpError::InvalidAttribute(_) => "invalid-attribute",
            IdpError::ReservedAttribute(_) => "reserved-attribute",
            IdpError::InvalidValidity => "invalid-validity",
            IdpError::ValidationRejected(_) => "validation-rejected",
            IdpError::AccountUnknown => "account-unknown",
            IdpError::AccountRevoked => "account-revoked",
            IdpError::RateLimited => "rate-limited",
            IdpError::Inference(InferenceError::MissingAttribute(_)) => "missing-attribute",
            IdpError::Inference(InferenceError::NotSatisfied(_)) => "predicate-not-satisfied",
            IdpError::Inference(InferenceError::UnparsableDate { .. }) => "unparsable-date",
            IdpError::Inference(InferenceError::InvalidPredicate(_)) => "invalid-predicate",
            IdpError::Journal(_) => "internal",
        }
    }
}

/// Hook for out-of-band checking of attributes at registration.
pub trait AttributeValidator: Send + Sync {
    fn validate(&self, user_vk: &VerificationKey, attributes: &[Attribute]) -> Result<(), String>;
}

/// Accepts everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct AcceptAll;

impl AttributeValidator for AcceptAll {
    fn validate(&self, _: &VerificationKey, _: &[Attribute]) -> Result<(), String> {
        Ok(())
    }
}

/// Per-account token bucket for nonce signing.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    refill_per_sec: f64,
    buckets: Mutex<HashMap<Vec<u8>, (f64, Timestamp)>>,
}

impl RateLimiter {
    pub fn new(capacity: u32, refill_per_sec: f64) -> Self {
        RateLimiter { capacity: capacity as f64, refill_per_sec, buckets: Mutex::new(HashMap::new()) }
    }

    fn try_take(&self, account: &[u8], now: Timestamp) -> bool {
        let mut buckets = self.buckets.lock();
        let (tokens, last) = buckets.entry(account.to_vec()).or_insert((self.capacity, now));
        let elapsed = (now.unix() - last.unix()).max(0) as f64;
        *tokens = (*tokens + elapsed * self.refill_per_sec).min(self.capacity);
        *last = now;
        if *tokens >= 1.0 {
            *tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
enum JournalEntry {
    Register { record: AccountRecord },
    Revoke { user_vk: VerificationKey },
    Reinstate { user_vk: VerificationKey },
}

/// Append-only JSON-lines log of registry mutations.
struct Journal {
    file: File,
}

impl Journal {
    fn open(path: &Path) -> io::Result<(Self, Vec<JournalEntry>)> {
        let mut entries = Vec::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry = serde_json::from_str(&line).map_err(|e| {
                    io::Error::new(io::ErrorKind::InvalidData, format!("journal line {}: {e}", n + 1))
                })?;
                entries.push(entry);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((Journal { file }, entries))
    }

    fn append(&mut self, entry: &JournalEntry) -> io::Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}

/// Signs every attribute with `a_i || vk_U || t_exp` binding.
pub fn issue_signatures(
    key: &SigningKey,
    attributes: &[Attribute],
    user_vk: &VerificationKey,
    t_exp: Timestamp,
) -> Vec<Signature> {
    attributes.iter().map(|a| sign_attribute(key, a, user_vk, t_exp)).collect()
}

pub struct IdentityProvider {
    keypair: KeyPair,
    accounts: RwLock<HashMap<Vec<u8>, AccountRecord>>,
    journal: Option<Mutex<Journal>>,
    clock: Arc<dyn Clock>,
    validator: Box<dyn AttributeValidator>,
    limiter: Option<RateLimiter>,
    request_skew: Duration,
}

impl IdentityProvider {
    pub fn new(keypair: KeyPair, clock: Arc<dyn Clock>) -> Self {
        IdentityProvider {
            keypair,
            accounts: RwLock::new(HashMap::new()),
            journal: None,
            clock,
            validator: Box::new(AcceptAll),
            limiter: None,
            request_skew: DEFAULT_REQUEST_SKEW,
        }
    }

    /// Replays the journal at `path` (if any) and appends to it from now on.
    pub fn with_journal(mut self, path: &Path) -> io::Result<Self> {
        let (journal, entries) = Journal::open(path)?;
        {
            let mut accounts = self.accounts.write();
            for entry in entries {
                let (user_vk, status) = match entry {
                    JournalEntry::Register { record } => {
                        accounts.insert(record.user_vk.to_bytes(), record);
                        continue;
                    }
                    JournalEntry::Revoke { user_vk } => (user_vk, AccountStatus::Revoked),
                    JournalEntry::Reinstate { user_vk } => (user_vk, AccountStatus::Active),
                };
                let record = accounts
                    .get_mut(&user_vk.to_bytes())
                    .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "journal names unknown account"))?;
                record.status = status;
            }
        }
        self.journal = Some(Mutex::new(journal));
        Ok(self)
    }

    pub fn with_validator(mut self, validator: Box<dyn AttributeValidator>) -> Self {
        self.validator = validator;
        self
    }

    pub fn with_rate_limit(mut self, limiter: RateLimiter) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn with_request_skew(mut self, skew: Duration) -> Self {
        self.request_skew = skew;
        self
    }

    pub fn verification_key(&self) -> &VerificationKey {
        self.keypair.verification_key()
    }

    pub fn account(&self, user_vk: &VerificationKey) -> Option<AccountRecord> {
        self.accounts.read().get(&user_vk.to_bytes()).cloned()
    }

    pub fn account_count(&self) -> usize {
        self.accounts.read().len()
    }

    fn journal(&self, entry: &JournalEntry) -> Result<(), IdpError> {
        if let Some(j) = &self.journal {
            j.lock().append(entry)?;
        }
        Ok(())
    }

    /// Certifies `attributes` for the holder of `user_vk` and opens an account.
    pub fn register(
        &self,
        attributes: &[RawAttribute],
        user_vk: &VerificationKey,
        validity: Duration,
    ) -> Result<Credential, IdpError> {
        if attributes.is_empty() {
            return Err(IdpError::EmptyAttributes);
        }
        if validity.as_secs() == 0 {
            return Err(IdpError::InvalidValidity);
        }
        let mut canonical = Vec::with_capacity(attributes.len());
        let mut keys = HashSet::new();
        for raw in attributes {
            let a = canonicalize_attribute(&raw.key, &raw.value).map_err(IdpError::InvalidAttribute)?;
            if a.is_derived() {
                return Err(IdpError::ReservedAttribute(a.key().to_string()));
            }
            if !keys.insert(a.key().to_string()) {
                return Err(IdpError::DuplicateAttribute(a.key().to_string()));
            }
            canonical.push(a);
        }
        self.validator.validate(user_vk, &canonical).map_err(IdpError::ValidationRejected)?;

        let id = user_vk.to_bytes();
        if self.accounts.read().contains_key(&id) {
            return Err(IdpError::DuplicateRegistration);
        }
        let now = self.clock.now();
        let t_exp = now.saturating_add(validity);
        let signatures = issue_signatures(self.keypair.signing_key(), &canonical, user_vk, t_exp);
        let record = AccountRecord {
            user_vk: user_vk.clone(),
            attributes: canonical.clone(),
            status: AccountStatus::Active,
            registered_at: now,
            expires_at: t_exp,
        };
        {
            let mut accounts = self.accounts.write();
            if accounts.contains_key(&id) {
                return Err(IdpError::DuplicateRegistration);
            }
            self.journal(&JournalEntry::Register { record: record.clone() })?;
            accounts.insert(id, record);
        }
        Ok(Credential::unverified(canonical, signatures, user_vk.clone(), now, t_exp)
            .expect("canonical attributes, positive validity"))
    }

    fn active_account(&self, user_vk: &VerificationKey) -> Result<AccountRecord, IdpError> {
        let accounts = self.accounts.read();
        let record = accounts.get(&user_vk.to_bytes()).ok_or(IdpError::AccountUnknown)?;
        match record.status {
            AccountStatus::Active => Ok(record.clone()),
            AccountStatus::Revoked => Err(IdpError::AccountRevoked),
        }
    }

    /// Signs `tag || vk_U || nonce` if the account is active.
    pub fn sign_nonce(&self, request: &NonceSignRequest) -> Result<SignedMessage, IdpError> {
        self.active_account(&request.user_vk)?;
        if let Some(limiter) = &self.limiter {
            if !limiter.try_take(&request.user_vk.to_bytes(), self.clock.now()) {
                return Err(IdpError::RateLimited);
            }
        }
        Ok(SignedMessage::sign(self.keypair.signing_key(), request.payload()))
    }

    fn set_status(&self, user_vk: &VerificationKey, status: AccountStatus) -> Result<AccountStatus, IdpError> {
        let mut accounts = self.accounts.write();
        let record = accounts.get_mut(&user_vk.to_bytes()).ok_or(IdpError::AccountUnknown)?;
        let entry = match status {
            AccountStatus::Revoked => JournalEntry::Revoke { user_vk: user_vk.clone() },
            AccountStatus::Active => JournalEntry::Reinstate { user_vk: user_vk.clone() },
        };
        self.journal(&entry)?;
        record.status = status;
        Ok(status)
    }

    pub fn revoke(&self, user_vk: &VerificationKey) -> Result<AccountStatus, IdpError> {
        self.set_status(user_vk, AccountStatus::Revoked)
    }

    pub fn reinstate(&self, user_vk: &VerificationKey) -> Result<AccountStatus, IdpError> {
        self.set_status(user_vk, AccountStatus::Active)
    }

    /// Runs the inference engine over the stored attributes and signs each
    /// resulting statement with the account's current expiry.
    pub fn certify_derived(
        &self,
        user_vk: &VerificationKey,
        predicates: &[Predicate],
    ) -> Result<(Vec<CertifiedAttribute>, Timestamp), IdpError> {
        let record = self.active_account(user_vk)?;
        let now = self.clock.now();
        let mut out = Vec::with_capacity(predicates.len());
        for p in predicates {
            let statement = inference::evaluate(p, &record.attributes, now)?;
            let signature = sign_attribute(self.keypair.signing_key(), &statement.attribute, user_vk, record.expires_at);
            out.push(CertifiedAttribute { attribute: statement.attribute, signature });
        }
        Ok((out, record.expires_at))
    }

    fn fresh(&self, requested_at: Timestamp) -> bool {
        self.clock.now().abs_diff(requested_at) <= self.request_skew
    }

    fn dispatch(&self, method: Method, path: &str, body: &[u8]) -> Result<Body, ErrorBody> {
        let request = || -> Result<Body, ErrorBody> {
            match decode(body) {
                Ok(Envelope::Message(b)) => Ok(b),
                Ok(Envelope::Error { .. }) => Err(ErrorBody::new("bad-request", "request carries an error")),
                Err(e) => Err(ErrorBody::new("bad-request", e)),
            }
        };
        let fail = |e: IdpError| ErrorBody::new(e.code(), &e);
        let stale = || ErrorBody::new("stale-request", "request timestamp outside the accepted window");
        let unauthenticated = || ErrorBody::new("bad-request-signature", "request signature does not verify");
        match (method, path) {
            (Method::Get, paths::IDP_KEY) => {
                Ok(Body::IdpKeyResp(IdpKeyResponse { idp_vk: self.verification_key().clone() }))
            }
            (Method::Post, paths::REGISTER) => match request()? {
                Body::RegisterReq(r) => {
                    if !r.verify_signature() {
                        return Err(unauthenticated());
                    }
                    if !self.fresh(r.requested_at) {
                        return Err(stale());
                    }
                    let credential = self.register(&r.attributes, &r.user_vk, r.validity).map_err(fail)?;
                    Ok(Body::RegisterResp(RegisterResponse { credential }))
                }
                other => Err(wrong_type(other.message_type())),
            },
            (Method::Post, paths::SIGN_NONCE) => match request()? {
                Body::NonceSignReq(r) => {
                    if !r.verify_signature() {
                        return Err(unauthenticated());
                    }
                    if !self.fresh(r.requested_at) {
                        return Err(stale());
                    }
                    let signed_nonce = self
                        .sign_nonce(&NonceSignRequest { user_vk: r.user_vk, nonce: r.nonce })
                        .map_err(fail)?;
                    Ok(Body::NonceSignResp(NonceSignResponse { signed_nonce }))
                }
                other => Err(wrong_type(other.message_type())),
            },
            (Method::Post, paths::INFER) => match request()? {
                Body::InferReq(r) => {
                    if !r.verify_signature() {
                        return Err(unauthenticated());
                    }
                    if !self.fresh(r.requested_at) {
                        return Err(stale());
                    }
                    let (statements, expires_at) = self.certify_derived(&r.user_vk, &r.predicates).map_err(fail)?;
                    Ok(Body::InferResp(InferResponse { statements, expires_at }))
                }
                other => Err(wrong_type(other.message_type())),
            },
            (Method::Post, paths::REVOKE | paths::REINSTATE) => match request()? {
                Body::RevokeReq(r) => {
                    let status = if path == paths::REVOKE { self.revoke(&r.user_vk) } else { self.reinstate(&r.user_vk) };
                    Ok(Body::RevokeResp(RevokeResponse { status: status.map_err(fail)? }))
                }
                other => Err(wrong_type(other.message_type())),
            },
            _ => Err(ErrorBody::new("not-found", format!("{} {path}", method.as_str()))),
        }
    }
}

fn wrong_type(got: MessageType) -> ErrorBody {
    ErrorBody::new("bad-request", format!("unexpected message type {got}"))
}

fn response_type(path: &str) -> MessageType {
    match path {
        paths::REGISTER => MessageType::RegisterResp,
        paths::SIGN_NONCE => MessageType::NonceSignResp,
        paths::INFER => MessageType::InferResp,
        paths::REVOKE | paths::REINSTATE => MessageType::RevokeResp,
        _ => MessageType::IdpKeyResp,
    }
}

impl Service for IdentityProvider {
    fn handle(&self, method: Method, path: &str, body: &[u8]) -> Vec<u8> {
        let envelope = match self.dispatch(method, path, body) {
            Ok(b) => Envelope::Message(b),
            Err(error) => Envelope::Error { message_type: response_type(path), error },
        };
        encode(&envelope)
    }
}

/// Client-side helpers for the IdP endpoints.
pub mod client {
    use super::*;
    use crate::wire::{call, CallError, InferRequest, NonceSignMessage, RegisterRequest, RevokeRequest, Transport};

    pub fn fetch_key(idp: &dyn Transport) -> Result<VerificationKey, CallError> {
        match call(idp, Method::Get, paths::IDP_KEY, None, MessageType::IdpKeyResp)? {
            Body::IdpKeyResp(r) => Ok(r.idp_vk),
            _ => unreachable!("call checks the message type"),
        }
    }

    pub fn register(idp: &dyn Transport, request: RegisterRequest) -> Result<Credential, CallError> {
        match call(idp, Method::Post, paths::REGISTER, Some(Body::RegisterReq(request)), MessageType::RegisterResp)? {
            Body::RegisterResp(r) => Ok(r.credential),
            _ => unreachable!("call checks the message type"),
        }
    }

    pub fn sign_nonce(idp: &dyn Transport, request: NonceSignMessage) -> Result<SignedMessage, CallError> {
        match call(idp, Method::Post, paths::SIGN_NONCE, Some(Body::NonceSignReq(request)), MessageType::NonceSignResp)? {
            Body::NonceSignResp(r) => Ok(r.signed_nonce),
            _ => unreachable!("call checks the message type"),
        }
    }

    pub fn infer(idp: &dyn Transport, request: InferRequest) -> Result<InferResponse, CallError> {
        match call(idp, Method::Post, paths::INFER, Some(Body::InferReq(request)), MessageType::InferResp)? {
            Body::InferResp(r) => Ok(r),
            _ => unreachable!("call checks the message type"),
        }
    }

    pub fn set_status(idp: &dyn Transport, user_vk: &VerificationKey, revoke: bool) -> Result<AccountStatus, CallError> {
        let path = if revoke { paths::REVOKE } else { paths::REINSTATE };
        let body = Body::RevokeReq(RevokeRequest { user_vk: user_vk.clone() });
        match call(idp, Method::Post, path, Some(body), MessageType::RevokeResp)? {
            Body::RevokeResp(r) => Ok(r.status),
            _ => unreachable!("call checks the message type"),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use super::*;
    use crate::clock::ManualClock;
    use crate::crypto::{batch_verify, keygen, pack, AttributeBinding};

    fn idp_key() -> KeyPair {
        static K: OnceLock<KeyPair> = OnceLock::new();
        K.get_or_init(|| keygen(1024).unwrap()).clone()
    }

    fn user_key(i: usize) -> KeyPair {
        static K: OnceLock<Vec<KeyPair>> = OnceLock::new();
        K.get_or_init(|| (0..3).map(|_| keygen(1024).unwrap()).collect())[i].clone()
    }

    fn start() -> Timestamp {
        Timestamp::from_ymd_hms(2016, 6, 1, 12, 0, 0).unwrap()
    }

    fn idp() -> (IdentityProvider, ManualClock) {
        let clock = ManualClock::new(start());
        (IdentityProvider::new(idp_key(), Arc::new(clock.clone())), clock)
    }

    fn raw(pairs: &[(&str, &str)]) -> Vec<RawAttribute> {
        pairs.iter().map(|(k, v)| RawAttribute { key: k.to_string(), value: v.to_string() }).collect()
    }

    const YEAR: Duration = Duration::from_secs(365 * 86400);

    #[test]
    fn register_issues_verifying_credential() {
        let (idp, _) = idp();
        let u = user_key(0);
        let c = idp
            .register(&raw(&[("Name", "Alice"), ("country", "DE"), ("date_of_birth", "1990-04-12")]), u.verification_key(), YEAR)
            .unwrap();
        assert_eq!(c.attributes().len(), 3);
        assert_eq!(c.issued_at(), start());
        assert_eq!(c.expires_at(), start().saturating_add(YEAR));
        c.verify(idp.verification_key()).unwrap();
        let bindings: Vec<_> = c
            .attributes()
            .iter()
            .map(|a| AttributeBinding { attribute: a, user_vk: u.verification_key(), t_exp: c.expires_at() })
            .collect();
        let packed = pack(c.signatures(), idp.verification_key().modulus()).unwrap();
        assert!(batch_verify(idp.verification_key(), &bindings, &packed).unwrap());
        assert_eq!(c.attributes()[0].key(), "name");
    }

    #[test]
    fn register_errors() {
        let (idp, _) = idp();
        let vk = user_key(0).verification_key().clone();
        assert!(matches!(idp.register(&[], &vk, YEAR), Err(IdpError::EmptyAttributes)));
        assert!(matches!(
            idp.register(&raw(&[("country", "DE"), ("Country", "FR")]), &vk, YEAR),
            Err(IdpError::DuplicateAttribute(k)) if k == "country"
        ));
        assert!(matches!(
            idp.register(&raw(&[("proof:age_over:18", "true")]), &vk, YEAR),
            Err(IdpError::ReservedAttribute(_))
        ));
        assert!(matches!(idp.register(&raw(&[("bad key", "x")]), &vk, YEAR), Err(IdpError::InvalidAttribute(_))));
        idp.register(&raw(&[("country", "DE")]), &vk, YEAR).unwrap();
        assert!(matches!(idp.register(&raw(&[("country", "DE")]), &vk, YEAR), Err(IdpError::DuplicateRegistration)));
    }

    #[test]
    fn validator_hook_can_reject() {
        struct NoFr;
        impl AttributeValidator for NoFr {
            fn validate(&self, _: &VerificationKey, a: &[Attribute]) -> Result<(), String> {
                if a.iter().any(|a| a.value() == "FR") {
                    Err("unverifiable".into())
                } else {
                    Ok(())
                }
            }
        }
        let (idp, _) = idp();
        let idp = idp.with_validator(Box::new(NoFr));
        let err = idp.register(&raw(&[("country", "FR")]), user_key(0).verification_key(), YEAR).unwrap_err();
        assert_eq!(err.code(), "validation-rejected");
    }

    #[test]
    fn nonce_signing_follows_account_status() {
        let (idp, _) = idp();
        let vk = user_key(0).verification_key().clone();
        let req = NonceSignRequest { user_vk: vk.clone(), nonce: Nonce([9; 16]) };
        assert!(matches!(idp.sign_nonce(&req), Err(IdpError::AccountUnknown)));
        idp.register(&raw(&[("country", "DE")]), &vk, YEAR).unwrap();
        let signed = idp.sign_nonce(&req).unwrap();
        assert!(signed.verify(idp.verification_key()));
        assert_eq!(signed.payload, nonce_payload(&vk, &Nonce([9; 16])));

        assert_eq!(idp.revoke(&vk).unwrap(), AccountStatus::Revoked);
        assert!(matches!(idp.sign_nonce(&req), Err(IdpError::AccountRevoked)));
        assert_eq!(idp.reinstate(&vk).unwrap(), AccountStatus::Active);
        assert!(idp.sign_nonce(&req).is_ok());
        assert!(matches!(idp.revoke(user_key(1).verification_key()), Err(IdpError::AccountUnknown)));
    }

    #[test]
    fn rate_limiter_refills() {
        let (idp, clock) = idp();
        let idp = idp.with_rate_limit(RateLimiter::new(2, 1.0));
        let vk = user_key(0).verification_key().clone();
        idp.register(&raw(&[("country", "DE")]), &vk, YEAR).unwrap();
        let req = NonceSignRequest { user_vk: vk, nonce: Nonce([1; 16]) };
        assert!(idp.sign_nonce(&req).is_ok());
        assert!(idp.sign_nonce(&req).is_ok());
        assert!(matches!(idp.sign_nonce(&req), Err(IdpError::RateLimited)));
        clock.advance(1);
        assert!(idp.sign_nonce(&req).is_ok());
    }

    #[test]
    fn certify_derived_statements() {
        let (idp, _) = idp();
        let vk = user_key(0).verification_key().clone();
        idp.register(&raw(&[("date_of_birth", "1990-04-12"), ("country", "DE")]), &vk, YEAR).unwrap();
        let preds = [Predicate::age_over(16).unwrap(), Predicate::reveal("country").unwrap()];
        let (out, t_exp) = idp.certify_derived(&vk, &preds).unwrap();
        assert_eq!(out[0].attribute, Attribute::new("proof:age_over:16", "true").unwrap());
        assert_eq!(out[1].attribute, Attribute::new("country", "DE").unwrap());
        for c in &out {
            assert!(crate::crypto::verify_attribute(idp.verification_key(), &c.attribute, &vk, t_exp, &c.signature));
        }

        let other = user_key(1).verification_key().clone();
        idp.register(&raw(&[("country", "DE")]), &other, YEAR).unwrap();
        let err = idp.certify_derived(&other, &[Predicate::age_over(16).unwrap()]).unwrap_err();
        assert_eq!(err.code(), "missing-attribute");
        idp.revoke(&other).unwrap();
        assert_eq!(idp.certify_derived(&other, &[Predicate::registered()]).unwrap_err().code(), "account-revoked");
    }

    #[test]
    fn journal_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.jsonl");
        let vk0 = user_key(0).verification_key().clone();
        let vk1 = user_key(1).verification_key().clone();
        {
            let (idp, _) = idp();
            let idp = idp.with_journal(&path).unwrap();
            idp.register(&raw(&[("country", "DE")]), &vk0, YEAR).unwrap();
            idp.register(&raw(&[("country", "FR")]), &vk1, YEAR).unwrap();
            idp.revoke(&vk1).unwrap();
        }
        let (idp, _) = idp();
        let idp = idp.with_journal(&path).unwrap();
        assert_eq!(idp.account_count(), 2);
        assert_eq!(idp.account(&vk0).unwrap().status, AccountStatus::Active);
        assert_eq!(idp.account(&vk1).unwrap().status, AccountStatus::Revoked);
        assert!(matches!(idp.register(&raw(&[("x", "y")]), &vk0, YEAR), Err(IdpError::DuplicateRegistration)));
    }

    #[test]
    fn concurrent_registration_admits_one() {
        let (idp, _) = idp();
        let idp = Arc::new(idp);
        let vk = user_key(2).verification_key().clone();
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let idp = idp.clone();
                let vk = vk.clone();
                std::thread::spawn(move || idp.register(&raw(&[("country", "DE")]), &vk, YEAR).is_ok())
            })
            .collect();
        let wins = handles.into_iter().map(|h| h.join().unwrap()).filter(|ok| *ok).count();
        assert_eq!(wins, 1);
        assert_eq!(idp.account_count(), 1);
    }
}
