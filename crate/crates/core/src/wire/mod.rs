//! Message schemas, canonical encoding and transports.
//!
//! Every request and response is an [`Envelope`] encoded as JSON with
//! lexicographically sorted keys, unpadded base64url binary fields and
//! RFC 3339 timestamps. Schemas are closed: unknown or duplicate fields are
//! rejected on decode.

mod http;
mod transport;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::clock::{duration_secs, Timestamp};
use crate::codec::Writer;
use crate::credential::{CertifiedAttribute, Credential, Nonce, Presentation};
use crate::crypto::{self, KeyId, Signature, SignedMessage, SigningKey, VerificationKey};
use crate::idp::AccountStatus;
use crate::inference::Predicate;
use crate::sp::{AccessToken, Challenge};

pub use http::{HttpClient, HttpServer};
pub use transport::{
    call, loopback, CallError, Capture, CapturedMessage, Direction, LoopbackClient, LoopbackOptions, LoopbackServer,
    Method, Service, Transport, TransportError,
};

pub const WIRE_VERSION: u32 = 1;
pub const MAX_MESSAGE_BYTES: usize = 1 << 20;
pub const CONTENT_TYPE: &str = "application/prima+json; v=1";

pub mod paths {
    pub const REGISTER: &str = "/register";
    pub const SIGN_NONCE: &str = "/sign-nonce";
    pub const INFER: &str = "/infer";
    pub const REVOKE: &str = "/revoke";
    pub const REINSTATE: &str = "/reinstate";
    pub const IDP_KEY: &str = "/idp-key";
    pub const REQUEST_ACCESS: &str = "/request-access";
    pub const PRESENT: &str = "/present";
    pub const POLICY: &str = "/policy";
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("message of {0} bytes exceeds the 1 MiB limit")]
    Oversize(usize),
    #[error("unsupported wire version {0}")]
    UnknownVersion(u32),
    #[error("unknown message type {0:?}")]
    UnknownMessageType(String),
    #[error("envelope must carry exactly one of body or error")]
    BodyErrorConflict,
    #[error("malformed message: {0}")]
    Malformed(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    RegisterReq,
    RegisterResp,
    ChallengeReq,
    ChallengeResp,
    NonceSignReq,
    NonceSignResp,
    InferReq,
    InferResp,
    PresentReq,
    PresentResp,
    RevokeReq,
    RevokeResp,
    IdpKeyResp,
    PolicyResp,
}

impl MessageType {
    pub const ALL: [MessageType; 14] = [
        MessageType::RegisterReq,
        MessageType::RegisterResp,
        MessageType::ChallengeReq,
        MessageType::ChallengeResp,
        MessageType::NonceSignReq,
        MessageType::NonceSignResp,
        MessageType::InferReq,
        MessageType::InferResp,
        MessageType::PresentReq,
        MessageType::PresentResp,
        MessageType::RevokeReq,
        MessageType::RevokeResp,
        MessageType::IdpKeyResp,
        MessageType::PolicyResp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageType::RegisterReq => "register-req",
            MessageType::RegisterResp => "register-resp",
            MessageType::ChallengeReq => "challenge-req",
            MessageType::ChallengeResp => "challenge-resp",
            MessageType::NonceSignReq => "nonce-sign-req",
            MessageType::NonceSignResp => "nonce-sign-resp",
            MessageType::InferReq => "infer-req",
            MessageType::InferResp => "infer-resp",
            MessageType::PresentReq => "present-req",
            MessageType::PresentResp => "present-resp",
            MessageType::RevokeReq => "revoke-req",
            MessageType::RevokeResp => "revoke-resp",
            MessageType::IdpKeyResp => "idp-key-resp",
            MessageType::PolicyResp => "policy-resp",
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageType {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| WireError::UnknownMessageType(s.to_string()))
    }
}

/// `{key, value}` as typed by the user, before canonicalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAttribute {
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterRequest {
    pub user_vk: VerificationKey,
    pub attributes: Vec<RawAttribute>,
    #[serde(with = "duration_secs")]
    pub validity: Duration,
    pub requested_at: Timestamp,
    /// Proof of possession of the user's signing key.
    pub user_signature: Signature,
}

impl RegisterRequest {
    pub fn signed(
        key: &SigningKey,
        attributes: Vec<RawAttribute>,
        validity: Duration,
        requested_at: Timestamp,
    ) -> Self {
        let user_vk = key.verification_key().clone();
        let payload = Self::signing_payload(&user_vk, &attributes, validity, requested_at);
        RegisterRequest { user_vk, attributes, validity, requested_at, user_signature: crypto::sign_bytes(key, &payload) }
    }

    pub fn signing_payload(
        user_vk: &VerificationKey,
        attributes: &[RawAttribute],
        validity: Duration,
        requested_at: Timestamp,
    ) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("PRIMA-REGISTER-v1").bytes(&user_vk.to_bytes()).u32(attributes.len() as u32);
        for a in attributes {
            w.str(&a.key).str(&a.value);
        }
        w.u64(validity.as_secs()).str(&requested_at.to_rfc3339());
        w.finish()
    }

    pub fn verify_signature(&self) -> bool {
        let payload = Self::signing_payload(&self.user_vk, &self.attributes, self.validity, self.requested_at);
        crypto::verify_bytes(&self.user_vk, &payload, &self.user_signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterResponse {
    pub credential: Credential,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChallengeRequest {
    pub user_vk: VerificationKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChallengeResponse {
    pub challenge: Challenge,
}

/// Nonce-signing request as sent to the IdP. Carries only the user's key,
/// the nonce and the user's authentication of the request; there is no field
/// that could name the service provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonceSignMessage {
    pub user_vk: VerificationKey,
    pub nonce: Nonce,
    pub requested_at: Timestamp,
    pub user_signature: Signature,
}

impl NonceSignMessage {
    pub fn signed(key: &SigningKey, nonce: Nonce, requested_at: Timestamp) -> Self {
        let user_vk = key.verification_key().clone();
        let payload = Self::signing_payload(&user_vk, &nonce, requested_at);
        NonceSignMessage { user_vk, nonce, requested_at, user_signature: crypto::sign_bytes(key, &payload) }
    }

    pub fn signing_payload(user_vk: &VerificationKey, nonce: &Nonce, requested_at: Timestamp) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("PRIMA-NONCE-REQ-v1")
            .bytes(&user_vk.to_bytes())
            .bytes(nonce.as_bytes())
            .str(&requested_at.to_rfc3339());
        w.finish()
    }

    pub fn verify_signature(&self) -> bool {
        let payload = Self::signing_payload(&self.user_vk, &self.nonce, self.requested_at);
        crypto::verify_bytes(&self.user_vk, &payload, &self.user_signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonceSignResponse {
    pub signed_nonce: SignedMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    pub user_vk: VerificationKey,
    pub predicates: Vec<Predicate>,
    pub requested_at: Timestamp,
    pub user_signature: Signature,
}

impl InferRequest {
    pub fn signed(key: &SigningKey, predicates: Vec<Predicate>, requested_at: Timestamp) -> Self {
        let user_vk = key.verification_key().clone();
        let payload = Self::signing_payload(&user_vk, &predicates, requested_at);
        InferRequest { user_vk, predicates, requested_at, user_signature: crypto::sign_bytes(key, &payload) }
    }

    pub fn signing_payload(user_vk: &VerificationKey, predicates: &[Predicate], requested_at: Timestamp) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("PRIMA-INFER-v1").bytes(&user_vk.to_bytes()).u32(predicates.len() as u32);
        for p in predicates {
            w.str(p.kind().as_str()).str(p.key()).str(p.parameter());
        }
        w.str(&requested_at.to_rfc3339());
        w.finish()
    }

    pub fn verify_signature(&self) -> bool {
        let payload = Self::signing_payload(&self.user_vk, &self.predicates, self.requested_at);
        crypto::verify_bytes(&self.user_vk, &payload, &self.user_signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferResponse {
    pub statements: Vec<CertifiedAttribute>,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresentRequest {
    pub presentation: Presentation,
    pub nonce: Nonce,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresentResponse {
    pub token: AccessToken,
}

/// Body of both `/revoke` and `/reinstate`; the path selects the action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevokeRequest {
    pub user_vk: VerificationKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevokeResponse {
    pub status: AccountStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdpKeyResponse {
    pub idp_vk: VerificationKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyResponse {
    pub service_name: String,
    pub required: Vec<Predicate>,
    pub idp_key_id: KeyId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    RegisterReq(RegisterRequest),
    RegisterResp(RegisterResponse),
    ChallengeReq(ChallengeRequest),
    ChallengeResp(ChallengeResponse),
    NonceSignReq(NonceSignMessage),
    NonceSignResp(NonceSignResponse),
    InferReq(InferRequest),
    InferResp(InferResponse),
    PresentReq(PresentRequest),
    PresentResp(PresentResponse),
    RevokeReq(RevokeRequest),
    RevokeResp(RevokeResponse),
    IdpKeyResp(IdpKeyResponse),
    PolicyResp(PolicyResponse),
}

impl Body {
    pub fn message_type(&self) -> MessageType {
        match self {
            Body::RegisterReq(_) => MessageType::RegisterReq,
            Body::RegisterResp(_) => MessageType::RegisterResp,
            Body::ChallengeReq(_) => MessageType::ChallengeReq,
            Body::ChallengeResp(_) => MessageType::ChallengeResp,
            Body::NonceSignReq(_) => MessageType::NonceSignReq,
            Body::NonceSignResp(_) => MessageType::NonceSignResp,
            Body::InferReq(_) => MessageType::InferReq,
            Body::InferResp(_) => MessageType::InferResp,
            Body::PresentReq(_) => MessageType::PresentReq,
            Body::PresentResp(_) => MessageType::PresentResp,
            Body::RevokeReq(_) => MessageType::RevokeReq,
            Body::RevokeResp(_) => MessageType::RevokeResp,
            Body::IdpKeyResp(_) => MessageType::IdpKeyResp,
            Body::PolicyResp(_) => MessageType::PolicyResp,
        }
    }

    fn to_value(&self) -> serde_json::Value {
        let v = match self {
            Body::RegisterReq(b) => serde_json::to_value(b),
            Body::RegisterResp(b) => serde_json::to_value(b),
            Body::ChallengeReq(b) => serde_json::to_value(b),
            Body::ChallengeResp(b) => serde_json::to_value(b),
            Body::NonceSignReq(b) => serde_json::to_value(b),
            Body::NonceSignResp(b) => serde_json::to_value(b),
            Body::InferReq(b) => serde_json::to_value(b),
            Body::InferResp(b) => serde_json::to_value(b),
            Body::PresentReq(b) => serde_json::to_value(b),
            Body::PresentResp(b) => serde_json::to_value(b),
            Body::RevokeReq(b) => serde_json::to_value(b),
            Body::RevokeResp(b) => serde_json::to_value(b),
            Body::IdpKeyResp(b) => serde_json::to_value(b),
            Body::PolicyResp(b) => serde_json::to_value(b),
        };
        v.expect("message bodies serialize infallibly")
    }

    fn parse(message_type: MessageType, raw: &str) -> Result<Body, serde_json::Error> {
        fn p<T: DeserializeOwned>(raw: &str) -> Result<T, serde_json::Error> {
            serde_json::from_str(raw)
        }
        Ok(match message_type {
            MessageType::RegisterReq => Body::RegisterReq(p(raw)?),
            MessageType::RegisterResp => Body::RegisterResp(p(raw)?),
            MessageType::ChallengeReq => Body::ChallengeReq(p(raw)?),
            MessageType::ChallengeResp => Body::ChallengeResp(p(raw)?),
            MessageType::NonceSignReq => Body::NonceSignReq(p(raw)?),
            MessageType::NonceSignResp => Body::NonceSignResp(p(raw)?),
            MessageType::InferReq => Body::InferReq(p(raw)?),
            MessageType::InferResp => Body::InferResp(p(raw)?),
            MessageType::PresentReq => Body::PresentReq(p(raw)?),
            MessageType::PresentResp => Body::PresentResp(p(raw)?),
            MessageType::RevokeReq => Body::RevokeReq(p(raw)?),
            MessageType::RevokeResp => Body::RevokeResp(p(raw)?),
            MessageType::IdpKeyResp => Body::IdpKeyResp(p(raw)?),
            MessageType::PolicyResp => Body::PolicyResp(p(raw)?),
        })
    }
}

/// Error carried in place of a body: a stable kebab-case code plus detail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(deny_unknown_fields)]
#[error("{code}: {detail}")]
pub struct ErrorBody {
    pub code: String,
    pub detail: String,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, detail: impl fmt::Display) -> Self {
        ErrorBody { code: code.into(), detail: detail.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Envelope {
    Message(Body),
    Error { message_type: MessageType, error: ErrorBody },
}

impl Envelope {
    pub fn message_type(&self) -> MessageType {
        match self {
            Envelope::Message(b) => b.message_type(),
            Envelope::Error { message_type, .. } => *message_type,
        }
    }

    pub fn into_result(self) -> Result<Body, ErrorBody> {
        match self {
            Envelope::Message(b) => Ok(b),
            Envelope::Error { error, .. } => Err(error),
        }
    }
}

impl From<Body> for Envelope {
    fn from(b: Body) -> Self {
        Envelope::Message(b)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvelope<'a> {
    version: u32,
    message_type: String,
    #[serde(borrow, default)]
    body: Option<&'a RawValue>,
    #[serde(default)]
    error: Option<ErrorBody>,
}

/// Canonical bytes: sorted keys, no insignificant whitespace.
pub fn encode(envelope: &Envelope) -> Vec<u8> {
    let mut obj = serde_json::Map::new();
    obj.insert("version".into(), WIRE_VERSION.into());
    obj.insert("message_type".into(), envelope.message_type().as_str().into());
    match envelope {
        Envelope::Message(b) => {
            obj.insert("body".into(), b.to_value());
        }
        Envelope::Error { error, .. } => {
            obj.insert("error".into(), serde_json::to_value(error).expect("error body serializes"));
        }
    }
    serde_json::to_vec(&serde_json::Value::Object(obj)).expect("value serializes")
}

pub fn decode(bytes: &[u8]) -> Result<Envelope, WireError> {
    if bytes.len() > MAX_MESSAGE_BYTES {
        return Err(WireError::Oversize(bytes.len()));
    }
    let raw: RawEnvelope<'_> = serde_json::from_slice(bytes)?;
    if raw.version != WIRE_VERSION {
        return Err(WireError::UnknownVersion(raw.version));
    }
    let message_type: MessageType = raw.message_type.parse()?;
    match (raw.body, raw.error) {
        (Some(body), None) => Ok(Envelope::Message(Body::parse(message_type, body.get())?)),
        (None, Some(error)) => Ok(Envelope::Error { message_type, error }),
        _ => Err(WireError::BodyErrorConflict),
    }
}
