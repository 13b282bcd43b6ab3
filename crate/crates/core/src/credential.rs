//! Attributes, issued credentials and the presentations built from them.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use num_bigint::BigUint;
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::codec::{ParseError, ParseErrorKind, Reader, Writer};
use crate::crypto::{
    self, batch_verify, pack, verify_attribute, AttributeBinding, CryptoError, PackedSignature,
    Signature, SignedMessage, SigningKey, VerificationKey,
};

pub const MAX_KEY_LEN: usize = 64;
pub const MAX_VALUE_LEN: usize = 4096;
/// Reserved prefix for IdP-derived predicate statements.
pub const PROOF_PREFIX: &str = "proof:";

pub const FORMAT_VERSION: u8 = 0x01;
const KIND_CREDENTIAL: u8 = b'C';
const KIND_PRESENTATION: u8 = b'P';
const BODY_TAG: &str = "PRIMA-PRESENTATION-v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CredentialError {
    #[error("invalid attribute key {key:?}: {reason}")]
    InvalidKey { key: String, reason: &'static str },
    #[error("attribute value for {key:?} exceeds {MAX_VALUE_LEN} bytes")]
    ValueTooLong { key: String },
    #[error("credential has no attributes")]
    Empty,
    #[error("attribute and signature counts differ ({attributes} vs {signatures})")]
    LengthMismatch { attributes: usize, signatures: usize },
    #[error("duplicate attribute key {0:?}")]
    DuplicateKey(String),
    #[error("issuance time is not before expiry")]
    BadValidity,
    #[error("signature for attribute {key:?} does not verify")]
    BadSignature { key: String },
    #[error("requested attribute {0:?} is not in the credential")]
    MissingKey(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// A certified `key=value` pair.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Attribute {
    key: String,
    value: String,
}

fn check_key(key: &str) -> Result<(), CredentialError> {
    let fail = |reason| Err(CredentialError::InvalidKey { key: key.to_string(), reason });
    if key.is_empty() {
        return fail("empty key");
    }
    if key.len() > MAX_KEY_LEN {
        return fail("longer than 64 bytes");
    }
    if key.bytes().any(|b| !matches!(b, b'a'..=b'z' | b'0'..=b'9' | b'_' | b':')) {
        return fail("allowed characters are a-z, 0-9, '_' and ':'");
    }
    if key == PROOF_PREFIX {
        return fail("bare proof prefix");
    }
    Ok(())
}

impl Attribute {
    /// Builds an attribute from already-canonical parts.
    pub fn new(key: impl Into<String>, value: impl Into<String>) -> Result<Self, CredentialError> {
        let key = key.into();
        let value = value.into();
        check_key(&key)?;
        if value.len() > MAX_VALUE_LEN {
            return Err(CredentialError::ValueTooLong { key });
        }
        Ok(Attribute { key, value })
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    pub fn is_derived(&self) -> bool {
        self.key.starts_with(PROOF_PREFIX)
    }
}

impl fmt::Debug for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={:?}", self.key, self.value)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeWire {
    key: String,
    value: String,
}

impl<'de> Deserialize<'de> for Attribute {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = AttributeWire::deserialize(d)?;
        Attribute::new(w.key, w.value).map_err(serde::de::Error::custom)
    }
}

/// Trims both fields and lowercases the key, then validates it.
pub fn canonicalize_attribute(raw_key: &str, raw_value: &str) -> Result<Attribute, CredentialError> {
    Attribute::new(raw_key.trim().to_ascii_lowercase(), raw_value.trim())
}

/// An attribute together with its IdP signature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifiedAttribute {
    pub attribute: Attribute,
    pub signature: Signature,
}

/// An issued credential: attributes, index-aligned signatures, the holder's
/// verification key and the validity window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Credential {
    attributes: Vec<Attribute>,
    signatures: Vec<Signature>,
    user_vk: VerificationKey,
    issued_at: Timestamp,
    expires_at: Timestamp,
}

impl Credential {
    /// Builds a credential, rejecting it unless every signature verifies under `idp_vk`.
    pub fn new(
        attributes: Vec<Attribute>,
        signatures: Vec<Signature>,
        user_vk: VerificationKey,
        issued_at: Timestamp,
        expires_at: Timestamp,
        idp_vk: &VerificationKey,
    ) -> Result<Self, CredentialError> {
        let c = Credential::unverified(attributes, signatures, user_vk, issued_at, expires_at)?;
        c.verify(idp_vk)?;
        Ok(c)
    }

    /// Structural checks only. Callers must `verify` before trusting it.
    pub(crate) fn unverified(
        attributes: Vec<Attribute>,
        signatures: Vec<Signature>,
        user_vk: VerificationKey,
        issued_at: Timestamp,
        expires_at: Timestamp,
    ) -> Result<Self, CredentialError> {
        if attributes.is_empty() {
            return Err(CredentialError::Empty);
        }
        if attributes.len() != signatures.len() {
            return Err(CredentialError::LengthMismatch {
                attributes: attributes.len(),
                signatures: signatures.len(),
            });
        }
        if issued_at >= expires_at {
            return Err(CredentialError::BadValidity);
        }
        let mut keys = HashSet::with_capacity(attributes.len());
        for a in &attributes {
            if !keys.insert(a.key()) {
                return Err(CredentialError::DuplicateKey(a.key().to_string()));
            }
        }
        Ok(Credential { attributes, signatures, user_vk, issued_at, expires_at })
    }

    /// Checks every attribute signature individually.
    pub fn verify(&self, idp_vk: &VerificationKey) -> Result<(), CredentialError> {
        for (a, s) in self.attributes.iter().zip(&self.signatures) {
            if !verify_attribute(idp_vk, a, &self.user_vk, self.expires_at, s) {
                return Err(CredentialError::BadSignature { key: a.key().to_string() });
            }
        }
        Ok(())
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn signatures(&self) -> &[Signature] {
        &self.signatures
    }

    pub fn user_vk(&self) -> &VerificationKey {
        &self.user_vk
    }

    pub fn issued_at(&self) -> Timestamp {
        self.issued_at
    }

    pub fn expires_at(&self) -> Timestamp {
        self.expires_at
    }

    pub fn get(&self, key: &str) -> Option<(&Attribute, &Signature)> {
        self.attributes.iter().position(|a| a.key() == key).map(|i| (&self.attributes[i], &self.signatures[i]))
    }

    /// Returns a copy extended with extra certified attributes sharing this
    /// credential's holder and expiry. Keys already present are skipped.
    pub fn with_extra(&self, extra: &[CertifiedAttribute]) -> Credential {
        let mut out = self.clone();
        for c in extra {
            if out.get(c.attribute.key()).is_none() {
                out.attributes.push(c.attribute.clone());
                out.signatures.push(c.signature.clone());
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(FORMAT_VERSION).u8(KIND_CREDENTIAL);
        self.write_fields(&mut w);
        w.finish()
    }

    pub(crate) fn write_fields(&self, w: &mut Writer) {
        w.u32(self.attributes.len() as u32);
        for (a, s) in self.attributes.iter().zip(&self.signatures) {
            write_attribute(w, a);
            w.bytes(&s.to_bytes());
        }
        w.bytes(&self.user_vk.to_bytes());
        w.str(&self.issued_at.to_rfc3339());
        w.str(&self.expires_at.to_rfc3339());
    }

    /// Parses the binary form. The result is structurally valid but its
    /// signatures have not been checked.
    pub fn decode(bytes: &[u8]) -> Result<Self, ParseError> {
        let mut r = Reader::new(bytes);
        read_header(&mut r, KIND_CREDENTIAL)?;
        let c = Self::read_fields(&mut r)?;
        r.finish()?;
        Ok(c)
    }

    pub(crate) fn read_fields(r: &mut Reader<'_>) -> Result<Self, ParseError> {
        let start = r.offset();
        let n = r.u32()? as usize;
        let mut attributes = Vec::new();
        let mut signatures = Vec::new();
        for _ in 0..n {
            attributes.push(read_attribute(r)?);
            signatures.push(Signature::from_bytes(r.bytes()?));
        }
        let user_vk = VerificationKey::read(r)?;
        let issued_at = read_timestamp(r)?;
        let expires_at = read_timestamp(r)?;
        Credential::unverified(attributes, signatures, user_vk, issued_at, expires_at).map_err(|e| ParseError {
            offset: start,
            kind: ParseErrorKind::InvalidField(e.to_string()),
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CredentialWire {
    attributes: Vec<Attribute>,
    signatures: Vec<Signature>,
    user_vk: VerificationKey,
    issued_at: Timestamp,
    expires_at: Timestamp,
}

impl<'de> Deserialize<'de> for Credential {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = CredentialWire::deserialize(d)?;
        Credential::unverified(w.attributes, w.signatures, w.user_vk, w.issued_at, w.expires_at)
            .map_err(serde::de::Error::custom)
    }
}

pub(crate) fn write_attribute(w: &mut Writer, a: &Attribute) {
    w.str(a.key()).str(a.value());
}

pub(crate) fn read_attribute(r: &mut Reader<'_>) -> Result<Attribute, ParseError> {
    let start = r.offset();
    let key = r.string()?;
    let value = r.string()?;
    Attribute::new(key, value).map_err(|e| ParseError { offset: start, kind: ParseErrorKind::InvalidField(e.to_string()) })
}

pub(crate) fn read_timestamp(r: &mut Reader<'_>) -> Result<Timestamp, ParseError> {
    let start = r.offset();
    let text = r.string()?;
    Timestamp::parse_rfc3339(&text)
        .map_err(|e| ParseError { offset: start, kind: ParseErrorKind::InvalidField(e.to_string()) })
}

fn read_header(r: &mut Reader<'_>, kind: u8) -> Result<(), ParseError> {
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(ParseError { offset: 0, kind: ParseErrorKind::UnsupportedVersion(version) });
    }
    if r.u8()? != kind {
        return Err(ParseError { offset: 1, kind: ParseErrorKind::BadMagic });
    }
    Ok(())
}

/// Picks the requested attributes (sorted by key) and packs exactly their signatures.
pub fn select_disclosure(
    credential: &Credential,
    requested_keys: &BTreeSet<String>,
    idp_modulus: &BigUint,
) -> Result<(Vec<Attribute>, PackedSignature), CredentialError> {
    let mut disclosed = Vec::with_capacity(requested_keys.len());
    let mut sigs = Vec::with_capacity(requested_keys.len());
    for key in requested_keys {
        let (a, s) = credential.get(key).ok_or_else(|| CredentialError::MissingKey(key.clone()))?;
        disclosed.push(a.clone());
        sigs.push(s);
    }
    let packed = pack(sigs, idp_modulus)?;
    Ok((disclosed, packed))
}

macro_rules! random_id {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; 16]);

        impl $name {
            pub fn random() -> Self {
                let mut b = [0u8; 16];
                rand::rngs::OsRng.fill_bytes(&mut b);
                $name(b)
            }

            pub fn as_bytes(&self) -> &[u8; 16] {
                &self.0
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), hex::encode(self.0))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                crypto::b64_bytes::serialize(&self.0, s)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let raw = crypto::b64_bytes::deserialize(d)?;
                let arr: [u8; 16] = raw
                    .try_into()
                    .map_err(|_| serde::de::Error::custom(concat!(stringify!($name), " must be 16 bytes")))?;
                Ok($name(arr))
            }
        }
    };
}

random_id!(SessionId, "Opaque 16-byte session identifier chosen by a service provider.");
random_id!(Nonce, "Fresh 16-byte challenge value chosen by a service provider.");
random_id!(TokenId, "Opaque 16-byte access-token identifier.");

/// Everything in a presentation except the holder's signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnsignedPresentation {
    pub disclosed: Vec<Attribute>,
    pub packed: PackedSignature,
    pub user_vk: VerificationKey,
    pub expires_at: Timestamp,
    pub timestamp: Timestamp,
    pub session_id: SessionId,
    pub signed_nonce: SignedMessage,
}

impl UnsignedPresentation {
    pub fn body(&self, sp_nonce: &[u8]) -> Vec<u8> {
        presentation_body(
            &self.disclosed,
            &self.packed,
            &self.user_vk,
            self.expires_at,
            self.timestamp,
            &self.session_id,
            sp_nonce,
            &self.signed_nonce,
        )
    }

    pub fn sign(self, user_key: &SigningKey, sp_nonce: &[u8]) -> Presentation {
        let user_signature = crypto::sign_bytes(user_key, &self.body(sp_nonce));
        let UnsignedPresentation { disclosed, packed, user_vk, expires_at, timestamp, session_id, signed_nonce } = self;
        Presentation {
            disclosed,
            packed,
            user_vk,
            expires_at,
            timestamp,
            session_id,
            signed_nonce,
            user_signature,
        }
    }
}

/// What a user sends to a service provider at login.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Presentation {
    pub disclosed: Vec<Attribute>,
    pub packed: PackedSignature,
    pub user_vk: VerificationKey,
    pub expires_at: Timestamp,
    pub timestamp: Timestamp,
    pub session_id: SessionId,
    pub signed_nonce: SignedMessage,
    pub user_signature: Signature,
}

impl Presentation {
    /// The byte string the holder signs.
    pub fn body(&self, sp_nonce: &[u8]) -> Vec<u8> {
        presentation_body(
            &self.disclosed,
            &self.packed,
            &self.user_vk,
            self.expires_at,
            self.timestamp,
            &self.session_id,
            sp_nonce,
            &self.signed_nonce,
        )
    }

    pub fn verify_user_signature(&self, sp_nonce: &[u8]) -> bool {
        crypto::verify_bytes(&self.user_vk, &self.body(sp_nonce), &self.user_signature)
    }

    /// Batch-verifies the disclosed attributes against the packed signature.
    pub fn verify_packed(&self, idp_vk: &VerificationKey) -> Result<bool, CryptoError> {
        let bindings: Vec<_> = self
            .disclosed
            .iter()
            .map(|a| AttributeBinding { attribute: a, user_vk: &self.user_vk, t_exp: self.expires_at })
            .collect();
        batch_verify(idp_vk, &bindings, &self.packed)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(FORMAT_VERSION).u8(KIND_PRESENTATION);
        w.u32(self.disclosed.len() as u32);
        for a in &self.disclosed {
            write_attribute(&mut w, a);
        }
        w.bytes(&self.packed.value.to_bytes_be()).u32(self.packed.count);
        w.bytes(&self.user_vk.to_bytes());
        w.str(&self.expires_at.to_rfc3339()).str(&self.timestamp.to_rfc3339());
        w.bytes(self.session_id.as_bytes());
        w.bytes(&self.signed_nonce.payload).bytes(&self.signed_nonce.signature.to_bytes());
        w.bytes(&self.user_signature.to_bytes());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ParseError> {
        let mut r = Reader::new(bytes);
        read_header(&mut r, KIND_PRESENTATION)?;
        let n = r.u32()? as usize;
        let mut disclosed = Vec::new();
        for _ in 0..n {
            disclosed.push(read_attribute(&mut r)?);
        }
        let value = BigUint::from_bytes_be(r.bytes()?);
        let count = r.u32()?;
        let user_vk = VerificationKey::read(&mut r)?;
        let expires_at = read_timestamp(&mut r)?;
        let timestamp = read_timestamp(&mut r)?;
        let sid_at = r.offset();
        let session_id = SessionId(
            r.bytes()?
                .try_into()
                .map_err(|_| ParseError { offset: sid_at, kind: ParseErrorKind::InvalidField("session id length".into()) })?,
        );
        let payload = r.bytes()?.to_vec();
        let signature = Signature::from_bytes(r.bytes()?);
        let user_signature = Signature::from_bytes(r.bytes()?);
        r.finish()?;
        Ok(Presentation {
            disclosed,
            packed: PackedSignature { value, count },
            user_vk,
            expires_at,
            timestamp,
            session_id,
            signed_nonce: SignedMessage { payload, signature },
            user_signature,
        })
    }
}

/// Canonical signing target for the holder's presentation signature.
#[allow(clippy::too_many_arguments)]
pub fn presentation_body(
    disclosed: &[Attribute],
    packed: &PackedSignature,
    user_vk: &VerificationKey,
    expires_at: Timestamp,
    timestamp: Timestamp,
    session_id: &SessionId,
    sp_nonce: &[u8],
    signed_nonce: &SignedMessage,
) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(BODY_TAG);
    w.u32(disclosed.len() as u32);
    for a in disclosed {
        write_attribute(&mut w, a);
    }
    w.bytes(&packed.value.to_bytes_be()).u32(packed.count);
    w.bytes(&user_vk.to_bytes());
    w.str(&expires_at.to_rfc3339()).str(&timestamp.to_rfc3339());
    w.bytes(session_id.as_bytes());
    w.bytes(sp_nonce);
    w.bytes(&signed_nonce.payload).bytes(&signed_nonce.signature.to_bytes());
    w.finish()
}
