//! RSA full-domain-hash signatures with multiplicative packing.
//!
//! Attribute signatures are `H*(encode_attribute(a, vk_U, t_exp))^d mod n`.
//! Because the map `x -> x^e` is multiplicative, a product of signatures
//! under one key verifies against the product of the hashed messages with a
//! single public exponentiation.

use std::cell::Cell;
use std::collections::HashSet;
use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::codec::{ParseError, ParseErrorKind, Reader, Writer};
use crate::credential::Attribute;

pub const SUPPORTED_MODULUS_BITS: [usize; 4] = [1024, 2048, 3072, 4096];
pub const DEFAULT_MODULUS_BITS: usize = 2048;
pub const PUBLIC_EXPONENT: u32 = 65537;

const FDH_TAG: &[u8] = b"PRIMA-FDH-v1";
const PURPOSE_ATTRIBUTE: &[u8] = b"attribute";
const PURPOSE_MESSAGE: &[u8] = b"message";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("unsupported modulus size {0} bits")]
    UnsupportedModulusSize(usize),
    #[error("key generation failed: {0}")]
    KeyGeneration(String),
    #[error("invalid key material: {0}")]
    InvalidKey(String),
    #[error("signature is not reduced modulo the signer's modulus")]
    SignatureOutOfRange,
    #[error("duplicate bound message at position {0}")]
    DuplicateMessage(usize),
}

thread_local! {
    static ATTRIBUTE_EXPS: Cell<u64> = const { Cell::new(0) };
    static MESSAGE_EXPS: Cell<u64> = const { Cell::new(0) };
}

/// Public-exponent exponentiations performed on the current thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExponentiationCount {
    /// Exponentiations spent verifying attribute signatures (single or packed).
    pub attribute: u64,
    /// Exponentiations spent verifying byte-payload signatures.
    pub message: u64,
}

impl ExponentiationCount {
    pub fn total(&self) -> u64 {
        self.attribute + self.message
    }
}

pub fn exponentiation_count() -> ExponentiationCount {
    ExponentiationCount {
        attribute: ATTRIBUTE_EXPS.with(Cell::get),
        message: MESSAGE_EXPS.with(Cell::get),
    }
}

pub fn reset_exponentiation_count() {
    ATTRIBUTE_EXPS.with(|c| c.set(0));
    MESSAGE_EXPS.with(|c| c.set(0));
}

fn b64(bytes: &[u8]) -> String {
    URL_SAFE_NO_PAD.encode(bytes)
}

fn unb64<E: serde::de::Error>(text: &str) -> Result<Vec<u8>, E> {
    URL_SAFE_NO_PAD.decode(text).map_err(E::custom)
}

fn serialize_biguint<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&b64(&v.to_bytes_be()))
}

fn deserialize_biguint<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
    let text = String::deserialize(d)?;
    Ok(BigUint::from_bytes_be(&unb64::<D::Error>(&text)?))
}

/// Public half of a key pair: `{modulus, exponent}`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct VerificationKey {
    modulus: BigUint,
    exponent: BigUint,
}

impl VerificationKey {
    pub fn new(modulus: BigUint, exponent: BigUint) -> Result<Self, CryptoError> {
        let bits = modulus.bits() as usize;
        if !SUPPORTED_MODULUS_BITS.contains(&bits) {
            return Err(CryptoError::UnsupportedModulusSize(bits));
        }
        if modulus.is_even() {
            return Err(CryptoError::InvalidKey("even modulus".into()));
        }
        if exponent < BigUint::from(3u32) || exponent.is_even() || exponent >= modulus {
            return Err(CryptoError::InvalidKey("bad public exponent".into()));
        }
        Ok(VerificationKey { modulus, exponent })
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    pub fn exponent(&self) -> &BigUint {
        &self.exponent
    }

    pub fn modulus_bits(&self) -> usize {
        self.modulus.bits() as usize
    }

    /// Canonical bytes: length-prefixed modulus then exponent, both big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.modulus.to_bytes_be()).bytes(&self.exponent.to_bytes_be());
        w.finish()
    }

    /// Reads a length-prefixed key blob as written by `Writer::bytes(&vk.to_bytes())`.
    pub fn read(r: &mut Reader<'_>) -> Result<Self, ParseError> {
        let start = r.offset();
        let blob = r.bytes()?;
        Self::from_bytes(blob).map_err(|mut e| {
            e.offset += start + 4;
            e
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ParseError> {
        let mut r = Reader::new(bytes);
        let modulus = BigUint::from_bytes_be(r.bytes()?);
        let exponent = BigUint::from_bytes_be(r.bytes()?);
        r.finish()?;
        VerificationKey::new(modulus, exponent).map_err(|e| ParseError {
            offset: 0,
            kind: crate::codec::ParseErrorKind::InvalidField(e.to_string()),
        })
    }

    pub fn key_id(&self) -> KeyId {
        let digest = Sha256::digest(self.to_bytes());
        let mut id = [0u8; 8];
        id.copy_from_slice(&digest[..8]);
        KeyId(id)
    }

    fn public_op(&self, value: &BigUint) -> BigUint {
        value.modpow(&self.exponent, &self.modulus)
    }
}

impl fmt::Debug for VerificationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerificationKey({}, {} bits)", self.key_id(), self.modulus_bits())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerificationKeyWire {
    #[serde(serialize_with = "serialize_biguint", deserialize_with = "deserialize_biguint")]
    modulus: BigUint,
    #[serde(serialize_with = "serialize_biguint", deserialize_with = "deserialize_biguint")]
    exponent: BigUint,
}

impl Serialize for VerificationKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        VerificationKeyWire { modulus: self.modulus.clone(), exponent: self.exponent.clone() }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for VerificationKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = VerificationKeyWire::deserialize(d)?;
        VerificationKey::new(w.modulus, w.exponent).map_err(serde::de::Error::custom)
    }
}

/// Short fingerprint of a verification key (first 8 bytes of its SHA-256).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyId(pub [u8; 8]);

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({self})")
    }
}

impl std::str::FromStr for KeyId {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut id = [0u8; 8];
        hex::decode_to_slice(s, &mut id)?;
        Ok(KeyId(id))
    }
}

impl Serialize for KeyId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KeyId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Private half, kept in CRT form.
#[derive(Clone)]
pub struct SigningKey {
    public: VerificationKey,
    private_exponent: BigUint,
    p: BigUint,
    q: BigUint,
    dp: BigUint,
    dq: BigUint,
    q_inv: BigUint,
}

impl SigningKey {
    pub fn from_components(
        modulus: BigUint,
        public_exponent: BigUint,
        private_exponent: BigUint,
        p: BigUint,
        q: BigUint,
    ) -> Result<Self, CryptoError> {
        let public = VerificationKey::new(modulus, public_exponent)?;
        if &p * &q != public.modulus || p.is_one() || q.is_one() {
            return Err(CryptoError::InvalidKey("primes do not multiply to modulus".into()));
        }
        let one = BigUint::one();
        let dp = &private_exponent % (&p - &one);
        let dq = &private_exponent % (&q - &one);
        let q_inv = q
            .modinv(&p)
            .ok_or_else(|| CryptoError::InvalidKey("q not invertible mod p".into()))?;
        let key = SigningKey { public, private_exponent, p, q, dp, dq, q_inv };
        if !key.derive_check() {
            return Err(CryptoError::InvalidKey("private exponent does not invert public exponent".into()));
        }
        Ok(key)
    }

    pub fn verification_key(&self) -> &VerificationKey {
        &self.public
    }

    /// Checks that the private exponent inverts the public one on a fixed element.
    pub fn derive_check(&self) -> bool {
        let probe = BigUint::from(0x5052_494du32) % &self.public.modulus;
        let there = probe.modpow(&self.private_exponent, &self.public.modulus);
        self.public.public_op(&there) == probe
    }

    fn private_op(&self, value: &BigUint) -> BigUint {
        let m1 = value.modpow(&self.dp, &self.p);
        let m2 = value.modpow(&self.dq, &self.q);
        let diff = if m1 >= m2 { m1 - &m2 } else { &self.p - ((m2.clone() - m1) % &self.p) };
        let h = (&self.q_inv * diff) % &self.p;
        m2 + h * &self.q
    }

    fn to_wire(&self) -> SigningKeyWire {
        SigningKeyWire {
            modulus: self.public.modulus.clone(),
            public_exponent: self.public.exponent.clone(),
            private_exponent: self.private_exponent.clone(),
            prime_p: self.p.clone(),
            prime_q: self.q.clone(),
        }
    }
}

impl PartialEq for SigningKey {
    fn eq(&self, other: &Self) -> bool {
        self.public == other.public && self.private_exponent == other.private_exponent && self.p == other.p
    }
}

impl Eq for SigningKey {}

impl SigningKey {
    /// Length-prefixed `n || e || d || p || q`.
    pub fn write(&self, w: &mut Writer) {
        for part in [&self.public.modulus, &self.public.exponent, &self.private_exponent, &self.p, &self.q] {
            w.bytes(&part.to_bytes_be());
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, ParseError> {
        let start = r.offset();
        let mut parts = Vec::with_capacity(5);
        for _ in 0..5 {
            parts.push(BigUint::from_bytes_be(r.bytes()?));
        }
        let [n, e, d, p, q]: [BigUint; 5] = parts.try_into().expect("five parts");
        SigningKey::from_components(n, e, d, p, q)
            .map_err(|e| ParseError { offset: start, kind: ParseErrorKind::InvalidField(e.to_string()) })
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigningKey({})", self.public.key_id())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SigningKeyWire {
    #[serde(serialize_with = "serialize_biguint", deserialize_with = "deserialize_biguint")]
    modulus: BigUint,
    #[serde(serialize_with = "serialize_biguint", deserialize_with = "deserialize_biguint")]
    public_exponent: BigUint,
    #[serde(serialize_with = "serialize_biguint", deserialize_with = "deserialize_biguint")]
    private_exponent: BigUint,
    #[serde(serialize_with = "serialize_biguint", deserialize_with = "deserialize_biguint")]
    prime_p: BigUint,
    #[serde(serialize_with = "serialize_biguint", deserialize_with = "deserialize_biguint")]
    prime_q: BigUint,
}

impl Serialize for SigningKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_wire().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SigningKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = SigningKeyWire::deserialize(d)?;
        SigningKey::from_components(w.modulus, w.public_exponent, w.private_exponent, w.prime_p, w.prime_q)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    signing_key: SigningKey,
    modulus_bits: usize,
}

impl KeyPair {
    pub fn from_signing_key(signing_key: SigningKey) -> Self {
        let modulus_bits = signing_key.public.modulus_bits();
        KeyPair { signing_key, modulus_bits }
    }

    pub fn signing_key(&self) -> &SigningKey {
        &self.signing_key
    }

    pub fn verification_key(&self) -> &VerificationKey {
        &self.signing_key.public
    }

    pub fn modulus_bits(&self) -> usize {
        self.modulus_bits
    }
}

impl Serialize for KeyPair {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.signing_key.serialize(s)
    }
}

impl<'de> Deserialize<'de> for KeyPair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        SigningKey::deserialize(d).map(KeyPair::from_signing_key)
    }
}

/// Generates a fresh RSA key pair with public exponent 65537.
pub fn keygen(modulus_bits: usize) -> Result<KeyPair, CryptoError> {
    use rsa::traits::{PrivateKeyParts, PublicKeyParts};

    if !SUPPORTED_MODULUS_BITS.contains(&modulus_bits) {
        return Err(CryptoError::UnsupportedModulusSize(modulus_bits));
    }
    if modulus_bits == 1024 {
        log::warn!("1024-bit keys are below current security margins; use them for benchmarks only");
    }
    let mut rng = rand::rngs::OsRng;
    let key = rsa::RsaPrivateKey::new(&mut rng, modulus_bits)
        .map_err(|e| CryptoError::KeyGeneration(e.to_string()))?;
    let conv = |v: &rsa::BigUint| BigUint::from_bytes_be(&v.to_bytes_be());
    let primes = key.primes();
    if primes.len() != 2 {
        return Err(CryptoError::KeyGeneration("expected two primes".into()));
    }
    let signing_key = SigningKey::from_components(
        conv(key.n()),
        conv(key.e()),
        conv(key.d()),
        conv(&primes[0]),
        conv(&primes[1]),
    )?;
    Ok(KeyPair::from_signing_key(signing_key))
}

/// A signature value; must lie in `(0, n)` for the producing key.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature(BigUint);

impl Signature {
    pub fn from_biguint(value: BigUint) -> Self {
        Signature(value)
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes_be()
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Signature(BigUint::from_bytes_be(bytes))
    }

    fn in_range(&self, modulus: &BigUint) -> bool {
        !self.0.is_zero() && &self.0 < modulus
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bytes = self.to_bytes();
        write!(f, "Signature({}..)", hex::encode(&bytes[..bytes.len().min(6)]))
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serialize_biguint(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        deserialize_biguint(d).map(Signature)
    }
}

/// Product of signatures under one key, with the number of factors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackedSignature {
    #[serde(serialize_with = "serialize_biguint", deserialize_with = "deserialize_biguint")]
    pub value: BigUint,
    pub count: u32,
}

impl PackedSignature {
    pub fn empty() -> Self {
        PackedSignature { value: BigUint::one(), count: 0 }
    }
}

/// A payload together with its signature.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignedMessage {
    #[serde(with = "b64_bytes")]
    pub payload: Vec<u8>,
    pub signature: Signature,
}

impl SignedMessage {
    pub fn sign(key: &SigningKey, payload: Vec<u8>) -> Self {
        let signature = sign_bytes(key, &payload);
        SignedMessage { payload, signature }
    }

    pub fn verify(&self, vk: &VerificationKey) -> bool {
        verify_bytes(vk, &self.payload, &self.signature)
    }
}

/// Serde helper for byte strings carried as unpadded base64url.
pub mod b64_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::b64(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        super::unb64::<D::Error>(&text)
    }
}

/// Deterministic hash onto `Z_n`: counter-indexed SHA-256 blocks filling the
/// modulus width, reduced mod `n`.
pub fn full_domain_hash(purpose: &[u8], message: &[u8], modulus: &BigUint) -> BigUint {
    let width = (modulus.bits() as usize).div_ceil(8);
    let blocks = width.div_ceil(32);
    let mut prefix = Sha256::new();
    prefix.update((FDH_TAG.len() as u32).to_be_bytes());
    prefix.update(FDH_TAG);
    prefix.update((purpose.len() as u32).to_be_bytes());
    prefix.update(purpose);
    prefix.update((message.len() as u64).to_be_bytes());
    prefix.update(message);
    let mut out = Vec::with_capacity(blocks * 32);
    for counter in 0..blocks as u32 {
        let mut h = prefix.clone();
        h.update(counter.to_be_bytes());
        out.extend_from_slice(&h.finalize());
    }
    out.truncate(width);
    BigUint::from_bytes_be(&out) % modulus
}

/// `len(key "=" value) || len(vk_U) || len(t_exp as RFC 3339)`.
pub fn encode_attribute(attribute: &Attribute, user_vk: &VerificationKey, t_exp: Timestamp) -> Vec<u8> {
    encode_attribute_raw(attribute, &user_vk.to_bytes(), t_exp)
}

pub fn encode_attribute_raw(attribute: &Attribute, user_vk_bytes: &[u8], t_exp: Timestamp) -> Vec<u8> {
    let mut pair = String::with_capacity(attribute.key().len() + attribute.value().len() + 1);
    pair.push_str(attribute.key());
    pair.push('=');
    pair.push_str(attribute.value());
    let mut w = Writer::new();
    w.str(&pair).bytes(user_vk_bytes).str(&t_exp.to_rfc3339());
    w.finish()
}

fn attribute_digest(encoded: &[u8], modulus: &BigUint) -> BigUint {
    full_domain_hash(PURPOSE_ATTRIBUTE, encoded, modulus)
}

pub fn sign_attribute(
    key: &SigningKey,
    attribute: &Attribute,
    user_vk: &VerificationKey,
    t_exp: Timestamp,
) -> Signature {
    let encoded = encode_attribute(attribute, user_vk, t_exp);
    Signature(key.private_op(&attribute_digest(&encoded, &key.public.modulus)))
}

pub fn verify_attribute(
    vk: &VerificationKey,
    attribute: &Attribute,
    user_vk: &VerificationKey,
    t_exp: Timestamp,
    signature: &Signature,
) -> bool {
    if !signature.in_range(&vk.modulus) {
        return false;
    }
    let encoded = encode_attribute(attribute, user_vk, t_exp);
    ATTRIBUTE_EXPS.with(|c| c.set(c.get() + 1));
    vk.public_op(&signature.0) == attribute_digest(&encoded, &vk.modulus)
}

/// Multiplies signatures modulo `modulus`.
pub fn pack<'a, I>(signatures: I, modulus: &BigUint) -> Result<PackedSignature, CryptoError>
where
    I: IntoIterator<Item = &'a Signature>,
{
    let mut packed = PackedSignature::empty();
    for sig in signatures {
        if !sig.in_range(modulus) {
            return Err(CryptoError::SignatureOutOfRange);
        }
        packed.value = (packed.value * &sig.0) % modulus;
        packed.count += 1;
    }
    Ok(packed)
}

/// One message covered by a packed signature.
#[derive(Debug, Clone, Copy)]
pub struct AttributeBinding<'a> {
    pub attribute: &'a Attribute,
    pub user_vk: &'a VerificationKey,
    pub t_exp: Timestamp,
}

/// Verifies a packed signature with one public exponentiation.
///
/// Duplicate messages are a protocol violation and return an error: with
/// repeated messages a same-signer product no longer pins each factor.
pub fn batch_verify(
    vk: &VerificationKey,
    bindings: &[AttributeBinding<'_>],
    packed: &PackedSignature,
) -> Result<bool, CryptoError> {
    let mut vk_cache: Vec<(&VerificationKey, Vec<u8>)> = Vec::new();
    let encoded: Vec<Vec<u8>> = bindings
        .iter()
        .map(|b| {
            let vk_bytes = match vk_cache.iter().find(|(k, _)| *k == b.user_vk) {
                Some((_, bytes)) => bytes.clone(),
                None => {
                    let bytes = b.user_vk.to_bytes();
                    vk_cache.push((b.user_vk, bytes.clone()));
                    bytes
                }
            };
            encode_attribute_raw(b.attribute, &vk_bytes, b.t_exp)
        })
        .collect();
    batch_verify_encoded(vk, &encoded, packed)
}

/// Batch verification over pre-encoded attribute messages.
pub fn batch_verify_encoded(
    vk: &VerificationKey,
    encoded: &[Vec<u8>],
    packed: &PackedSignature,
) -> Result<bool, CryptoError> {
    let mut seen = HashSet::with_capacity(encoded.len());
    for (i, e) in encoded.iter().enumerate() {
        if !seen.insert(e.as_slice()) {
            return Err(CryptoError::DuplicateMessage(i));
        }
    }
    if packed.count as usize != encoded.len() || packed.value.is_zero() || packed.value >= vk.modulus {
        return Ok(false);
    }
    let expected = encoded.iter().fold(BigUint::one(), |acc, e| {
        (acc * attribute_digest(e, &vk.modulus)) % &vk.modulus
    });
    ATTRIBUTE_EXPS.with(|c| c.set(c.get() + 1));
    Ok(vk.public_op(&packed.value) == expected)
}

pub fn sign_bytes(key: &SigningKey, payload: &[u8]) -> Signature {
    Signature(key.private_op(&full_domain_hash(PURPOSE_MESSAGE, payload, &key.public.modulus)))
}

pub fn verify_bytes(vk: &VerificationKey, payload: &[u8], signature: &Signature) -> bool {
    if !signature.in_range(&vk.modulus) {
        return false;
    }
    MESSAGE_EXPS.with(|c| c.set(c.get() + 1));
    vk.public_op(&signature.0) == full_domain_hash(PURPOSE_MESSAGE, payload, &vk.modulus)
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use super::*;

    pub(crate) fn key_a() -> &'static KeyPair {
        static K: OnceLock<KeyPair> = OnceLock::new();
        K.get_or_init(|| keygen(1024).unwrap())
    }

    fn key_b() -> &'static KeyPair {
        static K: OnceLock<KeyPair> = OnceLock::new();
        K.get_or_init(|| keygen(1024).unwrap())
    }

    fn attr(k: &str, v: &str) -> Attribute {
        Attribute::new(k, v).unwrap()
    }

    fn t_exp() -> Timestamp {
        Timestamp::from_ymd_hms(2030, 1, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn keygen_rejects_unsupported_sizes() {
        assert_eq!(keygen(512).unwrap_err(), CryptoError::UnsupportedModulusSize(512));
        assert_eq!(keygen(1000).unwrap_err(), CryptoError::UnsupportedModulusSize(1000));
    }

    #[test]
    fn keygen_produces_requested_width_and_fresh_moduli() {
        assert_eq!(key_a().modulus_bits(), 1024);
        assert_eq!(key_a().verification_key().modulus_bits(), 1024);
        assert!(key_a().signing_key().derive_check());
        assert_ne!(key_a().verification_key(), key_b().verification_key());
    }

    #[test]
    fn keygen_2048() {
        let kp = keygen(2048).unwrap();
        assert_eq!(kp.verification_key().modulus_bits(), 2048);
    }

    #[test]
    fn signing_key_serde_round_trip() {
        let json = serde_json::to_string(key_a()).unwrap();
        let back: KeyPair = serde_json::from_str(&json).unwrap();
        assert_eq!(back.verification_key(), key_a().verification_key());
    }

    #[test]
    fn encode_attribute_layout() {
        let vk = key_b().verification_key();
        let encoded = encode_attribute(&attr("country", "DE"), vk, t_exp());
        let mut w = Writer::new();
        w.bytes(b"country=DE").bytes(&vk.to_bytes()).bytes(b"2030-01-01T00:00:00Z");
        assert_eq!(encoded, w.finish());
        assert_eq!(encoded, encode_attribute(&attr("country", "DE"), vk, t_exp()));
    }

    #[test]
    fn encode_attribute_is_injective_over_short_strings() {
        let vk = key_b().verification_key();
        let alphabet = ["", "a", "b", "ab", "ba", "aa", "abc", "c", "bc", "a:b"];
        let mut seen = std::collections::HashMap::new();
        for k in alphabet.iter().filter(|k| !k.is_empty()) {
            for v in alphabet {
                for t in [t_exp(), t_exp().plus_seconds(1)] {
                    let e = encode_attribute(&attr(k, v), vk, t);
                    if let Some(prev) = seen.insert(e, (k.to_string(), v.to_string(), t)) {
                        panic!("collision between {prev:?} and {:?}", (k, v, t));
                    }
                }
            }
        }
        assert_ne!(
            encode_attribute(&attr("ab", "c"), vk, t_exp()),
            encode_attribute(&attr("a", "bc"), vk, t_exp())
        );
    }

    #[test]
    fn attribute_sign_verify_and_binding() {
        let idp = key_a();
        let user = key_b().verification_key();
        let a = attr("country", "DE");
        let sig = sign_attribute(idp.signing_key(), &a, user, t_exp());
        let vk = idp.verification_key();
        assert!(verify_attribute(vk, &a, user, t_exp(), &sig));
        assert!(!verify_attribute(vk, &a, user, t_exp().plus_seconds(1), &sig));
        assert!(!verify_attribute(vk, &attr("country", "FR"), user, t_exp(), &sig));
        assert!(!verify_attribute(vk, &attr("countr", "DE"), user, t_exp(), &sig));
        assert!(!verify_attribute(vk, &a, idp.verification_key(), t_exp(), &sig));
        assert!(!verify_attribute(key_b().verification_key(), &a, user, t_exp(), &sig));

        let mut bytes = sig.to_bytes();
        bytes[10] ^= 0x01;
        assert!(!verify_attribute(vk, &a, user, t_exp(), &Signature::from_bytes(&bytes)));
        assert!(!verify_attribute(vk, &a, user, t_exp(), &Signature::from_bytes(&[])));
    }

    #[test]
    fn byte_signatures() {
        let k = key_a();
        let sig = sign_bytes(k.signing_key(), b"");
        assert!(verify_bytes(k.verification_key(), b"", &sig));
        let sig = sign_bytes(k.signing_key(), b"nonce bytes");
        assert!(!verify_bytes(k.verification_key(), b"nonce byte", &sig));
        assert!(!verify_bytes(key_b().verification_key(), b"nonce bytes", &sig));
        assert!(!verify_bytes(k.verification_key(), b"nonce bytes", &Signature::from_bytes(b"garbage")));
    }

    #[test]
    fn message_and_attribute_domains_are_separate() {
        let k = key_a();
        let a = attr("x", "y");
        let encoded = encode_attribute(&a, k.verification_key(), t_exp());
        let sig = sign_bytes(k.signing_key(), &encoded);
        assert!(!verify_attribute(k.verification_key(), &a, k.verification_key(), t_exp(), &sig));
    }

    #[test]
    fn pack_edge_cases() {
        let n = key_a().verification_key().modulus();
        let empty = pack([], n).unwrap();
        assert_eq!(empty.value, BigUint::one());
        assert_eq!(empty.count, 0);

        let user = key_b().verification_key();
        let s1 = sign_attribute(key_a().signing_key(), &attr("a", "1"), user, t_exp());
        let s2 = sign_attribute(key_a().signing_key(), &attr("b", "2"), user, t_exp());
        let single = pack([&s1], n).unwrap();
        assert_eq!(&single.value, s1.value());
        assert_eq!(single.count, 1);
        assert_eq!(pack([&s1, &s2], n).unwrap(), pack([&s2, &s1], n).unwrap());

        let too_big = Signature::from_biguint(n.clone());
        assert_eq!(pack([&too_big], n).unwrap_err(), CryptoError::SignatureOutOfRange);
    }

    #[test]
    fn batch_verify_counts_one_exponentiation_and_rejects_duplicates() {
        let idp = key_a();
        let user = key_b().verification_key();
        let attrs: Vec<Attribute> = (0..5).map(|i| attr(&format!("k{i}"), "v")).collect();
        let sigs: Vec<Signature> =
            attrs.iter().map(|a| sign_attribute(idp.signing_key(), a, user, t_exp())).collect();
        let packed = pack(&sigs, idp.verification_key().modulus()).unwrap();
        let bindings: Vec<_> =
            attrs.iter().map(|a| AttributeBinding { attribute: a, user_vk: user, t_exp: t_exp() }).collect();

        reset_exponentiation_count();
        assert!(batch_verify(idp.verification_key(), &bindings, &packed).unwrap());
        assert_eq!(exponentiation_count(), ExponentiationCount { attribute: 1, message: 0 });

        let mut dup = bindings.clone();
        dup[4] = dup[0];
        assert_eq!(
            batch_verify(idp.verification_key(), &dup, &packed).unwrap_err(),
            CryptoError::DuplicateMessage(4)
        );

        let mut short = packed.clone();
        short.count = 4;
        assert!(!batch_verify(idp.verification_key(), &bindings, &short).unwrap());
    }
}
