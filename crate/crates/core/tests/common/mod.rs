#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::OnceLock;

use prima_core::clock::Timestamp;
use prima_core::credential::{Attribute, Credential};
use prima_core::crypto::{keygen, KeyPair};
use prima_core::idp::issue_signatures;

/// Keys are expensive; share a few per size across a test binary.
pub fn key(bits: usize, i: usize) -> &'static KeyPair {
    static K1024: OnceLock<Vec<KeyPair>> = OnceLock::new();
    static K2048: OnceLock<Vec<KeyPair>> = OnceLock::new();
    let pool = match bits {
        1024 => K1024.get_or_init(|| (0..4).map(|_| keygen(1024).unwrap()).collect()),
        2048 => K2048.get_or_init(|| (0..2).map(|_| keygen(2048).unwrap()).collect()),
        _ => panic!("no pool for {bits}"),
    };
    &pool[i % pool.len()]
}

pub fn attrs(map: &BTreeMap<String, String>) -> Vec<Attribute> {
    map.iter().map(|(k, v)| Attribute::new(k.as_str(), v.as_str()).unwrap()).collect()
}

pub fn issue(idp: &KeyPair, user: &KeyPair, attributes: Vec<Attribute>, issued: Timestamp, expires: Timestamp) -> Credential {
    let sigs = issue_signatures(idp.signing_key(), &attributes, user.verification_key(), expires);
    Credential::new(attributes, sigs, user.verification_key().clone(), issued, expires, idp.verification_key()).unwrap()
}
