//! Turns stored attribute values into statements that prove a condition
//! without revealing the value itself.
//!
//! A satisfied predicate yields an ordinary attribute with a `proof:` key and
//! the value `"true"`, so it can be signed, packed and batch-verified like any
//! other attribute. False predicates yield an error, never a signed `"false"`.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::credential::{Attribute, CredentialError, PROOF_PREFIX};

/// Attribute consumed by `age_over`.
pub const DATE_OF_BIRTH: &str = "date_of_birth";
pub const MAX_AGE_THRESHOLD: u32 = 150;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InferenceError {
    #[error("invalid predicate: {0}")]
    InvalidPredicate(String),
    #[error("attribute {0:?} is not on record")]
    MissingAttribute(String),
    #[error("attribute {key:?} is not a valid date: {value:?}")]
    UnparsableDate { key: String, value: String },
    #[error("predicate {0} is not satisfied")]
    NotSatisfied(Predicate),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateKind {
    AgeOver,
    Equals,
    Registered,
    Reveal,
}

impl PredicateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PredicateKind::AgeOver => "age_over",
            PredicateKind::Equals => "equals",
            PredicateKind::Registered => "registered",
            PredicateKind::Reveal => "reveal",
        }
    }
}

/// A condition over the stored attributes. `reveal(k)` is the plain
/// "disclose attribute k" requirement.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Predicate {
    kind: PredicateKind,
    key: String,
    parameter: String,
}

impl Predicate {
    pub fn new(kind: PredicateKind, key: impl Into<String>, parameter: impl Into<String>) -> Result<Self, InferenceError> {
        let p = Predicate { kind, key: key.into(), parameter: parameter.into() };
        p.validate()?;
        Ok(p)
    }

    pub fn age_over(threshold: u32) -> Result<Self, InferenceError> {
        Self::new(PredicateKind::AgeOver, DATE_OF_BIRTH, threshold.to_string())
    }

    pub fn equals(key: impl Into<String>, expected: impl Into<String>) -> Result<Self, InferenceError> {
        Self::new(PredicateKind::Equals, key, expected)
    }

    pub fn registered() -> Self {
        Predicate { kind: PredicateKind::Registered, key: String::new(), parameter: String::new() }
    }

    pub fn reveal(key: impl Into<String>) -> Result<Self, InferenceError> {
        Self::new(PredicateKind::Reveal, key, "")
    }

    pub fn kind(&self) -> PredicateKind {
        self.kind
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn parameter(&self) -> &str {
        &self.parameter
    }

    /// True for everything except `reveal`, i.e. predicates the IdP must certify.
    pub fn needs_inference(&self) -> bool {
        self.kind != PredicateKind::Reveal
    }

    fn validate(&self) -> Result<(), InferenceError> {
        let bad = |m: &str| Err(InferenceError::InvalidPredicate(format!("{}: {m}", self.kind.as_str())));
        let key_ok = |k: &str| Attribute::new(k, "").is_ok() && !k.starts_with(PROOF_PREFIX);
        match self.kind {
            PredicateKind::AgeOver => {
                if self.key != DATE_OF_BIRTH {
                    return bad("source key must be date_of_birth");
                }
                match self.parameter.parse::<u32>() {
                    Ok(n) if (1..=MAX_AGE_THRESHOLD).contains(&n) && n.to_string() == self.parameter => {}
                    _ => return bad("threshold must be an integer in [1, 150]"),
                }
            }
            PredicateKind::Equals => {
                if !key_ok(&self.key) {
                    return bad("invalid attribute key");
                }
                if self.parameter.is_empty() {
                    return bad("expected value missing");
                }
                if let Err(e) = Attribute::new(self.statement_key(), "true") {
                    return bad(&e.to_string());
                }
            }
            PredicateKind::Registered => {
                if !self.key.is_empty() || !self.parameter.is_empty() {
                    return bad("takes no key or parameter");
                }
            }
            PredicateKind::Reveal => {
                if !key_ok(&self.key) {
                    return bad("invalid attribute key");
                }
                if !self.parameter.is_empty() {
                    return bad("takes no parameter");
                }
            }
        }
        Ok(())
    }

    /// Key of the attribute that satisfies this predicate in a presentation.
    pub fn statement_key(&self) -> String {
        match self.kind {
            PredicateKind::AgeOver => format!("{PROOF_PREFIX}age_over:{}", self.parameter),
            // The expected value is hex-encoded so the key stays within the
            // attribute-key alphabet and distinct values get distinct keys.
            PredicateKind::Equals => {
                format!("{PROOF_PREFIX}equals:{}:{}", self.key, hex::encode(self.parameter.as_bytes()))
            }
            PredicateKind::Registered => format!("{PROOF_PREFIX}registered"),
            PredicateKind::Reveal => self.key.clone(),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PredicateKind::AgeOver => write!(f, "age_over:{}", self.parameter),
            PredicateKind::Equals => write!(f, "equals:{}={}", self.key, self.parameter),
            PredicateKind::Registered => f.write_str("registered"),
            PredicateKind::Reveal => write!(f, "reveal:{}", self.key),
        }
    }
}

impl fmt::Debug for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Predicate({self})")
    }
}

/// Parses the CLI form: `age_over:16`, `equals:country=DE`, `registered`,
/// `reveal:country`.
impl FromStr for Predicate {
    type Err = InferenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "age_over" => Predicate::age_over(
                rest.parse().map_err(|_| InferenceError::InvalidPredicate(format!("bad threshold {rest:?}")))?,
            ),
            "equals" => {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| InferenceError::InvalidPredicate("expected equals:key=value".into()))?;
                Predicate::equals(k, v)
            }
            "registered" if rest.is_empty() => Ok(Predicate::registered()),
            "reveal" => Predicate::reveal(rest),
            _ => Err(InferenceError::InvalidPredicate(format!("unknown predicate {s:?}"))),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredicateWire {
    kind: PredicateKind,
    key: String,
    parameter: String,
}

impl<'de> Deserialize<'de> for Predicate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = PredicateWire::deserialize(d)?;
        Predicate::new(w.kind, w.key, w.parameter).map_err(serde::de::Error::custom)
    }
}

/// Result of a successful evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedStatement {
    pub attribute: Attribute,
    pub source_key: String,
    pub evaluated_at: Timestamp,
}

/// Age in completed years on `today`. A Feb-29 birthday is reached on Mar-1
/// in non-leap years.
pub fn completed_years(dob: NaiveDate, today: NaiveDate) -> i32 {
    let mut years = today.year() - dob.year();
    if (today.month(), today.day()) < (dob.month(), dob.day()) {
        years -= 1;
    }
    years
}

pub fn parse_date(text: &str) -> Option<NaiveDate> {
    let bytes = text.as_bytes();
    if bytes.len() != 10 || bytes[4] != b'-' || bytes[7] != b'-' {
        return None;
    }
    NaiveDate::parse_from_str(text, "%Y-%m-%d").ok()
}

fn lookup<'a>(attributes: &'a [Attribute], key: &str) -> Result<&'a Attribute, InferenceError> {
    attributes
        .iter()
        .find(|a| a.key() == key)
        .ok_or_else(|| InferenceError::MissingAttribute(key.to_string()))
}

fn statement(predicate: &Predicate, now: Timestamp) -> Result<DerivedStatement, InferenceError> {
    let attribute = Attribute::new(predicate.statement_key(), "true")
        .map_err(|e: CredentialError| InferenceError::InvalidPredicate(e.to_string()))?;
    Ok(DerivedStatement { attribute, source_key: predicate.key.clone(), evaluated_at: now })
}

/// Evaluates `predicate` over a user's stored attributes.
///
/// `reveal` returns the stored attribute itself. Account status is the
/// caller's concern, so `registered` always holds here.
pub fn evaluate(predicate: &Predicate, attributes: &[Attribute], now: Timestamp) -> Result<DerivedStatement, InferenceError> {
    match predicate.kind {
        PredicateKind::AgeOver => {
            let source = lookup(attributes, &predicate.key)?;
            let dob = parse_date(source.value()).ok_or_else(|| InferenceError::UnparsableDate {
                key: source.key().to_string(),
                value: source.value().to_string(),
            })?;
            let threshold: i32 = predicate.parameter.parse().expect("validated at construction");
            if completed_years(dob, now.date()) >= threshold {
                statement(predicate, now)
            } else {
                Err(InferenceError::NotSatisfied(predicate.clone()))
            }
        }
        PredicateKind::Equals => {
            if lookup(attributes, &predicate.key)?.value() == predicate.parameter {
                statement(predicate, now)
            } else {
                Err(InferenceError::NotSatisfied(predicate.clone()))
            }
        }
        PredicateKind::Registered => statement(predicate, now),
        PredicateKind::Reveal => Ok(DerivedStatement {
            attribute: lookup(attributes, &predicate.key)?.clone(),
            source_key: predicate.key.clone(),
            evaluated_at: now,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(y: i32, m: u32, d: u32) -> Timestamp {
        Timestamp::from_ymd_hms(y, m, d, 12, 0, 0).unwrap()
    }

    fn dob(v: &str) -> Vec<Attribute> {
        vec![Attribute::new(DATE_OF_BIRTH, v).unwrap(), Attribute::new("country", "DE").unwrap()]
    }

    #[test]
    fn alice_is_over_16() {
        let s = evaluate(&Predicate::age_over(16).unwrap(), &dob("1990-04-12"), at(2016, 6, 1)).unwrap();
        assert_eq!(s.attribute.key(), "proof:age_over:16");
        assert_eq!(s.attribute.value(), "true");
        assert_eq!(s.source_key, DATE_OF_BIRTH);
    }

    #[test]
    fn too_young_is_not_satisfied() {
        let p = Predicate::age_over(16).unwrap();
        assert_eq!(evaluate(&p, &dob("2010-01-01"), at(2016, 6, 1)), Err(InferenceError::NotSatisfied(p)));
    }

    #[test]
    fn birthday_counts_as_attained() {
        let p = Predicate::age_over(16).unwrap();
        assert!(evaluate(&p, &dob("2000-06-01"), at(2016, 6, 1)).is_ok());
        assert!(evaluate(&p, &dob("2000-06-02"), at(2016, 6, 1)).is_err());
    }

    #[test]
    fn leap_day_birthday_increments_on_march_first() {
        let d = NaiveDate::from_ymd_opt(2000, 2, 29).unwrap();
        assert_eq!(completed_years(d, NaiveDate::from_ymd_opt(2017, 2, 28).unwrap()), 16);
        assert_eq!(completed_years(d, NaiveDate::from_ymd_opt(2017, 3, 1).unwrap()), 17);
        assert_eq!(completed_years(d, NaiveDate::from_ymd_opt(2016, 2, 29).unwrap()), 16);
    }

    #[test]
    fn missing_and_unparsable_sources() {
        let p = Predicate::age_over(16).unwrap();
        let only_country = vec![Attribute::new("country", "DE").unwrap()];
        assert_eq!(
            evaluate(&p, &only_country, at(2016, 6, 1)),
            Err(InferenceError::MissingAttribute(DATE_OF_BIRTH.into()))
        );
        assert!(matches!(
            evaluate(&p, &dob("12/04/1990"), at(2016, 6, 1)),
            Err(InferenceError::UnparsableDate { .. })
        ));
    }

    #[test]
    fn equals_registered_and_reveal() {
        let attrs = dob("1990-04-12");
        let eq = Predicate::equals("country", "DE").unwrap();
        let s = evaluate(&eq, &attrs, at(2016, 6, 1)).unwrap();
        assert_eq!(s.attribute.key(), "proof:equals:country:4445");
        assert_eq!(s.attribute.value(), "true");
        let fr = Predicate::equals("country", "FR").unwrap();
        assert_ne!(fr.statement_key(), eq.statement_key());
        assert_eq!(evaluate(&fr, &attrs, at(2016, 6, 1)), Err(InferenceError::NotSatisfied(fr)));

        let r = evaluate(&Predicate::registered(), &[], at(2016, 6, 1)).unwrap();
        assert_eq!(r.attribute.key(), "proof:registered");

        let rev = evaluate(&Predicate::reveal("country").unwrap(), &attrs, at(2016, 6, 1)).unwrap();
        assert_eq!(rev.attribute, attrs[1]);
    }

    #[test]
    fn predicate_validation_and_parsing() {
        assert!(Predicate::age_over(0).is_err());
        assert!(Predicate::age_over(151).is_err());
        assert!(Predicate::age_over(150).is_ok());
        assert!(Predicate::new(PredicateKind::AgeOver, "country", "16").is_err());
        assert!(Predicate::new(PredicateKind::AgeOver, DATE_OF_BIRTH, "016").is_err());
        assert!(Predicate::new(PredicateKind::Registered, "x", "").is_err());
        assert!(Predicate::reveal("proof:age_over:16").is_err());
        assert!(Predicate::equals("country", "").is_err());

        for text in ["age_over:16", "equals:country=DE", "registered", "reveal:country"] {
            let p: Predicate = text.parse().unwrap();
            assert_eq!(p.to_string(), text);
        }
        assert!("age_over".parse::<Predicate>().is_err());
        assert!("shoe_size:9".parse::<Predicate>().is_err());
    }

    #[test]
    fn wire_form() {
        let p = Predicate::age_over(16).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, r#"{"kind":"age_over","key":"date_of_birth","parameter":"16"}"#);
        assert_eq!(serde_json::from_str::<Predicate>(&json).unwrap(), p);
        assert!(serde_json::from_str::<Predicate>(r#"{"kind":"age_over","key":"date_of_birth","parameter":"0"}"#).is_err());
        assert!(serde_json::from_str::<Predicate>(r#"{"kind":"age_over","key":"date_of_birth","parameter":"16","x":1}"#).is_err());
    }

    #[test]
    fn statement_does_not_leak_dob() {
        let s = evaluate(&Predicate::age_over(16).unwrap(), &dob("1987-11-23"), at(2016, 6, 1)).unwrap();
        let bytes = serde_json::to_vec(&s).unwrap();
        let secret = b"1987-11-23";
        for w in secret.windows(4) {
            assert!(!bytes.windows(4).any(|b| b == w), "leaked {:?}", std::str::from_utf8(w));
        }
    }
}
