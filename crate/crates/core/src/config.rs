//! Daemon configuration: a TOML file, then `PRIMA_IDP_*` / `PRIMA_SP_*`
//! environment overrides.

use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use thiserror::Error;

use crate::crypto::{keygen, CryptoError, KeyPair, VerificationKey, DEFAULT_MODULUS_BITS};
use crate::inference::Predicate;
use crate::sp::{ServicePolicy, DEFAULT_CHALLENGE_TTL, DEFAULT_CLOCK_SKEW, DEFAULT_TOKEN_TTL};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("parsing {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("environment variable {var}: {detail}")]
    Env { var: String, detail: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimitConfig {
    pub capacity: u32,
    pub refill_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdpConfig {
    pub key_file: PathBuf,
    pub modulus_bits: usize,
    pub journal: Option<PathBuf>,
    pub listen: SocketAddr,
    pub rate_limit: Option<RateLimitConfig>,
}

impl Default for IdpConfig {
    fn default() -> Self {
        IdpConfig {
            key_file: PathBuf::from("idp-key.json"),
            modulus_bits: DEFAULT_MODULUS_BITS,
            journal: Some(PathBuf::from("idp-journal.jsonl")),
            listen: "127.0.0.1:8400".parse().unwrap(),
            rate_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpConfig {
    pub service_name: String,
    /// Predicate strings such as `reveal:country` or `age_over:16`.
    pub required: Vec<String>,
    /// Trusted IdP verification key, as written by `idp export-key`.
    pub idp_key_file: PathBuf,
    pub listen: SocketAddr,
    pub clock_skew_secs: u64,
    pub token_ttl_secs: u64,
    pub challenge_ttl_secs: u64,
}

impl Default for SpConfig {
    fn default() -> Self {
        SpConfig {
            service_name: "service".into(),
            required: vec![],
            idp_key_file: PathBuf::from("idp-vk.json"),
            listen: "127.0.0.1:8500".parse().unwrap(),
            clock_skew_secs: DEFAULT_CLOCK_SKEW.as_secs(),
            token_ttl_secs: DEFAULT_TOKEN_TTL.as_secs(),
            challenge_ttl_secs: DEFAULT_CHALLENGE_TTL.as_secs(),
        }
    }
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, ConfigError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.into(), detail: e.to_string() })
}

fn parse_env<T: std::str::FromStr>(var: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Env { var: var.into(), detail: e.to_string() })
}

impl IdpConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut c: IdpConfig = read_toml(path)?;
        c.apply_env(|k| std::env::var(k).ok())?;
        Ok(c)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get("PRIMA_IDP_KEY_FILE") {
            self.key_file = v.into();
        }
        if let Some(v) = get("PRIMA_IDP_MODULUS_BITS") {
            self.modulus_bits = parse_env("PRIMA_IDP_MODULUS_BITS", &v)?;
        }
        if let Some(v) = get("PRIMA_IDP_JOURNAL") {
            self.journal = if v.is_empty() { None } else { Some(v.into()) };
        }
        if let Some(v) = get("PRIMA_IDP_LISTEN") {
            self.listen = parse_env("PRIMA_IDP_LISTEN", &v)?;
        }
        Ok(())
    }

    /// Loads the key file, generating and writing a new key if it is absent.
    pub fn load_or_create_key(&self) -> Result<KeyPair, ConfigError> {
        if self.key_file.exists() {
            return read_json(&self.key_file);
        }
        let key = keygen(self.modulus_bits)?;
        write_json(&self.key_file, &key, true)?;
        Ok(key)
    }
}

impl SpConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut c: SpConfig = read_toml(path)?;
        c.apply_env(|k| std::env::var(k).ok())?;
        Ok(c)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get("PRIMA_SP_SERVICE_NAME") {
            self.service_name = v;
        }
        if let Some(v) = get("PRIMA_SP_REQUIRED") {
            self.required = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        }
        if let Some(v) = get("PRIMA_SP_IDP_KEY_FILE") {
            self.idp_key_file = v.into();
        }
        if let Some(v) = get("PRIMA_SP_LISTEN") {
            self.listen = parse_env("PRIMA_SP_LISTEN", &v)?;
        }
        if let Some(v) = get("PRIMA_SP_CLOCK_SKEW_SECS") {
            self.clock_skew_secs = parse_env("PRIMA_SP_CLOCK_SKEW_SECS", &v)?;
        }
        Ok(())
    }

    pub fn policy(&self) -> Result<ServicePolicy, ConfigError> {
        let required = self
            .required
            .iter()
            .map(|s| s.parse::<Predicate>().map_err(|e| ConfigError::Invalid(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let idp_vk: VerificationKey = read_json(&self.idp_key_file)?;
        let mut p = ServicePolicy::new(&self.service_name, required, idp_vk).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        p.clock_skew = Duration::from_secs(self.clock_skew_secs);
        p.token_ttl = Duration::from_secs(self.token_ttl_secs);
        p.challenge_ttl = Duration::from_secs(self.challenge_ttl_secs);
        p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(p)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let bytes = fs::read(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    serde_json::from_slice(&bytes).map_err(|e| ConfigError::Parse { path: path.into(), detail: e.to_string() })
}

/// Writes pretty JSON; `private` restricts the file to its owner.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T, private: bool) -> Result<(), ConfigError> {
    let io_err = |source| ConfigError::Io { path: path.into(), source };
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    let mut opts = fs::OpenOptions::new();
    opts.create(true).write(true).truncate(true);
    #[cfg(unix)]
    if private {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    #[cfg(not(unix))]
    let _ = private;
    use std::io::Write;
    opts.open(path).and_then(|mut f| f.write_all(text.as_bytes())).map_err(io_err)
}
