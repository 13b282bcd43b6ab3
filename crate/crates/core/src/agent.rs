//! User agent: the wallet file plus the enrollment and login flows.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::clock::{Clock, Timestamp};
use crate::codec::{ParseError, Reader, Writer};
use crate::credential::{
    canonicalize_attribute, read_attribute, select_disclosure, write_attribute, Attribute, CertifiedAttribute,
    Credential, CredentialError, Presentation, UnsignedPresentation,
};
use crate::crypto::{keygen, verify_attribute, CryptoError, KeyId, KeyPair, Signature, SigningKey, VerificationKey};
use crate::idp::{client as idp_client, nonce_payload};
use crate::inference::Predicate;
use crate::sp::{AccessToken, Challenge};
use crate::wire::{
    call, paths, Body, CallError, ChallengeRequest, ErrorBody, InferRequest, MessageType, Method, NonceSignMessage,
    PresentRequest, RawAttribute, RegisterRequest, Transport,
};

const MAGIC: &[u8; 8] = b"PRIMAWLT";
const WALLET_VERSION: u8 = 1;
/// Header flag values. Only plaintext bodies exist today.
const ENCRYPTION_NONE: u8 = 0;

#[derive(Debug, Error)]
pub enum WalletError {
    #[error("wallet I/O: {0}")]
    Io(#[from] io::Error),
    #[error("wallet is locked by another process")]
    Locked,
    #[error("wallet already exists at {0}")]
    Exists(PathBuf),
    #[error("corrupt wallet: {0}")]
    Corrupt(#[from] ParseError),
    #[error("wallet uses unsupported encryption mode {0}")]
    UnsupportedEncryption(u8),
    #[error("stored credential from IdP {idp} does not verify: {source}")]
    InvalidCredential { idp: KeyId, source: CredentialError },
    #[error("stored credential from IdP {0} belongs to a different user key")]
    ForeignCredential(KeyId),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// One IdP's credential and the derived statements cached alongside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalletEntry {
    pub idp_vk: VerificationKey,
    pub idp_endpoint: String,
    pub credential: Credential,
    pub derived: Vec<CertifiedAttribute>,
}

impl WalletEntry {
    /// Cached statement for `key`, if still inside the credential's validity.
    pub fn cached(&self, key: &str, now: Timestamp) -> Option<&CertifiedAttribute> {
        if now >= self.credential.expires_at() {
            return None;
        }
        self.derived.iter().find(|c| c.attribute.key() == key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Wallet {
    keypair: KeyPair,
    entries: BTreeMap<KeyId, WalletEntry>,
}

impl Wallet {
    pub fn new(keypair: KeyPair) -> Self {
        Wallet { keypair, entries: BTreeMap::new() }
    }

    pub fn generate(bits: usize) -> Result<Self, WalletError> {
        Ok(Wallet::new(keygen(bits)?))
    }

    pub fn keypair(&self) -> &KeyPair {
        &self.keypair
    }

    pub fn user_vk(&self) -> &VerificationKey {
        self.keypair.verification_key()
    }

    pub fn entries(&self) -> impl Iterator<Item = &WalletEntry> {
        self.entries.values()
    }

    pub fn entry(&self, idp: &KeyId) -> Option<&WalletEntry> {
        self.entries.get(idp)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts after full verification; replaces any entry for the same IdP.
    pub fn insert(&mut self, entry: WalletEntry) -> Result<(), WalletError> {
        let id = entry.idp_vk.key_id();
        check_entry(self.user_vk(), &entry)?;
        self.entries.insert(id, entry);
        Ok(())
    }

    pub fn remove(&mut self, idp: &KeyId) -> Option<WalletEntry> {
        self.entries.remove(idp)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(MAGIC).u8(WALLET_VERSION).u8(ENCRYPTION_NONE);
        self.keypair.signing_key().write(&mut w);
        w.u32(self.entries.len() as u32);
        for e in self.entries.values() {
            w.bytes(&e.idp_vk.to_bytes()).str(&e.idp_endpoint);
            w.bytes(&e.credential.encode());
            w.u32(e.derived.len() as u32);
            for d in &e.derived {
                write_attribute(&mut w, &d.attribute);
                w.bytes(&d.signature.to_bytes());
            }
        }
        w.finish()
    }

    /// Parses and fully re-verifies every stored credential.
    pub fn decode(bytes: &[u8]) -> Result<Self, WalletError> {
        let mut r = Reader::new(bytes);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(ParseError { offset: 0, kind: crate::codec::ParseErrorKind::BadMagic }.into());
        }
        let version = r.u8()?;
        if version != WALLET_VERSION {
            return Err(ParseError { offset: 8, kind: crate::codec::ParseErrorKind::UnsupportedVersion(version) }.into());
        }
        let encryption = r.u8()?;
        if encryption != ENCRYPTION_NONE {
            return Err(WalletError::UnsupportedEncryption(encryption));
        }
        let keypair = KeyPair::from_signing_key(SigningKey::read(&mut r)?);
        let mut wallet = Wallet::new(keypair);
        for _ in 0..r.u32()? {
            let idp_vk = VerificationKey::from_bytes(r.bytes()?)?;
            let idp_endpoint = r.string()?;
            let credential = Credential::decode(r.bytes()?)?;
            let mut derived = Vec::new();
            for _ in 0..r.u32()? {
                let attribute = read_attribute(&mut r)?;
                let signature = Signature::from_bytes(r.bytes()?);
                derived.push(CertifiedAttribute { attribute, signature });
            }
            wallet.insert(WalletEntry { idp_vk, idp_endpoint, credential, derived })?;
        }
        r.finish()?;
        Ok(wallet)
    }
}

fn check_entry(user_vk: &VerificationKey, e: &WalletEntry) -> Result<(), WalletError> {
    let idp = e.idp_vk.key_id();
    if e.credential.user_vk() != user_vk {
        return Err(WalletError::ForeignCredential(idp));
    }
    e.credential.verify(&e.idp_vk).map_err(|source| WalletError::InvalidCredential { idp, source })?;
    for d in &e.derived {
        if !verify_attribute(&e.idp_vk, &d.attribute, user_vk, e.credential.expires_at(), &d.signature) {
            return Err(WalletError::InvalidCredential {
                idp,
                source: CredentialError::BadSignature { key: d.attribute.key().to_string() },
            });
        }
    }
    Ok(())
}

/// A wallet bound to its file, holding an exclusive lock for its lifetime.
#[derive(Debug)]
pub struct WalletFile {
    path: PathBuf,
    _lock: File,
    pub wallet: Wallet,
}

fn lock_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".lock");
    path.with_file_name(name)
}

fn acquire(path: &Path) -> Result<File, WalletError> {
    let lock = OpenOptions::new().create(true).truncate(false).write(true).open(lock_path(path))?;
    match lock.try_lock() {
        Ok(()) => Ok(lock),
        Err(fs::TryLockError::WouldBlock) => Err(WalletError::Locked),
        Err(fs::TryLockError::Error(e)) => Err(e.into()),
    }
}

fn write_private(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut opts = OpenOptions::new();
    opts.create(true).write(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}

impl WalletFile {
    /// Creates a new wallet file; fails if one already exists.
    pub fn create(path: impl Into<PathBuf>, wallet: Wallet) -> Result<Self, WalletError> {
        let path = path.into();
        let lock = acquire(&path)?;
        if path.exists() {
            return Err(WalletError::Exists(path));
        }
        let wf = WalletFile { path, _lock: lock, wallet };
        wf.save()?;
        Ok(wf)
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, WalletError> {
        let path = path.into();
        let lock = acquire(&path)?;
        let wallet = Wallet::decode(&fs::read(&path)?)?;
        Ok(WalletFile { path, _lock: lock, wallet })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes to a sibling temp file and renames it over the wallet.
    pub fn save(&self) -> Result<(), WalletError> {
        let mut tmp = self.path.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        write_private(&tmp, &self.wallet.encode())?;
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("network error: {0}")]
    Network(String),
    #[error("IdP refused: {0}")]
    Idp(ErrorBody),
    #[error("SP refused: {0}")]
    Sp(ErrorBody),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("consent denied for: {}", .0.join(", "))]
    ConsentDenied(Vec<String>),
    #[error("no credential from IdP {0}")]
    NoCredential(String),
    #[error("wallet already holds a credential from IdP {0}; pass replace to overwrite")]
    AlreadyEnrolled(KeyId),
    #[error("IdP returned an invalid credential: {0}")]
    InvalidCredential(String),
    #[error("credential lacks required attribute {0:?}")]
    MissingAttribute(String),
    #[error(transparent)]
    Wallet(#[from] WalletError),
}

impl AgentError {
    /// Stable error code; remote refusals keep the remote's code.
    pub fn code(&self) -> &str {
        match self {
            AgentError::Network(_) => "network",
            AgentError::Idp(e) | AgentError::Sp(e) => &e.code,
            AgentError::Protocol(_) => "protocol",
            AgentError::ConsentDenied(_) => "consent-denied",
            AgentError::NoCredential(_) => "no-credential",
            AgentError::AlreadyEnrolled(_) => "already-enrolled",
            AgentError::InvalidCredential(_) => "invalid-credential",
            AgentError::MissingAttribute(_) => "missing-attribute",
            AgentError::Wallet(_) => "wallet",
        }
    }

    fn from_call(e: CallError, remote: fn(ErrorBody) -> AgentError) -> AgentError {
        match e {
            CallError::Remote(body) => remote(body),
            CallError::Transport(t) => AgentError::Network(t.to_string()),
            other => AgentError::Protocol(other.to_string()),
        }
    }
}

fn idp_err(e: CallError) -> AgentError {
    AgentError::from_call(e, AgentError::Idp)
}

fn sp_err(e: CallError) -> AgentError {
    AgentError::from_call(e, AgentError::Sp)
}

/// Registers with the IdP behind `idp` and stores the verified credential.
pub fn enroll(
    wallet: &mut Wallet,
    idp: &dyn Transport,
    idp_endpoint: &str,
    attributes: Vec<RawAttribute>,
    validity: Duration,
    replace: bool,
    clock: &dyn Clock,
) -> Result<Credential, AgentError> {
    let idp_vk = idp_client::fetch_key(idp).map_err(idp_err)?;
    if !replace && wallet.entry(&idp_vk.key_id()).is_some() {
        return Err(AgentError::AlreadyEnrolled(idp_vk.key_id()));
    }
    let expected: BTreeSet<Attribute> = attributes
        .iter()
        .map(|a| canonicalize_attribute(&a.key, &a.value))
        .collect::<Result<_, _>>()
        .map_err(|e| AgentError::Protocol(e.to_string()))?;
    let request = RegisterRequest::signed(wallet.keypair.signing_key(), attributes, validity, clock.now());
    let credential = idp_client::register(idp, request).map_err(idp_err)?;

    let got: BTreeSet<Attribute> = credential.attributes().iter().cloned().collect();
    if got != expected || got.len() != credential.attributes().len() {
        return Err(AgentError::InvalidCredential("attribute set differs from the request".into()));
    }
    let entry = WalletEntry { idp_vk, idp_endpoint: idp_endpoint.to_string(), credential: credential.clone(), derived: vec![] };
    wallet.insert(entry).map_err(|e| AgentError::InvalidCredential(e.to_string()))?;
    Ok(credential)
}

/// The set of statement keys the user agrees to disclose.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Consent(BTreeSet<String>);

impl Consent {
    pub fn new<'a>(predicates: impl IntoIterator<Item = &'a Predicate>) -> Self {
        Consent(predicates.into_iter().map(Predicate::statement_key).collect())
    }

    pub fn allows(&self, p: &Predicate) -> bool {
        self.0.contains(&p.statement_key())
    }
}

#[doc(hidden)]
#[derive(Debug, Clone, Default)]
pub struct Tamper {
    /// Rewrites the value of a disclosed attribute before signing.
    pub value_override: Option<(String, String)>,
    pub timestamp_offset_secs: i64,
    /// Presents this credential instead of the wallet's own.
    pub credential: Option<Credential>,
}

#[derive(Debug, Clone, Default)]
pub struct LoginOptions {
    /// Ignore cached derived statements and ask the IdP again.
    pub fresh: bool,
    /// IdP whose credential to use; may be omitted if the wallet holds one.
    pub idp: Option<KeyId>,
    #[doc(hidden)]
    pub tamper: Tamper,
}

#[derive(Debug, Clone)]
pub struct LoginOutcome {
    pub token: AccessToken,
    pub disclosed: Vec<String>,
    pub inferred: bool,
}

/// Runs one login against the SP behind `sp`.
///
/// `consent` sees the SP's requirements and returns what the user approves.
/// Nothing beyond the initial access request reaches the SP unless every
/// requirement is approved.
pub fn login(
    wallet: &mut Wallet,
    idp: &dyn Transport,
    sp: &dyn Transport,
    consent: impl FnOnce(&[Predicate]) -> Consent,
    options: &LoginOptions,
    clock: &dyn Clock,
) -> Result<LoginOutcome, AgentError> {
    let idp_id = match options.idp {
        Some(id) => id,
        None => match wallet.entries.keys().collect::<Vec<_>>().as_slice() {
            [only] => **only,
            [] => return Err(AgentError::NoCredential("any".into())),
            _ => return Err(AgentError::NoCredential("ambiguous; choose an IdP".into())),
        },
    };
    if !wallet.entries.contains_key(&idp_id) {
        return Err(AgentError::NoCredential(idp_id.to_string()));
    }
    let user_key = wallet.keypair.signing_key().clone();
    let user_vk = user_key.verification_key().clone();

    let challenge = request_access(sp, &user_vk)?;
    let approved = consent(&challenge.required);
    let excess: Vec<String> =
        challenge.required.iter().filter(|p| !approved.allows(p)).map(Predicate::statement_key).collect();
    if !excess.is_empty() {
        return Err(AgentError::ConsentDenied(excess));
    }

    let entry = wallet.entries.get_mut(&idp_id).expect("checked above");
    let now = clock.now();
    let to_infer: Vec<Predicate> = challenge
        .required
        .iter()
        .filter(|p| p.needs_inference() && (options.fresh || entry.cached(&p.statement_key(), now).is_none()))
        .cloned()
        .collect();
    let inferred = !to_infer.is_empty();
    if inferred {
        let response = idp_client::infer(idp, InferRequest::signed(&user_key, to_infer.clone(), now)).map_err(idp_err)?;
        let wanted: BTreeSet<String> = to_infer.iter().map(Predicate::statement_key).collect();
        let got: BTreeSet<String> = response.statements.iter().map(|s| s.attribute.key().to_string()).collect();
        if wanted != got || response.expires_at != entry.credential.expires_at() {
            return Err(AgentError::InvalidCredential("inference response does not match the request".into()));
        }
        for s in &response.statements {
            if !verify_attribute(&entry.idp_vk, &s.attribute, &user_vk, response.expires_at, &s.signature) {
                return Err(AgentError::InvalidCredential(format!("bad signature on {}", s.attribute.key())));
            }
        }
        entry.derived.retain(|d| !got.contains(d.attribute.key()));
        entry.derived.extend(response.statements);
    }

    let signed_nonce =
        idp_client::sign_nonce(idp, NonceSignMessage::signed(&user_key, challenge.nonce, clock.now())).map_err(idp_err)?;
    if signed_nonce.payload != nonce_payload(&user_vk, &challenge.nonce) || !signed_nonce.verify(&entry.idp_vk) {
        return Err(AgentError::Protocol("IdP nonce signature does not verify".into()));
    }

    let base = options.tamper.credential.as_ref().unwrap_or(&entry.credential);
    let holder = base.with_extra(&entry.derived);
    let keys: BTreeSet<String> = challenge.required.iter().map(Predicate::statement_key).collect();
    let (mut disclosed, packed) = select_disclosure(&holder, &keys, entry.idp_vk.modulus()).map_err(|e| match e {
        CredentialError::MissingKey(k) => AgentError::MissingAttribute(k),
        other => AgentError::Protocol(other.to_string()),
    })?;
    if let Some((k, v)) = &options.tamper.value_override {
        for a in disclosed.iter_mut().filter(|a| a.key() == k) {
            *a = Attribute::new(k.clone(), v.clone()).map_err(|e| AgentError::Protocol(e.to_string()))?;
        }
    }
    let presentation = UnsignedPresentation {
        disclosed,
        packed,
        user_vk,
        expires_at: holder.expires_at(),
        timestamp: clock.now().plus_seconds(options.tamper.timestamp_offset_secs),
        session_id: challenge.session_id,
        signed_nonce,
    }
    .sign(&user_key, challenge.nonce.as_bytes());
    let disclosed = presentation.disclosed.iter().map(|a| a.key().to_string()).collect();
    let token = present(sp, presentation, &challenge)?;
    Ok(LoginOutcome { token, disclosed, inferred })
}

fn request_access(sp: &dyn Transport, user_vk: &VerificationKey) -> Result<Challenge, AgentError> {
    let body = Body::ChallengeReq(ChallengeRequest { user_vk: user_vk.clone() });
    match call(sp, Method::Post, paths::REQUEST_ACCESS, Some(body), MessageType::ChallengeResp).map_err(sp_err)? {
        Body::ChallengeResp(r) => Ok(r.challenge),
        _ => unreachable!("call checks the message type"),
    }
}

fn present(sp: &dyn Transport, presentation: Presentation, challenge: &Challenge) -> Result<AccessToken, AgentError> {
    let body = Body::PresentReq(PresentRequest { presentation, nonce: challenge.nonce });
    match call(sp, Method::Post, paths::PRESENT, Some(body), MessageType::PresentResp).map_err(sp_err)? {
        Body::PresentResp(r) => Ok(r.token),
        _ => unreachable!("call checks the message type"),
    }
}

#[cfg(test)]
mod tests {
    use std::sync::{Arc, OnceLock};

    use super::*;
    use crate::clock::ManualClock;
    use crate::idp::IdentityProvider;

    fn keys() -> &'static (KeyPair, KeyPair) {
        static K: OnceLock<(KeyPair, KeyPair)> = OnceLock::new();
        K.get_or_init(|| (keygen(1024).unwrap(), keygen(1024).unwrap()))
    }

    fn enrolled() -> Wallet {
        let clock = ManualClock::new(Timestamp::from_ymd_hms(2016, 6, 1, 0, 0, 0).unwrap());
        let (idp_key, user) = keys().clone();
        let idp = IdentityProvider::new(idp_key.clone(), Arc::new(clock));
        let attrs: Vec<_> = [("country", "DE"), ("date_of_birth", "1990-04-12")]
            .map(|(k, v)| RawAttribute { key: k.into(), value: v.into() })
            .into();
        let credential = idp.register(&attrs, user.verification_key(), Duration::from_secs(86400 * 365)).unwrap();
        let derived = idp.certify_derived(user.verification_key(), &[Predicate::age_over(16).unwrap()]).unwrap().0;
        let mut w = Wallet::new(user);
        w.insert(WalletEntry {
            idp_vk: idp_key.verification_key().clone(),
            idp_endpoint: "http://idp.example".into(),
            credential,
            derived,
        })
        .unwrap();
        w
    }

    #[test]
    fn wallet_round_trip() {
        let w = enrolled();
        assert_eq!(Wallet::decode(&w.encode()).unwrap(), w);
        let empty = Wallet::new(keys().1.clone());
        assert_eq!(Wallet::decode(&empty.encode()).unwrap(), empty);
    }

    #[test]
    fn wallet_rejects_foreign_and_corrupt() {
        let w = enrolled();
        let mut foreign = Wallet::new(keys().0.clone());
        let entry = w.entries().next().unwrap().clone();
        assert!(matches!(foreign.insert(entry), Err(WalletError::ForeignCredential(_))));

        let mut bytes = w.encode();
        bytes[9] = 1;
        assert!(matches!(Wallet::decode(&bytes), Err(WalletError::UnsupportedEncryption(1))));
        let bytes = w.encode();
        assert!(Wallet::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bytes = w.encode();
        let n = bytes.len();
        bytes[n - 3] ^= 1;
        assert!(matches!(Wallet::decode(&bytes), Err(WalletError::InvalidCredential { .. })));
    }

    #[test]
    fn wallet_file_lock_and_permissions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wallet.bin");
        let wf = WalletFile::create(&path, enrolled()).unwrap();
        assert!(matches!(WalletFile::open(&path), Err(WalletError::Locked)));
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            assert_eq!(fs::metadata(&path).unwrap().permissions().mode() & 0o777, 0o600);
        }
        let stored = wf.wallet.clone();
        drop(wf);
        assert!(matches!(WalletFile::create(&path, enrolled()), Err(WalletError::Exists(_))));
        assert_eq!(WalletFile::open(&path).unwrap().wallet, stored);
    }

    #[test]
    fn consent_matches_statement_keys() {
        let c = Consent::new(&[Predicate::reveal("country").unwrap(), Predicate::age_over(16).unwrap()]);
        assert!(c.allows(&Predicate::reveal("country").unwrap()));
        assert!(c.allows(&Predicate::age_over(16).unwrap()));
        assert!(!c.allows(&Predicate::age_over(18).unwrap()));
        assert!(!c.allows(&Predicate::reveal("date_of_birth").unwrap()));
    }
}
