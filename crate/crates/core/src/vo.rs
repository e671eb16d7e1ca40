//! The VO registry: node membership, the user directory and session tokens.
//!
//! The registry is the single token authority. Nodes forward logins to it
//! (`USER_VERIFY`) and validate tokens they have not seen before
//! (`TOKEN_CHECK`), so a token minted through any node is honored VO-wide.
//! It also hands every registered node the VO secret used to authenticate
//! node-to-node requests.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::ids::SiteCode;
use crate::wire::{self, Accountant, ErrorCode, Handler, Op, Outcome, RemoteError, Request, ServerHandle};

pub const DEFAULT_TOKEN_TTL_SECS: u64 = 3600;
const PBKDF2_ROUNDS: u32 = 10_000;

#[derive(Debug, Error)]
pub enum VoError {
    #[error("site {0} is already registered with a different identity")]
    DuplicateSiteDifferentIdentity(SiteCode),
    #[error("invalid user entry: {0}")]
    InvalidUser(String),
    #[error("registry log {path}: {msg}")]
    Log { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub site: SiteCode,
    pub address: String,
    /// Hex digest of the node's identity secret.
    pub identity: String,
    /// Unix milliseconds.
    pub registered_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserEntry {
    pub user: String,
    pub salt: String,
    pub digest: String,
    pub home_site: Option<SiteCode>,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionToken {
    pub token: String,
    pub user: String,
    /// Unix milliseconds.
    pub issued_at: i64,
    pub ttl: u64,
}

impl SessionToken {
    pub fn expires_at(&self) -> i64 {
        self.issued_at.saturating_add((self.ttl as i64).saturating_mul(1000))
    }

    pub fn is_live_at(&self, now_ms: i64) -> bool {
        now_ms < self.expires_at()
    }

    pub fn is_live(&self) -> bool {
        self.is_live_at(now_ms())
    }
}

pub fn now_ms() -> i64 {
    chrono::Utc::now().timestamp_millis()
}

pub fn identity_digest(secret: &[u8]) -> String {
    hex::encode(Sha256::digest(secret))
}

fn credential_digest(salt: &[u8], credential: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<Sha256>(credential.as_bytes(), salt, PBKDF2_ROUNDS, &mut out);
    out
}

fn random_bytes<const N: usize>() -> [u8; N] {
    let mut b = [0u8; N];
    rand::rng().fill_bytes(&mut b);
    b
}

#[derive(Default)]
struct State {
    nodes: BTreeMap<SiteCode, NodeDescriptor>,
    users: BTreeMap<String, UserEntry>,
    tokens: HashMap<String, SessionToken>,
}

pub struct Registry {
    state: RwLock<State>,
    log: Mutex<Option<(PathBuf, File)>>,
    vo_secret: Vec<u8>,
    dummy: UserEntry,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogEntry {
    Secret { secret: String },
    Node(NodeDescriptor),
    User(UserEntry),
}

impl Registry {
    pub fn in_memory() -> Registry {
        Registry::with_parts(random_bytes::<32>().to_vec(), State::default(), None)
    }

    fn with_parts(vo_secret: Vec<u8>, state: State, log: Option<(PathBuf, File)>) -> Registry {
        let salt = random_bytes::<16>();
        let dummy = UserEntry {
            user: String::new(),
            salt: hex::encode(salt),
            digest: hex::encode(credential_digest(&salt, "")),
            home_site: None,
            enabled: false,
        };
        Registry {
            state: RwLock::new(state),
            log: Mutex::new(log),
            vo_secret,
            dummy,
        }
    }

    /// Open (or create) a registry persisted as an append-only log in `dir`.
    pub fn open(dir: &Path) -> Result<Registry, VoError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("registry.log");
        let mut state = State::default();
        let mut secret = None;
        let mut valid_len = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            let mut offset = 0u64;
            for line in reader.split(b'\n') {
                let line = line?;
                let len = line.len() as u64 + 1;
                let Ok(entry) = serde_json::from_slice::<LogEntry>(&line) else {
                    // A torn final write; anything after it is discarded.
                    break;
                };
                match entry {
                    LogEntry::Secret { secret: s } => {
                        secret = Some(hex::decode(s).map_err(|e| VoError::Log {
                            path: path.clone(),
                            msg: e.to_string(),
                        })?)
                    }
                    LogEntry::Node(n) => {
                        state.nodes.insert(n.site.clone(), n);
                    }
                    LogEntry::User(u) => {
                        state.users.insert(u.user.clone(), u);
                    }
                }
                offset += len;
                valid_len = offset;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        file.set_len(valid_len.min(file.metadata()?.len()))?;
        let fresh = secret.is_none();
        let secret = secret.unwrap_or_else(|| random_bytes::<32>().to_vec());
        let reg = Registry::with_parts(secret, state, Some((path, file)));
        if fresh {
            reg.append(&LogEntry::Secret {
                secret: hex::encode(&reg.vo_secret),
            })?;
        }
        Ok(reg)
    }

    fn append(&self, entry: &LogEntry) -> Result<(), VoError> {
        let mut log = self.log.lock().unwrap();
        if let Some((path, file)) = log.as_mut() {
            let mut line = serde_json::to_vec(entry).expect("log entries serialize");
            line.push(b'\n');
            file.write_all(&line)
                .and_then(|_| file.sync_data())
                .map_err(|e| VoError::Log {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
        }
        Ok(())
    }

    pub fn vo_secret(&self) -> &[u8] {
        &self.vo_secret
    }

    /// Register or re-register a node. The same identity may move to a new
    /// address; a different identity under a taken code is refused.
    pub fn register_node(
        &self,
        site: SiteCode,
        address: String,
        identity: String,
    ) -> Result<Vec<NodeDescriptor>, VoError> {
        let mut state = self.state.write().unwrap();
        let desc = match state.nodes.get(&site) {
            Some(existing) if existing.identity != identity => {
                return Err(VoError::DuplicateSiteDifferentIdentity(site))
            }
            Some(existing) if existing.address == address => None,
            Some(existing) => Some(NodeDescriptor {
                address,
                ..existing.clone()
            }),
            None => Some(NodeDescriptor {
                site: site.clone(),
                address,
                identity,
                registered_at: now_ms(),
            }),
        };
        if let Some(desc) = desc {
            self.append(&LogEntry::Node(desc.clone()))?;
            state.nodes.insert(site, desc);
        }
        Ok(state.nodes.values().cloned().collect())
    }

    pub fn resolve_nodes(&self) -> Vec<NodeDescriptor> {
        self.state.read().unwrap().nodes.values().cloned().collect()
    }

    pub fn is_member(&self, site: &SiteCode) -> bool {
        self.state.read().unwrap().nodes.contains_key(site)
    }

    pub fn add_user(
        &self,
        user: &str,
        credential: &str,
        home_site: Option<SiteCode>,
        enabled: bool,
    ) -> Result<(), VoError> {
        if user.is_empty() || user.chars().any(|c| c.is_control() || c.is_whitespace()) {
            return Err(VoError::InvalidUser(format!("bad user id {user:?}")));
        }
        let salt = random_bytes::<16>();
        let entry = UserEntry {
            user: user.to_string(),
            salt: hex::encode(salt),
            digest: hex::encode(credential_digest(&salt, credential)),
            home_site,
            enabled,
        };
        let mut state = self.state.write().unwrap();
        self.append(&LogEntry::User(entry.clone()))?;
        if !enabled {
            state.tokens.retain(|_, t| t.user != user);
        }
        state.users.insert(user.to_string(), entry);
        Ok(())
    }

    pub fn users(&self) -> Vec<UserEntry> {
        self.state.read().unwrap().users.values().cloned().collect()
    }

    /// Unknown users go through the same key derivation against a dummy
    /// entry, so they cost the same as a wrong credential.
    pub fn verify_user(&self, user: &str, credential: &str) -> bool {
        let entry = self.state.read().unwrap().users.get(user).cloned();
        let known = entry.is_some();
        let entry = entry.unwrap_or_else(|| self.dummy.clone());
        let salt = hex::decode(&entry.salt).unwrap_or_default();
        let stored = hex::decode(&entry.digest).unwrap_or_default();
        let computed = credential_digest(&salt, credential);
        let matches: bool = computed.ct_eq(stored.as_slice()).into();
        known & entry.enabled & matches
    }

    pub fn issue_token(&self, user: &str, ttl: u64) -> SessionToken {
        let token = SessionToken {
            token: hex::encode(random_bytes::<32>()),
            user: user.to_string(),
            issued_at: now_ms(),
            ttl,
        };
        let mut state = self.state.write().unwrap();
        let now = now_ms();
        state.tokens.retain(|_, t| t.is_live_at(now));
        state.tokens.insert(token.token.clone(), token.clone());
        token
    }

    pub fn check_token(&self, token: &str) -> Option<SessionToken> {
        let state = self.state.read().unwrap();
        let t = state.tokens.get(token)?;
        let enabled = state.users.get(&t.user).is_some_and(|u| u.enabled);
        (enabled && t.is_live()).then(|| t.clone())
    }
}

// ---- network service ----

struct RegistryService {
    registry: Arc<Registry>,
    admin_token: Option<String>,
    accountant: Arc<Accountant>,
}

fn auth_failed(msg: &str) -> RemoteError {
    RemoteError::new(ErrorCode::AuthFailed, msg)
}

impl RegistryService {
    fn require_peer(&self, req: &Request) -> Result<SiteCode, RemoteError> {
        let site = wire::verify_peer_token(self.registry.vo_secret(), req)
            .ok_or_else(|| auth_failed("request is not signed by a VO member"))?;
        if !self.registry.is_member(&site) {
            return Err(RemoteError::new(ErrorCode::UnknownPeer, format!("{site} is not registered")));
        }
        Ok(site)
    }

    fn require_admin(&self, req: &Request) -> Result<(), RemoteError> {
        let ok = match (&self.admin_token, &req.token) {
            (Some(expected), Some(given)) => bool::from(expected.as_bytes().ct_eq(given.as_bytes())),
            _ => false,
        };
        ok.then_some(()).ok_or_else(|| auth_failed("admin token required"))
    }
}

impl Handler for RegistryService {
    fn handle(&self, req: &Request, _binary: Vec<u8>) -> Result<Outcome, RemoteError> {
        let op = Op::from_name(&req.op)
            .ok_or_else(|| RemoteError::new(ErrorCode::UnknownOp, format!("unknown op {}", req.op)))?;
        let p = &req.params;
        match op {
            Op::NodeReg => {
                let site: SiteCode = wire::param(p, "site")?;
                let address: String = wire::param(p, "address")?;
                let secret: String = wire::param(p, "identity_secret")?;
                let secret = hex::decode(secret).map_err(|e| RemoteError::bad_request(e.to_string()))?;
                let membership = self
                    .registry
                    .register_node(site, address, identity_digest(&secret))
                    .map_err(|e| match e {
                        VoError::DuplicateSiteDifferentIdentity(_) => {
                            RemoteError::new(ErrorCode::DuplicateSiteDifferentIdentity, e.to_string())
                        }
                        other => RemoteError::new(ErrorCode::StorageError, other.to_string()),
                    })?;
                Ok(Outcome::value(json!({
                    "membership": membership,
                    "vo_secret": hex::encode(self.registry.vo_secret()),
                })))
            }
            Op::NodeList => Ok(Outcome::value(json!({ "membership": self.registry.resolve_nodes() }))),
            Op::UserVerify => {
                self.require_peer(req)?;
                let user: String = wire::param(p, "user")?;
                let credential: String = wire::param(p, "credential")?;
                let ttl: Option<u64> = wire::param(p, "ttl")?;
                if !self.registry.verify_user(&user, &credential) {
                    return Err(auth_failed("unknown user or wrong credential"));
                }
                let token = self.registry.issue_token(&user, ttl.unwrap_or(DEFAULT_TOKEN_TTL_SECS));
                Ok(Outcome::value(serde_json::to_value(token).expect("token serializes")))
            }
            Op::TokenCheck => {
                self.require_peer(req)?;
                let token: String = wire::param(p, "token")?;
                let t = self
                    .registry
                    .check_token(&token)
                    .ok_or_else(|| auth_failed("token is unknown or expired"))?;
                Ok(Outcome::value(serde_json::to_value(t).expect("token serializes")))
            }
            Op::UserAdd => {
                self.require_admin(req)?;
                let user: String = wire::param(p, "user")?;
                let credential: String = wire::param(p, "credential")?;
                let home_site: Option<SiteCode> = wire::param(p, "home_site")?;
                let enabled: Option<bool> = wire::param(p, "enabled")?;
                self.registry
                    .add_user(&user, &credential, home_site, enabled.unwrap_or(true))
                    .map_err(|e| RemoteError::bad_request(e.to_string()))?;
                Ok(Outcome::value(json!({ "user": user })))
            }
            Op::Traffic => {
                self.require_admin(req)?;
                Ok(Outcome::value(serde_json::to_value(self.accountant.snapshot()).expect("serializes")))
            }
            other => Err(RemoteError::new(
                ErrorCode::UnknownOp,
                format!("{other} is not a registry operation"),
            )),
        }
    }
}

pub struct RegistryHandle {
    registry: Arc<Registry>,
    accountant: Arc<Accountant>,
    server: ServerHandle,
}

impl RegistryHandle {
    pub fn addr(&self) -> String {
        self.server.addr().to_string()
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn accountant(&self) -> &Arc<Accountant> {
        &self.accountant
    }

    pub fn shutdown(&mut self) {
        self.server.shutdown();
    }
}

impl Drop for RegistryHandle {
    fn drop(&mut self) {
        self.server.shutdown();
    }
}

pub fn start_registry(
    listen: &str,
    registry: Registry,
    admin_token: Option<String>,
    accountant: Arc<Accountant>,
) -> std::io::Result<RegistryHandle> {
    let registry = Arc::new(registry);
    let service = RegistryService {
        registry: registry.clone(),
        admin_token,
        accountant: accountant.clone(),
    };
    let server = wire::serve(TcpListener::bind(listen)?, Arc::new(service), accountant.clone())?;
    Ok(RegistryHandle {
        registry,
        accountant,
        server,
    })
}
