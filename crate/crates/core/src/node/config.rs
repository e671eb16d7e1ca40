use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::ids::SiteCode;
use crate::vo::DEFAULT_TOKEN_TTL_SECS;

use super::NodeError;

pub const ENV_PREFIX: &str = "GRIDBOX_";

/// Node settings. Loaded from a `key = value` file; any key can be
/// overridden by the environment variable `GRIDBOX_<KEY>` (upper-cased).
#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub site: SiteCode,
    pub listen: String,
    /// Address peers should use; defaults to the bound listen address.
    pub advertise: Option<String>,
    pub registry: String,
    pub data_dir: PathBuf,
    /// Pseudonymization key. Generated and kept in the data directory when
    /// not configured. Never leaves the node.
    pub secret: Option<String>,
    pub token_ttl: u64,
    pub remote_timeout: Duration,
    pub relay_timeout: Duration,
    pub membership_refresh: Duration,
    /// Test hook: delay before answering each RQUERY.
    pub rquery_delay: Duration,
}

const KEYS: &[&str] = &[
    "site",
    "listen",
    "advertise",
    "registry",
    "data_dir",
    "secret",
    "token_ttl",
    "remote_timeout_ms",
    "relay_timeout_ms",
    "membership_refresh_ms",
    "rquery_delay_ms",
];

impl NodeConfig {
    pub fn new(site: SiteCode, registry: impl Into<String>, data_dir: impl Into<PathBuf>) -> Self {
        NodeConfig {
            site,
            listen: "127.0.0.1:0".into(),
            advertise: None,
            registry: registry.into(),
            data_dir: data_dir.into(),
            secret: None,
            token_ttl: DEFAULT_TOKEN_TTL_SECS,
            remote_timeout: Duration::from_secs(10),
            relay_timeout: Duration::from_secs(60),
            membership_refresh: Duration::from_secs(5),
            rquery_delay: Duration::ZERO,
        }
    }

    pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, NodeError> {
        let mut out = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NodeError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim().to_string();
            if !KEYS.contains(&k.as_str()) {
                return Err(NodeError::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            out.insert(k, v.trim().to_string());
        }
        Ok(out)
    }

    /// Settings from an optional file, then the environment.
    pub fn load(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, NodeError> {
        let mut kv = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| NodeError::Config(format!("{}: {e}", p.display())))?;
                Self::parse_kv(&text)?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in env {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if KEYS.contains(&key.as_str()) {
                    kv.insert(key, v);
                }
            }
        }
        Self::from_map(&kv)
    }

    pub fn from_map(kv: &BTreeMap<String, String>) -> Result<Self, NodeError> {
        let need = |k: &str| kv.get(k).cloned().ok_or_else(|| NodeError::Config(format!("missing {k}")));
        let site = SiteCode::new(need("site")?).map_err(|e| NodeError::Config(e.to_string()))?;
        let mut cfg = NodeConfig::new(site, need("registry")?, need("data_dir")?);
        let num = |k: &str| -> Result<Option<u64>, NodeError> {
            kv.get(k)
                .map(|v| v.parse::<u64>().map_err(|_| NodeError::Config(format!("{k} must be a non-negative integer"))))
                .transpose()
        };
        if let Some(v) = kv.get("listen") {
            cfg.listen = v.clone();
        }
        cfg.advertise = kv.get("advertise").cloned();
        cfg.secret = kv.get("secret").cloned();
        if let Some(v) = num("token_ttl")? {
            cfg.token_ttl = v;
        }
        let ms = Duration::from_millis;
        if let Some(v) = num("remote_timeout_ms")? {
            cfg.remote_timeout = ms(v);
        }
        if let Some(v) = num("relay_timeout_ms")? {
            cfg.relay_timeout = ms(v);
        }
        if let Some(v) = num("membership_refresh_ms")? {
            cfg.membership_refresh = ms(v);
        }
        if let Some(v) = num("rquery_delay_ms")? {
            cfg.rquery_delay = ms(v);
        }
        Ok(cfg)
    }
}
