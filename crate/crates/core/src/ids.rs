//! Site-scoped global identifiers.
//!
//! Every record and file in the VO carries a [`GlobalId`] rendered as
//! `SITE:kind:hex32`. The site code is the node that minted the id, which is
//! what lets the query planner and the file relay route by id alone.

use std::fmt;
use std::str::FromStr;

use hmac::{Hmac, Mac};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha256;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdError {
    #[error("invalid site code {0:?}: expected 2-8 uppercase ASCII letters or digits")]
    BadSite(String),
    #[error("invalid id kind {0:?}")]
    BadKind(String),
    #[error("malformed global id {0:?}")]
    Malformed(String),
}

/// Short ASCII site code, e.g. `CAM` or `UDI`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteCode(String);

impl SiteCode {
    pub fn new(code: impl Into<String>) -> Result<Self, IdError> {
        let code = code.into();
        let ok = (2..=8).contains(&code.len())
            && code
                .bytes()
                .all(|b| b.is_ascii_uppercase() || b.is_ascii_digit());
        if ok {
            Ok(SiteCode(code))
        } else {
            Err(IdError::BadSite(code))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SiteCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for SiteCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SiteCode({})", self.0)
    }
}

impl FromStr for SiteCode {
    type Err = IdError;
    fn from_str(s: &str) -> Result<Self, IdError> {
        SiteCode::new(s)
    }
}

impl Serialize for SiteCode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for SiteCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        SiteCode::new(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IdKind {
    Patient,
    Study,
    Series,
    Image,
    File,
    Derived,
    Algorithm,
}

impl IdKind {
    pub const ALL: [IdKind; 7] = [
        IdKind::Patient,
        IdKind::Study,
        IdKind::Series,
        IdKind::Image,
        IdKind::File,
        IdKind::Derived,
        IdKind::Algorithm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IdKind::Patient => "patient",
            IdKind::Study => "study",
            IdKind::Series => "series",
            IdKind::Image => "image",
            IdKind::File => "file",
            IdKind::Derived => "derived",
            IdKind::Algorithm => "algorithm",
        }
    }
}

impl fmt::Display for IdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IdKind {
    type Err = IdError;
    fn from_str(s: &str) -> Result<Self, IdError> {
        IdKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| IdError::BadKind(s.to_string()))
    }
}

/// `site:kind:hex32`. Ordering follows the rendered form, which is what
/// result sets sort by.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct GlobalId {
    site: SiteCode,
    kind: IdKind,
    local: u128,
}

impl GlobalId {
    pub fn new(site: SiteCode, kind: IdKind, local: u128) -> Self {
        GlobalId { site, kind, local }
    }

    /// Fresh random id.
    pub fn mint(site: &SiteCode, kind: IdKind) -> Self {
        GlobalId::new(site.clone(), kind, rand::rng().random())
    }

    /// Deterministic id keyed by a site secret: the same `(kind, seed)`
    /// always yields the same id at one site, and nothing about `seed` can be
    /// recovered without the secret.
    pub fn keyed(site: &SiteCode, kind: IdKind, secret: &[u8], seed: &str) -> Self {
        let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("hmac accepts any key length");
        mac.update(site.as_str().as_bytes());
        mac.update(b"\0");
        mac.update(kind.as_str().as_bytes());
        mac.update(b"\0");
        mac.update(seed.as_bytes());
        let digest = mac.finalize().into_bytes();
        let mut local = [0u8; 16];
        local.copy_from_slice(&digest[..16]);
        GlobalId::new(site.clone(), kind, u128::from_be_bytes(local))
    }

    pub fn site(&self) -> &SiteCode {
        &self.site
    }

    pub fn kind(&self) -> IdKind {
        self.kind
    }

    pub fn local(&self) -> u128 {
        self.local
    }

    pub fn local_hex(&self) -> String {
        format!("{:032x}", self.local)
    }

    /// Parse and require a specific kind.
    pub fn parse_kind(s: &str, kind: IdKind) -> Result<Self, IdError> {
        let id: GlobalId = s.parse()?;
        if id.kind != kind {
            return Err(IdError::BadKind(id.kind.to_string()));
        }
        Ok(id)
    }
}

impl fmt::Display for GlobalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{:032x}", self.site, self.kind, self.local)
    }
}

impl fmt::Debug for GlobalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GlobalId({self})")
    }
}

impl PartialOrd for GlobalId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for GlobalId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Byte order of the rendered form; the hex part is fixed-width so it
        // compares like the number.
        self.site
            .as_str()
            .as_bytes()
            .iter()
            .chain(b":")
            .cmp(other.site.as_str().as_bytes().iter().chain(b":"))
            .then_with(|| self.kind.as_str().cmp(other.kind.as_str()))
            .then_with(|| self.local.cmp(&other.local))
    }
}

impl FromStr for GlobalId {
    type Err = IdError;
    fn from_str(s: &str) -> Result<Self, IdError> {
        let mut parts = s.split(':');
        let (Some(site), Some(kind), Some(hex), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(IdError::Malformed(s.to_string()));
        };
        let site = SiteCode::new(site)?;
        let kind: IdKind = kind.parse()?;
        if hex.len() != 32 || !hex.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(IdError::Malformed(s.to_string()));
        }
        let local = u128::from_str_radix(hex, 16).map_err(|_| IdError::Malformed(s.to_string()))?;
        Ok(GlobalId { site, kind, local })
    }
}

impl Serialize for GlobalId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GlobalId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
