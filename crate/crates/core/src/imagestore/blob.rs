use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::{GlobalId, IdKind, SiteCode};

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("blob not found: {0}")]
    NotFound(String),
    #[error("stored blob {0} fails its hash check")]
    CorruptBlob(String),
    #[error("refusing to store an empty blob")]
    Empty,
    #[error("not a sha256 hex digest: {0:?}")]
    BadHash(String),
    #[error("blob store i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Reference to a stored blob.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FileRef {
    pub id: GlobalId,
    pub sha256: String,
    pub size: u64,
    pub owner_site: SiteCode,
}

impl FileRef {
    /// The file id is the site plus the leading 128 bits of the digest, so
    /// identical bytes always get the same reference at one site.
    pub fn for_digest(site: &SiteCode, sha256: &str, size: u64) -> Result<FileRef, BlobError> {
        check_hash(sha256)?;
        let local = u128::from_str_radix(&sha256[..32], 16).map_err(|_| BlobError::BadHash(sha256.into()))?;
        Ok(FileRef {
            id: GlobalId::new(site.clone(), IdKind::File, local),
            sha256: sha256.to_string(),
            size,
            owner_site: site.clone(),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn check_hash(s: &str) -> Result<(), BlobError> {
    if is_sha256_hex(s) {
        Ok(())
    } else {
        Err(BlobError::BadHash(s.to_string()))
    }
}

/// Content-addressed store laid out as `<root>/<aa>/<bb>/<sha256>`.
#[derive(Debug, Clone)]
pub struct BlobStore {
    site: SiteCode,
    root: PathBuf,
}

impl BlobStore {
    pub fn open(site: SiteCode, root: impl Into<PathBuf>) -> Result<Self, BlobError> {
        let root = root.into();
        fs::create_dir_all(root.join("tmp"))?;
        Ok(BlobStore { site, root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, sha: &str) -> PathBuf {
        self.root.join(&sha[..2]).join(&sha[2..4]).join(sha)
    }

    /// Store `bytes`; identical content yields the same [`FileRef`].
    pub fn put(&self, bytes: &[u8]) -> Result<FileRef, BlobError> {
        if bytes.is_empty() {
            return Err(BlobError::Empty);
        }
        let sha = sha256_hex(bytes);
        let dest = self.path_for(&sha);
        if !dest.exists() {
            fs::create_dir_all(dest.parent().expect("fanout dir"))?;
            let tmp = self
                .root
                .join("tmp")
                .join(format!("{}.{:016x}", &sha[..16], rand::rng().random::<u64>()));
            {
                let mut f = fs::File::create(&tmp)?;
                f.write_all(bytes)?;
                f.sync_data()?;
            }
            // Concurrent puts of the same content race benignly: both temp
            // files hold identical bytes.
            if let Err(e) = fs::rename(&tmp, &dest) {
                let _ = fs::remove_file(&tmp);
                return Err(e.into());
            }
        }
        FileRef::for_digest(&self.site, &sha, bytes.len() as u64)
    }

    /// Fetch by digest, re-checking the hash.
    pub fn get(&self, sha: &str) -> Result<Vec<u8>, BlobError> {
        check_hash(sha)?;
        let bytes = match fs::read(self.path_for(sha)) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => return Err(BlobError::NotFound(sha.to_string())),
            Err(e) => return Err(e.into()),
        };
        if sha256_hex(&bytes) != sha {
            return Err(BlobError::CorruptBlob(sha.to_string()));
        }
        Ok(bytes)
    }

    pub fn contains(&self, sha: &str) -> bool {
        is_sha256_hex(sha) && self.path_for(sha).is_file()
    }

    /// Find the full digest for a file id minted by this store.
    pub fn resolve(&self, file_id: &GlobalId) -> Option<String> {
        if file_id.kind() != IdKind::File || file_id.site() != &self.site {
            return None;
        }
        let prefix = file_id.local_hex();
        let dir = self.root.join(&prefix[..2]).join(&prefix[2..4]);
        fs::read_dir(dir)
            .ok()?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .find(|name| name.starts_with(&prefix) && is_sha256_hex(name))
    }

    /// `(sha256, size)` of every stored blob, sorted by digest.
    pub fn inventory(&self) -> Result<Vec<(String, u64)>, BlobError> {
        let mut out = Vec::new();
        for a in fs::read_dir(&self.root)? {
            let a = a?;
            if !a.file_type()?.is_dir() || a.file_name() == "tmp" {
                continue;
            }
            for b in fs::read_dir(a.path())? {
                let b = b?;
                for f in fs::read_dir(b.path())? {
                    let f = f?;
                    if let Ok(name) = f.file_name().into_string() {
                        if is_sha256_hex(&name) {
                            out.push((name, f.metadata()?.len()));
                        }
                    }
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store() -> (tempfile::TempDir, BlobStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = BlobStore::open(SiteCode::new("CAM").unwrap(), dir.path().join("store")).unwrap();
        (dir, s)
    }

    #[test]
    fn round_trip_and_idempotent_put() {
        let (_d, s) = store();
        let a = s.put(b"hello grid").unwrap();
        let b = s.put(b"hello grid").unwrap();
        assert_eq!(a, b);
        assert_eq!(s.get(&a.sha256).unwrap(), b"hello grid");
        assert_eq!(a.size, 10);
        assert_eq!(a.owner_site, *a.id.site());
        assert_eq!(s.resolve(&a.id).as_deref(), Some(a.sha256.as_str()));
        assert_eq!(s.inventory().unwrap(), vec![(a.sha256.clone(), 10)]);
    }

    #[test]
    fn layout_is_two_level_fanout() {
        let (_d, s) = store();
        let r = s.put(b"x").unwrap();
        let p = s.root().join(&r.sha256[..2]).join(&r.sha256[2..4]).join(&r.sha256);
        assert!(p.is_file());
    }

    #[test]
    fn missing_corrupt_and_empty() {
        let (_d, s) = store();
        assert!(matches!(s.get(&"0".repeat(64)), Err(BlobError::NotFound(_))));
        assert!(matches!(s.get("nothex"), Err(BlobError::BadHash(_))));
        assert!(matches!(s.put(b""), Err(BlobError::Empty)));
        let r = s.put(b"payload").unwrap();
        let p = s.root().join(&r.sha256[..2]).join(&r.sha256[2..4]).join(&r.sha256);
        fs::write(p, b"tampered").unwrap();
        assert!(matches!(s.get(&r.sha256), Err(BlobError::CorruptBlob(_))));
    }

    #[test]
    fn eight_megabyte_blob_round_trips() {
        let (_d, s) = store();
        let big: Vec<u8> = (0..8 * 1024 * 1024u32).map(|i| (i.wrapping_mul(2654435761) >> 13) as u8).collect();
        let r = s.put(&big).unwrap();
        assert_eq!(r.size, big.len() as u64);
        assert!(s.get(&r.sha256).unwrap() == big);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn get_put_identity(bytes in proptest::collection::vec(any::<u8>(), 1..20_000)) {
            let (_d, s) = store();
            let r = s.put(&bytes).unwrap();
            prop_assert_eq!(&s.get(&r.sha256).unwrap(), &bytes);
            prop_assert_eq!(r.sha256, hex::encode(Sha256::digest(&bytes)));
        }
    }
}
