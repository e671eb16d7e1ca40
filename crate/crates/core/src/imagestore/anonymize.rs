//! Ingest-time pseudonymization.
//!
//! The pseudonym and the replacement patient id are both keyed hashes of the
//! original patient id under the site secret, so re-ingesting the same patient
//! is stable while nothing on the wire can be linked back without the secret.
//! The original → GlobalId mapping is kept in a site-local linkage file.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

use super::mgi::{HeaderKey, MgiFile};
use crate::ids::{GlobalId, IdKind, SiteCode};

#[derive(Debug, Error)]
pub enum AnonymizeError {
    #[error("pseudonym must be non-empty")]
    EmptyPseudonym,
    #[error("pseudonym shares text with the patient name")]
    PseudonymLeaksName,
    #[error("header has no patient.id")]
    MissingPatientId,
    #[error("unparseable birth date {0:?}")]
    BadBirthDate(String),
    #[error("header rewrite failed: {0}")]
    Header(#[from] super::mgi::MgiError),
    #[error("linkage table i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub const PSEUDONYM_PREFIX: &str = "ANON-";

pub struct Anonymizer {
    site: SiteCode,
    secret: Vec<u8>,
    linkage: Mutex<Linkage>,
}

struct Linkage {
    file: Option<File>,
    map: BTreeMap<String, GlobalId>,
}

impl Anonymizer {
    pub fn new(site: SiteCode, secret: impl Into<Vec<u8>>) -> Self {
        Anonymizer {
            site,
            secret: secret.into(),
            linkage: Mutex::new(Linkage {
                file: None,
                map: BTreeMap::new(),
            }),
        }
    }

    /// Like [`Anonymizer::new`], with the linkage table persisted at `path`
    /// as `original<TAB>global-id` lines.
    pub fn with_linkage_file(site: SiteCode, secret: impl Into<Vec<u8>>, path: &Path) -> Result<Self, AnonymizeError> {
        let file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut map = BTreeMap::new();
        for line in BufReader::new(&file).lines() {
            let line = line?;
            if let Some((orig, gid)) = line.split_once('\t') {
                if let Ok(gid) = gid.parse() {
                    map.insert(orig.to_string(), gid);
                }
            }
        }
        let a = Anonymizer::new(site, secret);
        *a.linkage.lock().unwrap() = Linkage { file: Some(file), map };
        Ok(a)
    }

    pub fn site(&self) -> &SiteCode {
        &self.site
    }

    fn mac(&self, parts: &[&[u8]]) -> Vec<u8> {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.secret).expect("hmac key");
        for p in parts {
            mac.update(p);
            mac.update(b"\0");
        }
        mac.finalize().into_bytes().to_vec()
    }

    /// `ANON-<12 hex>`, stable per original patient id and never sharing a
    /// token with `name`.
    pub fn pseudonym_for(&self, original_patient_id: &str, name: Option<&str>) -> String {
        for attempt in 0u32.. {
            let digest = self.mac(&[b"pseudonym", original_patient_id.as_bytes(), &attempt.to_be_bytes()]);
            let p = format!("{PSEUDONYM_PREFIX}{}", &hex::encode(digest)[..12]);
            if name.is_none_or(|n| !leaks(&p, n)) {
                return p;
            }
        }
        unreachable!()
    }

    /// Site-minted replacement id for an original (acquisition) id.
    pub fn mint(&self, kind: IdKind, original: &str) -> GlobalId {
        GlobalId::keyed(&self.site, kind, &self.secret, original)
    }

    pub fn linkage_len(&self) -> usize {
        self.linkage.lock().unwrap().map.len()
    }

    pub fn linked(&self, original: &str) -> Option<GlobalId> {
        self.linkage.lock().unwrap().map.get(original).cloned()
    }

    fn record_link(&self, original: &str, gid: &GlobalId) -> Result<(), AnonymizeError> {
        let mut l = self.linkage.lock().unwrap();
        if l.map.contains_key(original) {
            return Ok(());
        }
        if let Some(f) = l.file.as_mut() {
            writeln!(f, "{original}\t{gid}")?;
            f.flush()?;
        }
        l.map.insert(original.to_string(), gid.clone());
        Ok(())
    }

    /// True if the header already carries a patient GlobalId and a year-only
    /// birth date.
    pub fn is_anonymized(f: &MgiFile) -> bool {
        let id_ok = f
            .get(HeaderKey::PatientId)
            .is_some_and(|v| GlobalId::parse_kind(v, IdKind::Patient).is_ok());
        let birth_ok = f
            .get(HeaderKey::PatientBirthDate)
            .is_none_or(|v| v.len() == 4 && v.bytes().all(|b| b.is_ascii_digit()));
        let name_ok = f
            .get(HeaderKey::PatientName)
            .is_none_or(|v| v.starts_with(PSEUDONYM_PREFIX));
        id_ok && birth_ok && name_ok
    }

    /// Replace the name, truncate the birth date to its year and swap the
    /// patient id for a site-minted one. Everything else, pixels included,
    /// is left untouched. An already anonymized file is returned as is.
    pub fn anonymize(&self, f: &MgiFile, pseudonym: &str) -> Result<MgiFile, AnonymizeError> {
        if Self::is_anonymized(f) {
            return Ok(f.clone());
        }
        if pseudonym.is_empty() {
            return Err(AnonymizeError::EmptyPseudonym);
        }
        if let Some(name) = f.get(HeaderKey::PatientName) {
            if leaks(pseudonym, name) {
                return Err(AnonymizeError::PseudonymLeaksName);
            }
        }
        let original = f
            .get(HeaderKey::PatientId)
            .ok_or(AnonymizeError::MissingPatientId)?
            .to_string();
        let mut out = f.clone();
        out.set(HeaderKey::PatientName, pseudonym)?;
        if let Some(b) = f.get(HeaderKey::PatientBirthDate) {
            out.set(HeaderKey::PatientBirthDate, birth_year_of(b)?.to_string())?;
        }
        let gid = match GlobalId::parse_kind(&original, IdKind::Patient) {
            Ok(already) => already,
            Err(_) => self.mint(IdKind::Patient, &original),
        };
        out.set(HeaderKey::PatientId, gid.to_string())?;
        self.record_link(&original, &gid)?;
        Ok(out)
    }
}

/// Workstation-side minimization before upload: drop the patient name and
/// cut the birth date to its year. The receiving node still pseudonymizes;
/// this only keeps direct identifiers off the wire.
pub fn strip_direct_identifiers(f: &MgiFile) -> Result<MgiFile, AnonymizeError> {
    let mut out = f.clone();
    out.remove(HeaderKey::PatientName)?;
    if let Some(b) = f.get(HeaderKey::PatientBirthDate) {
        out.set(HeaderKey::PatientBirthDate, birth_year_of(b)?.to_string())?;
    }
    Ok(out)
}

/// Year of an ISO date (`YYYY-MM-DD`) or a bare year.
pub fn birth_year_of(s: &str) -> Result<i32, AnonymizeError> {
    let year = s.get(..4).filter(|y| y.bytes().all(|b| b.is_ascii_digit()));
    let tail_ok = s.len() == 4
        || chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok();
    match (year, tail_ok) {
        (Some(y), true) => Ok(y.parse().expect("four digits")),
        _ => Err(AnonymizeError::BadBirthDate(s.to_string())),
    }
}

/// Does `pseudonym` contain the name or any name token of three or more
/// characters (case-insensitive)?
/// Only the digest part counts; the fixed prefix identifies nobody.
fn leaks(pseudonym: &str, name: &str) -> bool {
    let p = pseudonym.strip_prefix(PSEUDONYM_PREFIX).unwrap_or(pseudonym).to_lowercase();
    let n = name.trim().to_lowercase();
    if n.is_empty() {
        return false;
    }
    p.contains(&n)
        || n.split(|c: char| !c.is_alphanumeric())
            .filter(|t| t.chars().count() >= 3)
            .any(|t| p.contains(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MgiFile {
        let header = vec![
            (HeaderKey::PatientName, "Jane Doe".to_string()),
            (HeaderKey::PatientId, "P-77".to_string()),
            (HeaderKey::PatientSex, "F".to_string()),
            (HeaderKey::PatientBirthDate, "1950-03-14".to_string()),
            (HeaderKey::StudyId, "S-1".to_string()),
            (HeaderKey::ImageLaterality, "L".to_string()),
        ];
        MgiFile::new(header, 2, 2, vec![1, 2, 3, 65535]).unwrap()
    }

    #[test]
    fn stripping_keeps_what_ingest_needs() {
        let f = sample();
        let s = strip_direct_identifiers(&f).unwrap();
        assert_eq!(s.get(HeaderKey::PatientName), None);
        assert_eq!(s.get(HeaderKey::PatientId), f.get(HeaderKey::PatientId));
        assert_eq!(s.get(HeaderKey::PatientBirthDate).map(str::len), Some(4));
        assert_eq!(s.pixels(), f.pixels());
        let a = Anonymizer::new(SiteCode::new("CAM").unwrap(), b"k".to_vec());
        let p = a.pseudonym_for(f.get(HeaderKey::PatientId).unwrap(), None);
        let via_strip = a.anonymize(&s, &p).unwrap();
        assert!(Anonymizer::is_anonymized(&via_strip));
        assert_eq!(via_strip.get(HeaderKey::PatientId), a.anonymize(&f, &p).unwrap().get(HeaderKey::PatientId));
    }

    fn anon() -> Anonymizer {
        Anonymizer::new(SiteCode::new("CAM").unwrap(), b"site-secret".to_vec())
    }

    #[test]
    fn replaces_identifying_fields_only() {
        let a = anon();
        let f = sample();
        let p = a.pseudonym_for("P-77", Some("Jane Doe"));
        assert!(p.starts_with("ANON-") && p.len() == 17);
        let g = a.anonymize(&f, &p).unwrap();
        assert_eq!(g.get(HeaderKey::PatientName), Some(p.as_str()));
        assert_eq!(g.get(HeaderKey::PatientBirthDate), Some("1950"));
        let gid = GlobalId::parse_kind(g.get(HeaderKey::PatientId).unwrap(), IdKind::Patient).unwrap();
        assert_eq!(gid.site().as_str(), "CAM");
        assert_eq!(a.linked("P-77"), Some(gid));
        assert_eq!(g.get(HeaderKey::StudyId), Some("S-1"));
        assert_eq!(g.get(HeaderKey::ImageLaterality), Some("L"));
        assert_eq!(g.pixels(), f.pixels());
        let bytes = g.to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        assert!(!text.contains("Jane") && !text.contains("1950-03-14"));
    }

    #[test]
    fn idempotent() {
        let a = anon();
        let p = a.pseudonym_for("P-77", None);
        let once = a.anonymize(&sample(), &p).unwrap();
        let twice = a.anonymize(&once, &p).unwrap();
        assert_eq!(once, twice);
        assert_eq!(a.linkage_len(), 1);
    }

    #[test]
    fn pseudonyms_are_stable_and_secret_keyed() {
        let a = anon();
        assert_eq!(a.pseudonym_for("P-1", None), a.pseudonym_for("P-1", None));
        assert_ne!(a.pseudonym_for("P-1", None), a.pseudonym_for("P-2", None));
        let b = Anonymizer::new(SiteCode::new("CAM").unwrap(), b"other".to_vec());
        assert_ne!(a.pseudonym_for("P-1", None), b.pseudonym_for("P-1", None));
    }

    #[test]
    fn rejects_bad_pseudonyms() {
        let a = anon();
        assert!(matches!(a.anonymize(&sample(), ""), Err(AnonymizeError::EmptyPseudonym)));
        assert!(matches!(
            a.anonymize(&sample(), "ANON-jane-1"),
            Err(AnonymizeError::PseudonymLeaksName)
        ));
    }

    #[test]
    fn pseudonym_skips_colliding_hex() {
        // A name made of hex-looking tokens forces the retry path sometimes;
        // whatever comes out must not leak.
        let a = anon();
        for i in 0..200 {
            let name = format!("{:03x} {:03x}", i, i * 7);
            let p = a.pseudonym_for(&format!("P{i}"), Some(&name));
            assert!(!leaks(&p, &name));
        }
    }

    #[test]
    fn pseudonymized_names_do_not_block_pseudonyms() {
        let a = anon();
        let p = a.pseudonym_for("P-9", Some("ANON-0123456789ab"));
        assert!(p.starts_with(PSEUDONYM_PREFIX));
    }

    #[test]
    fn linkage_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("linkage.tsv");
        let site = SiteCode::new("CAM").unwrap();
        let gid = {
            let a = Anonymizer::with_linkage_file(site.clone(), b"k".to_vec(), &path).unwrap();
            let g = a.anonymize(&sample(), "ANON-000000000000").unwrap();
            GlobalId::parse_kind(g.get(HeaderKey::PatientId).unwrap(), IdKind::Patient).unwrap()
        };
        let a = Anonymizer::with_linkage_file(site, b"k".to_vec(), &path).unwrap();
        assert_eq!(a.linked("P-77"), Some(gid));
    }

    #[test]
    fn birth_year_parsing() {
        assert_eq!(birth_year_of("1950-03-14").unwrap(), 1950);
        assert_eq!(birth_year_of("1950").unwrap(), 1950);
        assert!(birth_year_of("1950-13-40").is_err());
        assert!(birth_year_of("50").is_err());
    }
}
