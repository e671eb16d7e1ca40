//! Per-site image storage: the content-addressed blob store, the MGI file
//! format and ingest-time anonymization.

mod anonymize;
mod blob;
mod mgi;

pub use anonymize::{birth_year_of, strip_direct_identifiers, AnonymizeError, Anonymizer, PSEUDONYM_PREFIX};
pub use blob::{is_sha256_hex, sha256_hex, BlobError, BlobStore, FileRef};
pub use mgi::{HeaderKey, MgiError, MgiFile, MAGIC};
