//! Per-site metadata catalog: the patient → study → series → image hierarchy
//! plus derived-data and algorithm records.
//!
//! Persistence is an append-only log of `UPSERT <kind> <json>` lines replayed
//! at startup.

mod catalog;
mod records;

pub use catalog::{Catalog, CatalogError, CatalogStats, SeriesTree, StudyTree};
pub use records::{
    age_at, AlgorithmRecord, DerivedRecord, ImageRecord, JoinedRow, Laterality, PatientRecord, Record,
    SeriesRecord, Sex, StudyRecord, View,
};

#[cfg(test)]
mod tests;
