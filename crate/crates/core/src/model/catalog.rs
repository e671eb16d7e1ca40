use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::Datelike;
use thiserror::Error;

use super::records::*;
use crate::ids::{GlobalId, IdKind, SiteCode};
use crate::queryir::{LocalPlan, Vocabulary};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("dangling parent: {0}")]
    DanglingParent(String),
    #[error("id {id} was minted by {site}, not by this site")]
    ForeignSite { id: GlobalId, site: SiteCode },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("unknown attribute {0}")]
    UnknownAttribute(String),
    #[error("catalog log {path}: {msg}")]
    Log { path: PathBuf, msg: String },
    #[error("catalog i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One study with its series, as handed to [`Catalog::ingest_tree`].
#[derive(Debug, Clone)]
pub struct StudyTree {
    pub study: StudyRecord,
    pub series: Vec<SeriesTree>,
}

#[derive(Debug, Clone)]
pub struct SeriesTree {
    pub series: SeriesRecord,
    pub images: Vec<ImageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct CatalogStats {
    pub patients: u64,
    pub images: u64,
    pub derived_files: u64,
    pub total_stored_bytes: u64,
}

#[derive(Debug, Default, Clone)]
struct State {
    patients: BTreeMap<GlobalId, PatientRecord>,
    studies: BTreeMap<GlobalId, StudyRecord>,
    series: BTreeMap<GlobalId, SeriesRecord>,
    images: BTreeMap<GlobalId, ImageRecord>,
    /// Keyed by (image, algorithm); the sequence number orders writes so the
    /// latest value of a scalar wins when several algorithms emit one name.
    derived: BTreeMap<(GlobalId, GlobalId), (u64, DerivedRecord)>,
    derived_by_image: HashMap<GlobalId, BTreeSet<GlobalId>>,
    algorithms: BTreeMap<GlobalId, AlgorithmRecord>,
    next_seq: u64,
}

impl State {
    fn get(&self, record: &Record) -> Option<Record> {
        match record {
            Record::Patient(r) => self.patients.get(&r.id).cloned().map(Record::Patient),
            Record::Study(r) => self.studies.get(&r.id).cloned().map(Record::Study),
            Record::Series(r) => self.series.get(&r.id).cloned().map(Record::Series),
            Record::Image(r) => self.images.get(&r.id).cloned().map(Record::Image),
            Record::Derived(r) => self
                .derived
                .get(&(r.image.clone(), r.algorithm.clone()))
                .map(|(_, d)| Record::Derived(d.clone())),
            Record::Algorithm(r) => self.algorithms.get(&r.id).cloned().map(Record::Algorithm),
        }
    }

    fn apply(&mut self, record: Record) {
        match record {
            Record::Patient(r) => {
                self.patients.insert(r.id.clone(), r);
            }
            Record::Study(r) => {
                self.studies.insert(r.id.clone(), r);
            }
            Record::Series(r) => {
                self.series.insert(r.id.clone(), r);
            }
            Record::Image(r) => {
                self.images.insert(r.id.clone(), r);
            }
            Record::Derived(r) => {
                let seq = self.next_seq;
                self.next_seq += 1;
                self.derived_by_image
                    .entry(r.image.clone())
                    .or_default()
                    .insert(r.algorithm.clone());
                self.derived.insert((r.image.clone(), r.algorithm.clone()), (seq, r));
            }
            Record::Algorithm(r) => {
                self.algorithms.insert(r.id.clone(), r);
            }
        }
    }

    fn derived_scalars(&self, image: &GlobalId) -> BTreeMap<String, f64> {
        let mut entries: Vec<&(u64, DerivedRecord)> = self
            .derived_by_image
            .get(image)
            .into_iter()
            .flatten()
            .filter_map(|alg| self.derived.get(&(image.clone(), alg.clone())))
            .collect();
        entries.sort_by_key(|(seq, _)| *seq);
        let mut out = BTreeMap::new();
        for (_, rec) in entries {
            out.extend(rec.scalars.iter().map(|(k, v)| (k.clone(), *v)));
        }
        out
    }

    fn join(&self, image: &ImageRecord) -> Option<JoinedRow> {
        let series = self.series.get(&image.series)?;
        let study = self.studies.get(&series.study)?;
        let patient = self.patients.get(&study.patient)?;
        Some(JoinedRow {
            patient: patient.clone(),
            study: study.clone(),
            series: series.clone(),
            image: image.clone(),
            derived: self.derived_scalars(&image.id),
        })
    }
}

struct LogWriter {
    path: PathBuf,
    file: File,
}

impl LogWriter {
    fn append(&mut self, records: &[Record]) -> Result<(), CatalogError> {
        let mut buf = String::new();
        for r in records {
            buf.push_str(&r.to_log_line());
            buf.push('\n');
        }
        self.file.write_all(buf.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Per-site metadata catalog.
///
/// Mutations are serialized through a single writer lock and appended to the
/// log before they become visible; readers work against the in-memory index.
pub struct Catalog {
    site: SiteCode,
    state: RwLock<State>,
    writer: Mutex<Option<LogWriter>>,
}

impl Catalog {
    /// Catalog with no backing log.
    pub fn in_memory(site: SiteCode) -> Self {
        Catalog {
            site,
            state: RwLock::new(State::default()),
            writer: Mutex::new(None),
        }
    }

    /// Open (or create) a catalog backed by the log at `path`, replaying it.
    /// A torn final line from an interrupted append is discarded.
    pub fn open(site: SiteCode, path: &Path) -> Result<Self, CatalogError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut state = State::default();
        let mut good_len = 0u64;
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 || !line.ends_with('\n') {
                    break;
                }
                let record = Record::from_log_line(line.trim_end_matches('\n')).map_err(|msg| {
                    CatalogError::Log {
                        path: path.to_path_buf(),
                        msg,
                    }
                })?;
                state.apply(record);
                good_len += n as u64;
            }
        }
        if file.metadata()?.len() != good_len {
            log::warn!("{}: discarding torn trailing record", path.display());
            file.set_len(good_len)?;
            file.seek(SeekFrom::End(0))?;
        }
        Ok(Catalog {
            site,
            state: RwLock::new(state),
            writer: Mutex::new(Some(LogWriter {
                path: path.to_path_buf(),
                file,
            })),
        })
    }

    pub fn site(&self) -> &SiteCode {
        &self.site
    }

    fn check_site(&self, id: &GlobalId) -> Result<(), CatalogError> {
        if id.site() != &self.site {
            return Err(CatalogError::ForeignSite {
                id: id.clone(),
                site: id.site().clone(),
            });
        }
        Ok(())
    }

    fn check_kind(id: &GlobalId, kind: IdKind) -> Result<(), CatalogError> {
        if id.kind() != kind {
            return Err(CatalogError::InvalidRecord(format!("{id} is not a {kind} id")));
        }
        Ok(())
    }

    /// Write the records that differ from what is stored; returns how many.
    fn commit(&self, records: Vec<Record>) -> Result<usize, CatalogError> {
        let mut writer = self.writer.lock().unwrap();
        let changed: Vec<Record> = {
            let state = self.state.read().unwrap();
            records
                .into_iter()
                .filter(|r| state.get(r).as_ref() != Some(r))
                .collect()
        };
        if changed.is_empty() {
            return Ok(0);
        }
        if let Some(w) = writer.as_mut() {
            w.append(&changed).map_err(|e| match e {
                CatalogError::Io(io) => CatalogError::Log {
                    path: w.path.clone(),
                    msg: io.to_string(),
                },
                other => other,
            })?;
        }
        let mut state = self.state.write().unwrap();
        let n = changed.len();
        for r in changed {
            state.apply(r);
        }
        Ok(n)
    }

    /// Upsert a full patient tree. Returns the number of records written;
    /// re-ingesting an identical tree writes nothing.
    pub fn ingest_tree(&self, patient: PatientRecord, studies: Vec<StudyTree>) -> Result<usize, CatalogError> {
        let current_year = chrono::Utc::now().year();
        Self::check_kind(&patient.id, IdKind::Patient)?;
        self.check_site(&patient.id)?;
        if !(1900..=current_year).contains(&patient.birth_year) {
            return Err(CatalogError::InvalidRecord(format!(
                "birth year {} outside [1900, {current_year}]",
                patient.birth_year
            )));
        }
        if patient.pseudonym.is_empty() {
            return Err(CatalogError::InvalidRecord("empty pseudonym".into()));
        }
        let mut records = vec![Record::Patient(patient.clone())];
        for st in studies {
            Self::check_kind(&st.study.id, IdKind::Study)?;
            self.check_site(&st.study.id)?;
            if st.study.patient != patient.id {
                return Err(CatalogError::DanglingParent(format!(
                    "study {} references patient {} outside this tree",
                    st.study.id, st.study.patient
                )));
            }
            for se in &st.series {
                Self::check_kind(&se.series.id, IdKind::Series)?;
                self.check_site(&se.series.id)?;
                if se.series.study != st.study.id {
                    return Err(CatalogError::DanglingParent(format!(
                        "series {} references study {} outside this tree",
                        se.series.id, se.series.study
                    )));
                }
                for img in &se.images {
                    Self::check_kind(&img.id, IdKind::Image)?;
                    self.check_site(&img.id)?;
                    if img.series != se.series.id {
                        return Err(CatalogError::DanglingParent(format!(
                            "image {} references series {} outside this tree",
                            img.id, img.series
                        )));
                    }
                    if img.file.owner_site != self.site || img.file.id.site() != &self.site {
                        return Err(CatalogError::ForeignSite {
                            id: img.file.id.clone(),
                            site: img.file.owner_site.clone(),
                        });
                    }
                    if img.rows == 0 || img.cols == 0 {
                        return Err(CatalogError::InvalidRecord(format!("image {} has zero extent", img.id)));
                    }
                    if let Some(d) = img.dose_mgy {
                        if !(d.is_finite() && d >= 0.0) {
                            return Err(CatalogError::InvalidRecord(format!("image {} dose {d}", img.id)));
                        }
                    }
                }
            }
            records.push(Record::Study(st.study));
            for se in st.series {
                records.push(Record::Series(se.series));
                records.extend(se.images.into_iter().map(Record::Image));
            }
        }
        self.commit(records)
    }

    /// Insert or overwrite the derived record for `(image, algorithm)`.
    pub fn upsert_derived(&self, record: DerivedRecord) -> Result<usize, CatalogError> {
        Self::check_kind(&record.id, IdKind::Derived)?;
        self.check_site(&record.id)?;
        if record.scalars.values().any(|v| !v.is_finite()) {
            return Err(CatalogError::InvalidRecord("non-finite scalar".into()));
        }
        {
            let state = self.state.read().unwrap();
            if !state.images.contains_key(&record.image) {
                return Err(CatalogError::DanglingParent(format!("no image {}", record.image)));
            }
            let Some(alg) = state.algorithms.get(&record.algorithm) else {
                return Err(CatalogError::DanglingParent(format!("no algorithm {}", record.algorithm)));
            };
            if let Some(name) = record.scalars.keys().find(|k| !alg.emits.contains(k)) {
                return Err(CatalogError::InvalidRecord(format!(
                    "scalar {name:?} is not emitted by {} v{}",
                    alg.name, alg.version
                )));
            }
        }
        self.commit(vec![Record::Derived(record)])
    }

    /// Register an algorithm record. Algorithms may have been minted at any
    /// site (they are gossiped VO-wide), so no site check applies.
    pub fn upsert_algorithm(&self, record: AlgorithmRecord) -> Result<usize, CatalogError> {
        Self::check_kind(&record.id, IdKind::Algorithm)?;
        if record.emits.is_empty() {
            return Err(CatalogError::InvalidRecord("algorithm emits nothing".into()));
        }
        self.commit(vec![Record::Algorithm(record)])
    }

    pub fn lookup(&self, id: &GlobalId) -> Option<Record> {
        let state = self.state.read().unwrap();
        match id.kind() {
            IdKind::Patient => state.patients.get(id).cloned().map(Record::Patient),
            IdKind::Study => state.studies.get(id).cloned().map(Record::Study),
            IdKind::Series => state.series.get(id).cloned().map(Record::Series),
            IdKind::Image => state.images.get(id).cloned().map(Record::Image),
            IdKind::Derived => state
                .derived
                .values()
                .find(|(_, d)| &d.id == id)
                .map(|(_, d)| Record::Derived(d.clone())),
            IdKind::Algorithm => state.algorithms.get(id).cloned().map(Record::Algorithm),
            IdKind::File => None,
        }
    }

    pub fn derived_for(&self, image: &GlobalId, algorithm: &GlobalId) -> Option<DerivedRecord> {
        let state = self.state.read().unwrap();
        state
            .derived
            .get(&(image.clone(), algorithm.clone()))
            .map(|(_, d)| d.clone())
    }

    pub fn algorithms(&self) -> Vec<AlgorithmRecord> {
        self.state.read().unwrap().algorithms.values().cloned().collect()
    }

    /// Query vocabulary: the fixed attributes plus every scalar name emitted
    /// by a registered algorithm.
    pub fn vocabulary(&self) -> Vocabulary {
        let state = self.state.read().unwrap();
        Vocabulary::with_derived(state.algorithms.values().flat_map(|a| a.emits.iter().cloned()))
    }

    /// Images whose joined row satisfies the plan, in id order.
    pub fn select(&self, plan: &LocalPlan) -> Result<Vec<JoinedRow>, CatalogError> {
        let state = self.state.read().unwrap();
        let vocab = Vocabulary::with_derived(state.algorithms.values().flat_map(|a| a.emits.iter().cloned()));
        if let Some(name) = plan.derived_columns().find(|n| !vocab.has_derived(n)) {
            return Err(CatalogError::UnknownAttribute(format!("derived.{name}")));
        }
        let mut out = Vec::new();
        for image in state.images.values() {
            let row = state
                .join(image)
                .ok_or_else(|| CatalogError::DanglingParent(format!("image {} has a broken ancestry", image.id)))?;
            if plan.matches(&row) {
                out.push(row);
            }
        }
        Ok(out)
    }

    pub fn stats(&self) -> CatalogStats {
        let state = self.state.read().unwrap();
        let mut blobs: BTreeMap<&str, u64> = BTreeMap::new();
        for img in state.images.values() {
            blobs.insert(&img.file.sha256, img.file.size);
        }
        for (_, d) in state.derived.values() {
            if let Some(f) = &d.file {
                blobs.insert(&f.sha256, f.size);
            }
        }
        CatalogStats {
            patients: state.patients.len() as u64,
            images: state.images.len() as u64,
            derived_files: state.derived.len() as u64,
            total_stored_bytes: blobs.values().sum(),
        }
    }

    /// Every stored record: patients, studies, series, images, derived,
    /// algorithms, each group in id order.
    pub fn export(&self) -> Vec<Record> {
        let state = self.state.read().unwrap();
        let mut out: Vec<Record> = Vec::new();
        out.extend(state.patients.values().cloned().map(Record::Patient));
        out.extend(state.studies.values().cloned().map(Record::Study));
        out.extend(state.series.values().cloned().map(Record::Series));
        out.extend(state.images.values().cloned().map(Record::Image));
        let mut derived: Vec<_> = state.derived.values().collect();
        derived.sort_by_key(|(seq, _)| *seq);
        out.extend(derived.into_iter().map(|(_, d)| Record::Derived(d.clone())));
        out.extend(state.algorithms.values().cloned().map(Record::Algorithm));
        out
    }

    /// Full-walk referential integrity check. Returns every violation found.
    pub fn audit(&self) -> Result<(), Vec<String>> {
        let state = self.state.read().unwrap();
        let mut problems = Vec::new();
        for s in state.studies.values() {
            if !state.patients.contains_key(&s.patient) {
                problems.push(format!("study {} -> missing patient {}", s.id, s.patient));
            }
        }
        for s in state.series.values() {
            if !state.studies.contains_key(&s.study) {
                problems.push(format!("series {} -> missing study {}", s.id, s.study));
            }
        }
        for i in state.images.values() {
            if state.join(i).is_none() {
                problems.push(format!("image {} does not reach a patient", i.id));
            }
            if i.file.owner_site != *i.id.site() {
                problems.push(format!("image {} file owned by {}", i.id, i.file.owner_site));
            }
        }
        for (_, d) in state.derived.values() {
            if !state.images.contains_key(&d.image) {
                problems.push(format!("derived {} -> missing image {}", d.id, d.image));
            }
            if !state.algorithms.contains_key(&d.algorithm) {
                problems.push(format!("derived {} -> missing algorithm {}", d.id, d.algorithm));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}
