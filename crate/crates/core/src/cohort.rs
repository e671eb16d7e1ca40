//! Seeded synthetic cohorts and their ground-truth manifests.
//!
//! Default profiles keep the per-site images-per-patient ratios of the two
//! original sites (Cambridge 9716 images over 1423 patients, Udine 17285 over
//! 1479) at desk scale. Every patient carries a distinctive canary name and a
//! full birth date so traffic captures can be checked for leaks.

use std::collections::BTreeSet;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::{GlobalId, IdKind, SiteCode};
use crate::imagestore::{HeaderKey, MgiFile, PSEUDONYM_PREFIX};
use crate::model::{CatalogStats, Laterality, Sex, View};
use crate::node::{ClientError, NodeClient};

pub const CAMBRIDGE_PATIENTS: usize = 1423;
pub const CAMBRIDGE_IMAGES: usize = 9716;
pub const UDINE_PATIENTS: usize = 1479;
pub const UDINE_IMAGES: usize = 17285;
pub const DEFAULT_PATIENTS: usize = 100;
pub const BLOCK: usize = 3;
const CELL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Cambridge,
    Udine,
}

impl std::str::FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cambridge" | "cam" => Ok(Profile::Cambridge),
            "udine" | "udi" => Ok(Profile::Udine),
            other => Err(format!("unknown cohort profile {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub seed: u64,
    pub site: SiteCode,
    pub n_patients: usize,
    pub images_per_patient: f64,
    pub female_fraction: f64,
    pub birth_years: (i32, i32),
    pub study_years: (i32, i32),
    pub rows: u32,
    pub cols: u32,
    pub dose_mean: f64,
    pub dose_sd: f64,
    pub dose_missing: f64,
    /// The first patient gets exactly this many images.
    pub anchor_images: usize,
}

impl CohortSpec {
    pub fn profile(profile: Profile, site: SiteCode, seed: u64, n_patients: usize) -> Self {
        let (patients, images, anchor) = match profile {
            Profile::Cambridge => (CAMBRIDGE_PATIENTS, CAMBRIDGE_IMAGES, 8),
            Profile::Udine => (UDINE_PATIENTS, UDINE_IMAGES, 16),
        };
        CohortSpec {
            seed,
            site,
            n_patients,
            images_per_patient: images as f64 / patients as f64,
            female_fraction: 0.52,
            birth_years: (1930, 1965),
            study_years: (1999, 2005),
            rows: 64,
            cols: 64,
            dose_mean: 1.5,
            dose_sd: 0.4,
            dose_missing: 0.1,
            anchor_images: anchor,
        }
    }

    pub fn full_scale(profile: Profile, site: SiteCode, seed: u64) -> Self {
        let n = match profile {
            Profile::Cambridge => CAMBRIDGE_PATIENTS,
            Profile::Udine => UDINE_PATIENTS,
        };
        CohortSpec::profile(profile, site, seed, n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: String,
    pub laterality: Laterality,
    pub view: View,
    pub dose_mgy: Option<f64>,
    pub pixel_seed: u64,
    /// Top-left corners of the planted 3×3 blocks of 65535.
    pub blocks: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStudy {
    pub id: String,
    pub series_id: String,
    pub date: NaiveDate,
    pub images: Vec<SyntheticImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPatient {
    pub original_id: String,
    pub name: String,
    pub birth_date: NaiveDate,
    pub sex: Sex,
    pub studies: Vec<SyntheticStudy>,
}

impl SyntheticPatient {
    pub fn image_count(&self) -> usize {
        self.studies.iter().map(|s| s.images.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub patients: Vec<SyntheticPatient>,
}

const GIVEN: &[&str] = &[
    "Agatha", "Beatrix", "Clementine", "Dorothea", "Eulalia", "Filomena", "Griselda", "Hortensia", "Ignatia",
    "Jacinta", "Leopoldina", "Marcellina", "Nerissa", "Ottilie", "Petronella", "Rosalind", "Serafina", "Theodora",
    "Ursula", "Wilhelmina", "Albrecht", "Bartholomew", "Cornelius", "Desmond",
];
const FAMILY: &[&str] = &[
    "Quillfeather", "Marchbanks", "Thistlewood", "Ravenscroft", "Oakenshaw", "Pemberton", "Winterbourne",
    "Ashcombe", "Fairweather", "Hollingsworth", "Blackthorne", "Cavendish", "Delacroix", "Esterhazy",
];

fn rng_for(seed: u64, site: &SiteCode, salt: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(format!("{seed}|{}|{salt}", site.as_str()).as_bytes());
    ChaCha8Rng::from_seed(digest.into())
}

fn random_date(rng: &mut impl Rng, years: (i32, i32)) -> NaiveDate {
    let y = rng.random_range(years.0..=years.1);
    NaiveDate::from_ymd_opt(y, rng.random_range(1..=12), rng.random_range(1..=28)).expect("valid day")
}

fn plant_blocks(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let cells: Vec<(usize, usize)> = (0..rows / CELL)
        .flat_map(|r| (0..cols / CELL).map(move |c| (r, c)))
        .collect();
    let n = rng.random_range(0..=3usize).min(cells.len());
    let mut chosen = BTreeSet::new();
    while chosen.len() < n {
        chosen.insert(cells[rng.random_range(0..cells.len())]);
    }
    chosen
        .into_iter()
        .map(|(r, c)| {
            let slack = CELL - BLOCK - 2;
            (r * CELL + 1 + rng.random_range(0..=slack), c * CELL + 1 + rng.random_range(0..=slack))
        })
        .collect()
}

const VIEWS: [(Laterality, View); 4] = [
    (Laterality::L, View::CC),
    (Laterality::R, View::CC),
    (Laterality::L, View::MLO),
    (Laterality::R, View::MLO),
];

impl Cohort {
    pub fn generate(spec: &CohortSpec) -> Cohort {
        assert!(spec.rows as usize >= CELL && spec.cols as usize >= CELL, "images must be at least 16×16");
        let mut rng = rng_for(spec.seed, &spec.site, "cohort");
        let dose = Normal::new(spec.dose_mean, spec.dose_sd.max(0.0)).expect("finite dose parameters");
        let whole = spec.images_per_patient.floor() as usize;
        let frac = spec.images_per_patient - whole as f64;
        let mut patients = Vec::with_capacity(spec.n_patients);
        for p in 0..spec.n_patients {
            let k = if p == 0 {
                spec.anchor_images
            } else {
                (whole + usize::from(rng.random_bool(frac))).max(1)
            };
            let sex = if p == 0 || rng.random_bool(spec.female_fraction) { Sex::F } else { Sex::M };
            let suffix: String = (0..6).map(|_| rng.random_range(b'A'..=b'Z') as char).collect();
            let name = format!(
                "{} {}-{suffix}",
                GIVEN[rng.random_range(0..GIVEN.len())],
                FAMILY[rng.random_range(0..FAMILY.len())]
            );
            let birth_date = random_date(&mut rng, spec.birth_years);
            let n_studies = if k >= 2 && rng.random_bool(0.3) { 2 } else { 1 };
            let mut studies = Vec::new();
            let mut left = k;
            for s in 0..n_studies {
                let here = if s + 1 == n_studies { left } else { left / 2 };
                left -= here;
                let start = rng.random_range(0..4usize);
                let images = (0..here)
                    .map(|i| {
                        let (laterality, view) = VIEWS[(start + i) % 4];
                        let dose_mgy = (!rng.random_bool(spec.dose_missing))
                            .then(|| (dose.sample(&mut rng).max(0.05) * 100.0).round() / 100.0);
                        SyntheticImage {
                            id: format!("IMG-{p:05}-{s}-{i:03}"),
                            laterality,
                            view,
                            dose_mgy,
                            pixel_seed: rng.random(),
                            blocks: plant_blocks(&mut rng, spec.rows as usize, spec.cols as usize),
                        }
                    })
                    .collect();
                studies.push(SyntheticStudy {
                    id: format!("STU-{p:05}-{s}"),
                    series_id: format!("SER-{p:05}-{s}"),
                    date: random_date(&mut rng, spec.study_years),
                    images,
                });
            }
            patients.push(SyntheticPatient {
                original_id: format!("{}-MRN-{:08}", spec.site.as_str(), p + 1),
                name,
                birth_date,
                sex,
                studies,
            });
        }
        Cohort {
            spec: spec.clone(),
            patients,
        }
    }

    pub fn image_count(&self) -> usize {
        self.patients.iter().map(SyntheticPatient::image_count).sum()
    }

    pub fn pixels(&self, img: &SyntheticImage) -> Vec<u16> {
        let (rows, cols) = (self.spec.rows as usize, self.spec.cols as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(img.pixel_seed);
        let mut px: Vec<u16> = (0..rows * cols).map(|_| rng.random_range(0..8000u16)).collect();
        for &(r0, c0) in &img.blocks {
            for r in r0..r0 + BLOCK {
                for c in c0..c0 + BLOCK {
                    px[r * cols + c] = u16::MAX;
                }
            }
        }
        px
    }

    /// The acquisition file as a hospital workstation would upload it.
    pub fn mgi(&self, patient: &SyntheticPatient, study: &SyntheticStudy, img: &SyntheticImage) -> MgiFile {
        let mut header = vec![
            (HeaderKey::PatientName, patient.name.clone()),
            (HeaderKey::PatientId, patient.original_id.clone()),
            (HeaderKey::PatientSex, patient.sex.to_string()),
            (HeaderKey::PatientBirthDate, patient.birth_date.format("%Y-%m-%d").to_string()),
            (HeaderKey::StudyId, study.id.clone()),
            (HeaderKey::StudyDate, study.date.format("%Y-%m-%d").to_string()),
            (HeaderKey::SeriesId, study.series_id.clone()),
            (HeaderKey::SeriesModality, "MG".to_string()),
            (HeaderKey::ImageId, img.id.clone()),
            (HeaderKey::ImageLaterality, img.laterality.to_string()),
            (HeaderKey::ImageView, img.view.to_string()),
        ];
        if let Some(d) = img.dose_mgy {
            header.push((HeaderKey::ImageDose, d.to_string()));
        }
        header.push((HeaderKey::SiteId, self.spec.site.to_string()));
        MgiFile::new(header, self.spec.rows, self.spec.cols, self.pixels(img)).expect("generated files are valid")
    }

    /// Every (patient, study, image) in upload order.
    pub fn images(&self) -> impl Iterator<Item = (&SyntheticPatient, &SyntheticStudy, &SyntheticImage)> {
        self.patients
            .iter()
            .flat_map(|p| p.studies.iter().flat_map(move |s| s.images.iter().map(move |i| (p, s, i))))
    }

    /// Strings that must never appear in anything that leaves a site.
    pub fn canaries(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in &self.patients {
            out.push(p.name.clone());
            out.push(p.birth_date.format("%Y-%m-%d").to_string());
        }
        out
    }

    /// Size of a file after ingest-time anonymization: the name becomes a
    /// fixed-width pseudonym, the birth date its year, the patient id a
    /// GlobalId.
    pub fn stored_size(&self, patient: &SyntheticPatient, study: &SyntheticStudy, img: &SyntheticImage) -> u64 {
        let original = self.mgi(patient, study, img).to_bytes().len() as i64;
        let pseudonym_len = PSEUDONYM_PREFIX.len() as i64 + 12;
        let gid_len = GlobalId::new(self.spec.site.clone(), IdKind::Patient, 0).to_string().len() as i64;
        let delta = (pseudonym_len - patient.name.len() as i64) + (4 - 10)
            + (gid_len - patient.original_id.len() as i64);
        (original + delta) as u64
    }

    /// Ground truth for one image-level predicate over this cohort:
    /// (matching images, distinct patients among them).
    pub fn truth(&self, pred: impl Fn(&SyntheticPatient, &SyntheticStudy, &SyntheticImage) -> bool) -> (u64, u64) {
        let mut images = 0;
        let mut patients = 0;
        for p in &self.patients {
            let mut hit = false;
            for s in &p.studies {
                for i in &s.images {
                    if pred(p, s, i) {
                        images += 1;
                        hit = true;
                    }
                }
            }
            patients += u64::from(hit);
        }
        (images, patients)
    }
}

pub fn age_at_study(p: &SyntheticPatient, s: &SyntheticStudy) -> i32 {
    s.date.year() - p.birth_date.year()
}

pub const ALL_FEMALE: &str = "select images where patient.sex = F";
pub const LEFT: &str = "select images where image.laterality = L";
pub const AGE_50_60_LEFT: &str = "select images where patient.age in [50, 60] and image.laterality = L";

pub fn by_id_query(patient: &GlobalId) -> String {
    format!("select images where patient.id = {patient}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTruth {
    pub label: String,
    pub query: String,
    pub images: u64,
    pub patients: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub site: SiteCode,
    pub seed: u64,
    pub patients: u64,
    pub images: u64,
    pub anchor_patient: GlobalId,
    pub queries: Vec<QueryTruth>,
    pub stats: CatalogStats,
}

impl Manifest {
    pub fn query(&self, label: &str) -> Option<&QueryTruth> {
        self.queries.iter().find(|q| q.label == label)
    }
}

#[derive(Debug, Error)]
#[error("upload stopped after {done} of {total} files: {source}")]
pub struct UploadError {
    pub done: usize,
    pub total: usize,
    #[source]
    pub source: ClientError,
}

/// Upload every file through ADD and build the manifest. The manifest's
/// counts come from the generator; only the anchor patient's id is taken
/// from the node, because ids are minted there.
pub fn upload(cohort: &Cohort, client: &NodeClient) -> Result<Manifest, UploadError> {
    let total = cohort.image_count();
    let mut anchor = None;
    for (done, (p, s, i)) in cohort.images().enumerate() {
        let bytes = cohort.mgi(p, s, i).to_bytes();
        let receipt = client
            .add_file(&bytes)
            .map_err(|source| UploadError { done, total, source })?;
        if std::ptr::eq(p, &cohort.patients[0]) {
            anchor = Some(receipt.patient);
        }
    }
    let anchor = anchor.ok_or_else(|| UploadError {
        done: 0,
        total,
        source: ClientError::BadReply("cohort has no anchor patient".into()),
    })?;
    Ok(manifest(cohort, anchor))
}

pub fn manifest(cohort: &Cohort, anchor_patient: GlobalId) -> Manifest {
    let anchor_name = &cohort.patients[0].original_id;
    let q = |label: &str, query: String, (images, patients): (u64, u64)| QueryTruth {
        label: label.to_string(),
        query,
        images,
        patients,
    };
    let queries = vec![
        q(
            "by-id",
            by_id_query(&anchor_patient),
            cohort.truth(|p, _, _| &p.original_id == anchor_name),
        ),
        q("all-female", ALL_FEMALE.to_string(), cohort.truth(|p, _, _| p.sex == Sex::F)),
        q("left", LEFT.to_string(), cohort.truth(|_, _, i| i.laterality == Laterality::L)),
        q(
            "age-50-60-left",
            AGE_50_60_LEFT.to_string(),
            cohort.truth(|p, s, i| (50..=60).contains(&age_at_study(p, s)) && i.laterality == Laterality::L),
        ),
    ];
    let total_stored_bytes = cohort.images().map(|(p, s, i)| cohort.stored_size(p, s, i)).sum();
    Manifest {
        site: cohort.spec.site.clone(),
        seed: cohort.spec.seed,
        patients: cohort.patients.len() as u64,
        images: cohort.image_count() as u64,
        anchor_patient,
        queries,
        stats: CatalogStats {
            patients: cohort.patients.len() as u64,
            images: cohort.image_count() as u64,
            derived_files: 0,
            total_stored_bytes,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{count_components, DENSITY_THRESHOLD};

    fn cam(n: usize) -> Cohort {
        Cohort::generate(&CohortSpec::profile(Profile::Cambridge, SiteCode::new("CAM").unwrap(), 42, n))
    }

    #[test]
    fn deterministic_per_seed() {
        let a = cam(30);
        let b = cam(30);
        assert_eq!(a.patients, b.patients);
        let c = Cohort::generate(&CohortSpec::profile(Profile::Cambridge, SiteCode::new("CAM").unwrap(), 43, 30));
        assert_ne!(a.patients, c.patients);
    }

    #[test]
    fn profile_ratios_and_anchor() {
        let c = cam(400);
        assert_eq!(c.patients.len(), 400);
        assert_eq!(c.patients[0].image_count(), 8);
        let ratio = c.image_count() as f64 / 400.0;
        assert!((ratio - 9716.0 / 1423.0).abs() < 0.2, "{ratio}");
        let u = Cohort::generate(&CohortSpec::profile(Profile::Udine, SiteCode::new("UDI").unwrap(), 7, 400));
        assert_eq!(u.patients[0].image_count(), 16);
        let ratio = u.image_count() as f64 / 400.0;
        assert!((ratio - 17285.0 / 1479.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn planted_blocks_are_the_components() {
        let c = cam(10);
        for (p, s, i) in c.images().take(40) {
            let f = c.mgi(p, s, i);
            assert_eq!(count_components(f.pixels(), 64, 64, DENSITY_THRESHOLD), i.blocks.len());
            let bright = f.pixels().iter().filter(|&&v| v >= DENSITY_THRESHOLD).count();
            assert_eq!(bright, i.blocks.len() * BLOCK * BLOCK);
        }
    }

    #[test]
    fn files_round_trip_and_carry_canaries() {
        let c = cam(3);
        let (p, s, i) = c.images().next().unwrap();
        let bytes = c.mgi(p, s, i).to_bytes();
        assert_eq!(MgiFile::parse(&bytes).unwrap(), c.mgi(p, s, i));
        let text = String::from_utf8_lossy(&bytes);
        assert!(c.canaries().iter().take(2).all(|k| text.contains(k.as_str())));
    }

    #[test]
    fn stored_size_matches_anonymized_file() {
        let c = cam(5);
        let anon = crate::imagestore::Anonymizer::new(SiteCode::new("CAM").unwrap(), b"k".to_vec());
        for (p, s, i) in c.images() {
            let f = c.mgi(p, s, i);
            let pseudonym = anon.pseudonym_for(&p.original_id, Some(&p.name));
            let stored = anon.anonymize(&f, &pseudonym).unwrap().to_bytes();
            assert_eq!(stored.len() as u64, c.stored_size(p, s, i));
        }
    }
}
