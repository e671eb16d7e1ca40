//! Small hand-built catalogs for unit tests.

use chrono::NaiveDate;

use crate::ids::{GlobalId, IdKind, SiteCode};
use crate::imagestore::{sha256_hex, FileRef};
use crate::model::*;

#[derive(Debug, Clone)]
pub struct PatientSpec {
    pub sex: Sex,
    pub birth_year: i32,
    pub study_date: (i32, u32, u32),
    pub images: Vec<(Laterality, View, Option<f64>)>,
}

pub fn spec(sex: Sex, birth_year: i32, study_year: i32, images: &[(Laterality, View)]) -> PatientSpec {
    PatientSpec {
        sex,
        birth_year,
        study_date: (study_year, 6, 1),
        images: images.iter().map(|&(l, v)| (l, v, None)).collect(),
    }
}

pub fn fake_file(site: &SiteCode, seed: &str) -> FileRef {
    FileRef::for_digest(site, &sha256_hex(seed.as_bytes()), 8192).unwrap()
}

pub struct Built {
    pub catalog: Catalog,
    pub images: Vec<GlobalId>,
}

/// Ids are sequential per site so tests can predict them.
pub fn build(site: &str, specs: &[PatientSpec]) -> Built {
    let site = SiteCode::new(site).unwrap();
    let catalog = Catalog::in_memory(site.clone());
    let mut n: u128 = 0;
    let mut next = |kind| {
        n += 1;
        GlobalId::new(site.clone(), kind, n)
    };
    let mut images = Vec::new();
    for s in specs {
        let pid = next(IdKind::Patient);
        let study = StudyRecord {
            id: next(IdKind::Study),
            patient: pid.clone(),
            date: NaiveDate::from_ymd_opt(s.study_date.0, s.study_date.1, s.study_date.2).unwrap(),
        };
        let series = SeriesRecord {
            id: next(IdKind::Series),
            study: study.id.clone(),
            modality: "MG".into(),
        };
        let imgs: Vec<ImageRecord> = s
            .images
            .iter()
            .map(|&(laterality, view, dose_mgy)| {
                let id = next(IdKind::Image);
                let file = fake_file(&site, &id.to_string());
                ImageRecord {
                    id,
                    series: series.id.clone(),
                    laterality,
                    view,
                    rows: 64,
                    cols: 64,
                    file,
                    dose_mgy,
                }
            })
            .collect();
        images.extend(imgs.iter().map(|i| i.id.clone()));
        let patient = PatientRecord {
            id: pid.clone(),
            pseudonym: format!("ANON-{:012x}", pid.local()),
            sex: s.sex,
            birth_year: s.birth_year,
        };
        catalog
            .ingest_tree(
                patient,
                vec![StudyTree {
                    study,
                    series: vec![SeriesTree { series, images: imgs }],
                }],
            )
            .unwrap();
    }
    Built { catalog, images }
}

pub fn density_algorithm() -> AlgorithmRecord {
    AlgorithmRecord {
        id: GlobalId::new(SiteCode::new("VO").unwrap(), IdKind::Algorithm, 1),
        name: "smf-density".into(),
        version: 1,
        source: "fraction_above 8000 emit density\n".into(),
        emits: vec!["density".into()],
    }
}
