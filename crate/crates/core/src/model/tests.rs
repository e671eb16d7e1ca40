use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::NaiveDate;
use proptest::prelude::*;

use super::*;
use crate::fixtures::{self, fake_file, spec};
use crate::ids::{GlobalId, IdKind, SiteCode};
use crate::queryir::{lower_to_local_plan, parse_query};

fn cam() -> SiteCode {
    SiteCode::new("CAM").unwrap()
}

fn tree(site: &SiteCode, base: u128, n_images: usize) -> (PatientRecord, Vec<StudyTree>) {
    let id = |k, n| GlobalId::new(site.clone(), k, base + n);
    let patient = PatientRecord {
        id: id(IdKind::Patient, 0),
        pseudonym: "ANON-000000000001".into(),
        sex: Sex::F,
        birth_year: 1955,
    };
    let study = StudyRecord {
        id: id(IdKind::Study, 1),
        patient: patient.id.clone(),
        date: NaiveDate::from_ymd_opt(2005, 5, 1).unwrap(),
    };
    let series = SeriesRecord {
        id: id(IdKind::Series, 2),
        study: study.id.clone(),
        modality: "MG".into(),
    };
    let images = (0..n_images)
        .map(|i| {
            let iid = id(IdKind::Image, 10 + i as u128);
            ImageRecord {
                file: fake_file(site, &iid.to_string()),
                id: iid,
                series: series.id.clone(),
                laterality: if i % 2 == 0 { Laterality::L } else { Laterality::R },
                view: View::CC,
                rows: 64,
                cols: 64,
                dose_mgy: Some(1.5),
            }
        })
        .collect();
    (
        patient,
        vec![StudyTree {
            study,
            series: vec![SeriesTree { series, images }],
        }],
    )
}

#[test]
fn ingest_counts_records_and_is_idempotent() {
    let c = Catalog::in_memory(cam());
    let (p, s) = tree(&cam(), 0, 2);
    assert_eq!(c.ingest_tree(p.clone(), s.clone()).unwrap(), 5);
    assert_eq!(c.ingest_tree(p, s).unwrap(), 0);
    assert!(c.audit().is_ok());
}

#[test]
fn dangling_parent_and_foreign_site() {
    let c = Catalog::in_memory(cam());
    let (p, mut s) = tree(&cam(), 0, 2);
    s[0].series[0].images[1].series = GlobalId::new(cam(), IdKind::Series, 999);
    assert!(matches!(c.ingest_tree(p, s), Err(CatalogError::DanglingParent(_))));

    let udi = SiteCode::new("UDI").unwrap();
    let (p, s) = tree(&udi, 0, 1);
    assert!(matches!(c.ingest_tree(p, s), Err(CatalogError::ForeignSite { .. })));
    assert_eq!(c.stats(), CatalogStats::default());
}

#[test]
fn rejects_out_of_range_birth_year() {
    let c = Catalog::in_memory(cam());
    let (mut p, s) = tree(&cam(), 0, 1);
    p.birth_year = 1899;
    assert!(matches!(c.ingest_tree(p, s), Err(CatalogError::InvalidRecord(_))));
}

#[test]
fn lookup_by_id() {
    let c = Catalog::in_memory(cam());
    let (p, s) = tree(&cam(), 0, 8);
    c.ingest_tree(p.clone(), s).unwrap();
    assert_eq!(c.lookup(&p.id), Some(Record::Patient(p)));
    assert_eq!(c.lookup(&GlobalId::mint(&cam(), IdKind::Patient)), None);
}

#[test]
fn stats_and_derived_count() {
    let c = Catalog::in_memory(cam());
    assert_eq!(c.stats(), CatalogStats::default());
    let (p, s) = tree(&cam(), 0, 3);
    let img = s[0].series[0].images[0].clone();
    c.ingest_tree(p, s).unwrap();
    let before = c.stats();
    assert_eq!((before.patients, before.images, before.derived_files), (1, 3, 0));
    assert_eq!(before.total_stored_bytes, 3 * 8192);
    let alg = fixtures::density_algorithm();
    c.upsert_algorithm(alg.clone()).unwrap();
    let rec = DerivedRecord {
        id: GlobalId::new(cam(), IdKind::Derived, 1),
        image: img.id.clone(),
        algorithm: alg.id.clone(),
        scalars: BTreeMap::from([("density".into(), 0.25)]),
        file: Some(fake_file(&cam(), "derived-1")),
    };
    c.upsert_derived(rec.clone()).unwrap();
    let after = c.stats();
    assert_eq!(after.derived_files, before.derived_files + 1);
    assert_eq!(after.total_stored_bytes, before.total_stored_bytes + 8192);
    // Re-execution overwrites rather than adding a record.
    let mut again = rec;
    again.scalars.insert("density".into(), 0.5);
    c.upsert_derived(again).unwrap();
    assert_eq!(c.stats().derived_files, 1);
}

#[test]
fn derived_record_checks() {
    let c = Catalog::in_memory(cam());
    let (p, s) = tree(&cam(), 0, 1);
    let img = s[0].series[0].images[0].id.clone();
    c.ingest_tree(p, s).unwrap();
    let alg = fixtures::density_algorithm();
    let mut rec = DerivedRecord {
        id: GlobalId::new(cam(), IdKind::Derived, 1),
        image: img,
        algorithm: alg.id.clone(),
        scalars: BTreeMap::from([("density".into(), 0.25)]),
        file: None,
    };
    assert!(matches!(c.upsert_derived(rec.clone()), Err(CatalogError::DanglingParent(_))));
    c.upsert_algorithm(alg).unwrap();
    rec.scalars.insert("mass".into(), 1.0);
    assert!(matches!(c.upsert_derived(rec), Err(CatalogError::InvalidRecord(_))));
}

#[test]
fn log_replay_restores_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("catalog.log");
    let exported = {
        let c = Catalog::open(cam(), &path).unwrap();
        for base in [0, 100, 200] {
            let (p, s) = tree(&cam(), base, 4);
            c.ingest_tree(p, s).unwrap();
        }
        c.upsert_algorithm(fixtures::density_algorithm()).unwrap();
        c.export()
    };
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().all(|l| l.starts_with("UPSERT ")));
    assert!(text.lines().next().unwrap().starts_with("UPSERT patient {"));
    let c = Catalog::open(cam(), &path).unwrap();
    assert_eq!(c.export(), exported);
}

#[test]
fn torn_trailing_line_is_discarded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("catalog.log");
    {
        let c = Catalog::open(cam(), &path).unwrap();
        let (p, s) = tree(&cam(), 0, 1);
        c.ingest_tree(p, s).unwrap();
    }
    std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap()
        .write_all(b"UPSERT patient {\"id\":")
        .unwrap();
    let c = Catalog::open(cam(), &path).unwrap();
    assert_eq!(c.stats().images, 1);
    let (p, s) = tree(&cam(), 50, 1);
    c.ingest_tree(p, s).unwrap();
    drop(c);
    assert_eq!(Catalog::open(cam(), &path).unwrap().stats().images, 2);
}

// ---- randomized properties ----

fn arb_specs(max: usize) -> impl Strategy<Value = Vec<fixtures::PatientSpec>> {
    let image = (prop::bool::ANY, prop::bool::ANY).prop_map(|(l, cc)| {
        (
            if l { Laterality::L } else { Laterality::R },
            if cc { View::CC } else { View::MLO },
        )
    });
    let patient = (prop::bool::ANY, 1930i32..1980, 1998i32..2006, prop::collection::vec(image, 0..6))
        .prop_map(|(f, by, sy, imgs)| spec(if f { Sex::F } else { Sex::M }, by, sy, &imgs));
    prop::collection::vec(patient, 0..max)
}

const QUERIES: &[&str] = &[
    "select images where patient.sex = F",
    "select images where image.laterality = L",
    "select images where patient.age in [50, 60]",
    "select images where image.view = CC",
    "select images where study.date >= 2003-01-01",
];

fn select_ids(c: &Catalog, text: &str) -> BTreeSet<GlobalId> {
    let plan = lower_to_local_plan(&parse_query(text).unwrap(), &c.vocabulary()).unwrap();
    c.select(&plan).unwrap().into_iter().map(|r| r.image.id).collect()
}

fn predicate(text: &str) -> &str {
    text.split_once(" where ").unwrap().1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn boolean_connectives_are_set_operations(specs in arb_specs(40), i in 0usize..5, j in 0usize..5) {
        let b = fixtures::build("CAM", &specs);
        let (p, q) = (QUERIES[i], QUERIES[j]);
        let sp = select_ids(&b.catalog, p);
        let sq = select_ids(&b.catalog, q);
        let all: BTreeSet<GlobalId> = b.images.iter().cloned().collect();
        let and = select_ids(&b.catalog, &format!("select images where ({}) and ({})", predicate(p), predicate(q)));
        let or = select_ids(&b.catalog, &format!("select images where ({}) or ({})", predicate(p), predicate(q)));
        let not = select_ids(&b.catalog, &format!("select images where not ({})", predicate(p)));
        prop_assert_eq!(and, sp.intersection(&sq).cloned().collect::<BTreeSet<_>>());
        prop_assert_eq!(or, sp.union(&sq).cloned().collect::<BTreeSet<_>>());
        prop_assert_eq!(not, all.difference(&sp).cloned().collect::<BTreeSet<_>>());
    }

    #[test]
    fn stats_match_enumeration(specs in arb_specs(120)) {
        let b = fixtures::build("CAM", &specs);
        let records = b.catalog.export();
        let mut patients = 0;
        let mut images = 0;
        let mut bytes = BTreeMap::new();
        for r in &records {
            match r {
                Record::Patient(_) => patients += 1,
                Record::Image(i) => {
                    images += 1;
                    bytes.insert(i.file.sha256.clone(), i.file.size);
                }
                _ => {}
            }
        }
        let s = b.catalog.stats();
        prop_assert_eq!(s.patients, patients);
        prop_assert_eq!(s.patients as usize, specs.len());
        prop_assert_eq!(s.images, images);
        prop_assert_eq!(s.images as usize, specs.iter().map(|p| p.images.len()).sum::<usize>());
        prop_assert_eq!(s.total_stored_bytes, bytes.values().sum::<u64>());
        prop_assert!(b.catalog.audit().is_ok());
    }
}

#[test]
fn female_brute_force_example() {
    let imgs = [(Laterality::L, View::CC); 4];
    let b = fixtures::build(
        "CAM",
        &[
            spec(Sex::F, 1950, 2005, &imgs),
            spec(Sex::F, 1951, 2005, &imgs),
            spec(Sex::F, 1952, 2005, &imgs),
            spec(Sex::M, 1953, 2005, &imgs),
        ],
    );
    assert_eq!(select_ids(&b.catalog, "select images where patient.sex = F").len(), 12);
    let empty = Catalog::in_memory(cam());
    assert!(select_ids(&empty, "select images where true").is_empty());
}
