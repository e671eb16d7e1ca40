//! In-process VO harness shared by the integration targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::Rng;
use tempfile::TempDir;

use gridbox::algorithms::builtin_density_id;
use gridbox::imagestore::{sha256_hex, FileRef};
use gridbox::model::{
    DerivedRecord, ImageRecord, Laterality, PatientRecord, SeriesRecord, SeriesTree, Sex, StudyRecord, StudyTree,
    View,
};
use gridbox::node::{add_user, start_node, NodeClient, NodeConfig, NodeHandle};
use gridbox::vo::{start_registry, Registry, RegistryHandle};
use gridbox::wire::{sum_traffic, Accountant, OpTraffic, Tap};
use gridbox::{GlobalId, IdKind, SiteCode};

pub const ADMIN: &str = "admin-token-for-tests";
pub const USER: &str = "clinician";
pub const CREDENTIAL: &str = "correct horse battery staple";

pub fn site(s: &str) -> SiteCode {
    SiteCode::new(s).unwrap()
}

pub struct Vo {
    pub registry: RegistryHandle,
    pub nodes: Vec<NodeHandle>,
    pub clients: Vec<NodeClient>,
    _dirs: Vec<TempDir>,
}

impl Vo {
    pub fn start(sites: &[&str]) -> Vo {
        Vo::start_with(sites, None, |_| {})
    }

    /// Start a registry and one node per site. `tweak` adjusts each node's
    /// configuration; `tap` sees every frame any of the servers handles.
    pub fn start_with(sites: &[&str], tap: Option<Tap>, tweak: impl Fn(&mut NodeConfig)) -> Vo {
        let racc = Accountant::new();
        racc.set_tap(tap.clone());
        let registry = start_registry("127.0.0.1:0", Registry::in_memory(), Some(ADMIN.into()), racc).unwrap();
        add_user(&registry.addr(), ADMIN, USER, CREDENTIAL, None, true).unwrap();
        let mut nodes = Vec::new();
        let mut dirs = Vec::new();
        for s in sites {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = NodeConfig::new(site(s), registry.addr(), dir.path());
            cfg.secret = Some(format!("test-secret-{s}"));
            tweak(&mut cfg);
            let acc = Accountant::new();
            acc.set_tap(tap.clone());
            nodes.push(start_node(cfg, acc).unwrap());
            dirs.push(dir);
        }
        for n in &nodes {
            n.node().refresh_membership().unwrap();
        }
        let clients = nodes
            .iter()
            .map(|n| {
                let mut c = NodeClient::new(n.addr());
                c.authenticate(USER, CREDENTIAL).unwrap();
                c
            })
            .collect();
        Vo {
            registry,
            nodes,
            clients,
            _dirs: dirs,
        }
    }

    pub fn index(&self, s: &str) -> usize {
        self.nodes.iter().position(|n| n.node().site().as_str() == s).unwrap()
    }

    pub fn client(&self, s: &str) -> &NodeClient {
        &self.clients[self.index(s)]
    }

    /// Traffic summed over every server of the VO.
    pub fn traffic(&self) -> BTreeMap<String, OpTraffic> {
        let mut parts = vec![self.registry.accountant().snapshot()];
        parts.extend(self.nodes.iter().map(|n| n.node().accountant().snapshot()));
        sum_traffic(&parts)
    }
}

/// One seeded image with everything a brute-force evaluator needs.
#[derive(Debug, Clone)]
pub struct FlatRow {
    pub site: SiteCode,
    pub patient: GlobalId,
    pub sex: Sex,
    pub birth_year: i32,
    pub study: GlobalId,
    pub study_date: NaiveDate,
    pub image: GlobalId,
    pub laterality: Laterality,
    pub view: View,
    pub dose: Option<f64>,
    pub density: Option<f64>,
}

impl FlatRow {
    pub fn age(&self) -> i32 {
        use chrono::Datelike;
        self.study_date.year() - self.birth_year
    }
}

/// Write `n_patients` random patient trees straight into a node's catalog
/// (no image files), with density values for about half of the images.
/// Returns the flattened truth.
pub fn seed_catalog(node: &NodeHandle, n_patients: usize, rng: &mut impl Rng) -> Vec<FlatRow> {
    let node = node.node();
    let s = node.site().clone();
    let catalog = node.catalog();
    let mut next = {
        let mut n: u128 = rng.random::<u32>() as u128;
        move |kind| {
            n += 1;
            GlobalId::new(s.clone(), kind, n)
        }
    };
    let mut rows = Vec::new();
    for _ in 0..n_patients {
        let pid = next(IdKind::Patient);
        let sex = if rng.random_bool(0.52) { Sex::F } else { Sex::M };
        let birth_year = rng.random_range(1930..=1965);
        let patient = PatientRecord {
            id: pid.clone(),
            pseudonym: format!("ANON-{:012x}", pid.local() & 0xffff_ffff_ffff),
            sex,
            birth_year,
        };
        let mut trees = Vec::new();
        let mut derived = Vec::new();
        for _ in 0..rng.random_range(1..=2) {
            let study = StudyRecord {
                id: next(IdKind::Study),
                patient: pid.clone(),
                date: NaiveDate::from_ymd_opt(rng.random_range(1999..=2005), rng.random_range(1..=12), rng.random_range(1..=28))
                    .unwrap(),
            };
            let series = SeriesRecord {
                id: next(IdKind::Series),
                study: study.id.clone(),
                modality: "MG".into(),
            };
            let mut images = Vec::new();
            for _ in 0..rng.random_range(1..=4) {
                let id = next(IdKind::Image);
                let laterality = if rng.random_bool(0.5) { Laterality::L } else { Laterality::R };
                let view = if rng.random_bool(0.5) { View::CC } else { View::MLO };
                let dose = rng
                    .random_bool(0.9)
                    .then(|| (rng.random_range(50..=300) as f64) / 100.0);
                let density = rng.random_bool(0.5).then(|| (rng.random_range(0..=20) as f64) / 20.0);
                let file = FileRef::for_digest(node.site(), &sha256_hex(id.to_string().as_bytes()), 8192).unwrap();
                if let Some(d) = density {
                    derived.push(DerivedRecord {
                        id: next(IdKind::Derived),
                        image: id.clone(),
                        algorithm: builtin_density_id(),
                        scalars: BTreeMap::from([("density".to_string(), d)]),
                        file: None,
                    });
                }
                rows.push(FlatRow {
                    site: node.site().clone(),
                    patient: pid.clone(),
                    sex,
                    birth_year,
                    study: study.id.clone(),
                    study_date: study.date,
                    image: id.clone(),
                    laterality,
                    view,
                    dose,
                    density,
                });
                images.push(ImageRecord {
                    id,
                    series: series.id.clone(),
                    laterality,
                    view,
                    rows: 64,
                    cols: 64,
                    file,
                    dose_mgy: dose,
                });
            }
            trees.push(StudyTree {
                study,
                series: vec![SeriesTree { series, images }],
            });
        }
        catalog.ingest_tree(patient, trees).unwrap();
        for d in derived {
            catalog.upsert_derived(d).unwrap();
        }
    }
    rows
}
