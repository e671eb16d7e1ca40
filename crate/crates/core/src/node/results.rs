//! Turning matched catalog rows into result-set rows.

use std::collections::{BTreeMap, BTreeSet};

use crate::ids::GlobalId;
use crate::model::{Catalog, CatalogError, JoinedRow};
use crate::queryir::{lower_to_local_plan, FormalQuery, LocalPlan, QueryError, Target};
use crate::resultset::{ResultError, ResultSet, Row};

#[derive(Debug, thiserror::Error)]
pub enum LocalQueryError {
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Result(#[from] ResultError),
}

fn image_field(row: &JoinedRow, name: &str) -> Option<String> {
    let img = &row.image;
    Some(match name {
        "file.id" => img.file.id.to_string(),
        "file.sha256" => img.file.sha256.clone(),
        "file.size" => img.file.size.to_string(),
        "image.cols" => img.cols.to_string(),
        "image.dose_mgy" => img.dose_mgy?.to_string(),
        "image.laterality" => img.laterality.to_string(),
        "image.rows" => img.rows.to_string(),
        "image.view" => img.view.to_string(),
        "patient.age" => row.age().to_string(),
        "patient.id" => row.patient.id.to_string(),
        "patient.sex" => row.patient.sex.to_string(),
        "series.id" => row.series.id.to_string(),
        "study.date" => row.study.date.format("%Y-%m-%d").to_string(),
        "study.id" => row.study.id.to_string(),
        other => row.derived.get(other.strip_prefix("derived.")?)?.to_string(),
    })
}

/// Rows for a plan's target from the images it matched. Patient and study
/// rows count matched images only.
pub fn project(plan: &LocalPlan, matched: &[JoinedRow]) -> Vec<(GlobalId, Row)> {
    match plan.target {
        Target::Images => matched
            .iter()
            .map(|r| {
                let row = plan
                    .projection
                    .iter()
                    .filter_map(|name| image_field(r, name).map(|v| (name.clone(), v)))
                    .collect();
                (r.image.id.clone(), row)
            })
            .collect(),
        Target::Studies => {
            let mut groups: BTreeMap<&GlobalId, (usize, &JoinedRow)> = BTreeMap::new();
            for r in matched {
                groups.entry(&r.study.id).or_insert((0, r)).0 += 1;
            }
            groups
                .into_iter()
                .map(|(id, (n, r))| {
                    let row = Row::from([
                        ("images".to_string(), n.to_string()),
                        ("patient.id".to_string(), r.patient.id.to_string()),
                        ("study.date".to_string(), r.study.date.format("%Y-%m-%d").to_string()),
                    ]);
                    (id.clone(), row)
                })
                .collect()
        }
        Target::Patients => {
            let mut groups: BTreeMap<&GlobalId, (usize, &JoinedRow)> = BTreeMap::new();
            for r in matched {
                groups.entry(&r.patient.id).or_insert((0, r)).0 += 1;
            }
            groups
                .into_iter()
                .map(|(id, (n, r))| {
                    let row = Row::from([
                        ("images".to_string(), n.to_string()),
                        ("patient.birth_year".to_string(), r.patient.birth_year.to_string()),
                        ("patient.sex".to_string(), r.patient.sex.to_string()),
                    ]);
                    (id.clone(), row)
                })
                .collect()
        }
    }
}

/// Answer `q` from this catalog alone.
pub fn local_result(catalog: &Catalog, q: &FormalQuery) -> Result<ResultSet, LocalQueryError> {
    let plan = lower_to_local_plan(q, &catalog.vocabulary())?;
    let matched = catalog.select(&plan)?;
    let rows = project(&plan, &matched);
    Ok(ResultSet::new(
        q.canonical(),
        BTreeSet::from([catalog.site().clone()]),
        rows,
    )?)
}
