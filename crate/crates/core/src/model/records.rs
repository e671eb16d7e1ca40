use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::ids::GlobalId;
use crate::imagestore::FileRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Laterality {
    L,
    R,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    CC,
    MLO,
}

macro_rules! closed_vocab {
    ($ty:ident { $($var:ident => $text:literal),+ }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$var => $text),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($ty::$var),)+
                    other => Err(format!("{other:?} is not one of {:?}", [$($text),+])),
                }
            }
        }
    };
}

closed_vocab!(Sex { F => "F", M => "M" });
closed_vocab!(Laterality { L => "L", R => "R" });
closed_vocab!(View { CC => "CC", MLO => "MLO" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: GlobalId,
    pub pseudonym: String,
    pub sex: Sex,
    pub birth_year: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub id: GlobalId,
    pub patient: GlobalId,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub id: GlobalId,
    pub study: GlobalId,
    pub modality: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: GlobalId,
    pub series: GlobalId,
    pub laterality: Laterality,
    pub view: View,
    pub rows: u32,
    pub cols: u32,
    pub file: FileRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dose_mgy: Option<f64>,
}

/// Per-image output of one algorithm. At most one per (image, algorithm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedRecord {
    pub id: GlobalId,
    pub image: GlobalId,
    pub algorithm: GlobalId,
    pub scalars: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<FileRef>,
}

/// A registered algorithm program as the catalog keeps it. `emits` is the
/// list of scalar names the program produces, used for the query vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgorithmRecord {
    pub id: GlobalId,
    pub name: String,
    pub version: u32,
    pub source: String,
    pub emits: Vec<String>,
}

/// One catalog log entry.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Patient(PatientRecord),
    Study(StudyRecord),
    Series(SeriesRecord),
    Image(ImageRecord),
    Derived(DerivedRecord),
    Algorithm(AlgorithmRecord),
}

impl Record {
    pub fn kind(&self) -> &'static str {
        match self {
            Record::Patient(_) => "patient",
            Record::Study(_) => "study",
            Record::Series(_) => "series",
            Record::Image(_) => "image",
            Record::Derived(_) => "derived",
            Record::Algorithm(_) => "algorithm",
        }
    }

    pub fn id(&self) -> &GlobalId {
        match self {
            Record::Patient(r) => &r.id,
            Record::Study(r) => &r.id,
            Record::Series(r) => &r.id,
            Record::Image(r) => &r.id,
            Record::Derived(r) => &r.id,
            Record::Algorithm(r) => &r.id,
        }
    }

    /// `UPSERT <kind> <json-object>` without the trailing newline.
    pub fn to_log_line(&self) -> String {
        let json = match self {
            Record::Patient(r) => serde_json::to_string(r),
            Record::Study(r) => serde_json::to_string(r),
            Record::Series(r) => serde_json::to_string(r),
            Record::Image(r) => serde_json::to_string(r),
            Record::Derived(r) => serde_json::to_string(r),
            Record::Algorithm(r) => serde_json::to_string(r),
        }
        .expect("records serialize");
        format!("UPSERT {} {}", self.kind(), json)
    }

    pub fn from_log_line(line: &str) -> Result<Record, String> {
        let rest = line
            .strip_prefix("UPSERT ")
            .ok_or_else(|| format!("expected UPSERT, got {line:?}"))?;
        let (kind, json) = rest
            .split_once(' ')
            .ok_or_else(|| format!("missing record body in {line:?}"))?;
        let err = |e: serde_json::Error| format!("bad {kind} record: {e}");
        Ok(match kind {
            "patient" => Record::Patient(serde_json::from_str(json).map_err(err)?),
            "study" => Record::Study(serde_json::from_str(json).map_err(err)?),
            "series" => Record::Series(serde_json::from_str(json).map_err(err)?),
            "image" => Record::Image(serde_json::from_str(json).map_err(err)?),
            "derived" => Record::Derived(serde_json::from_str(json).map_err(err)?),
            "algorithm" => Record::Algorithm(serde_json::from_str(json).map_err(err)?),
            other => return Err(format!("unknown record kind {other:?}")),
        })
    }
}

/// An image joined with its ancestors and the derived scalars attached to it.
/// This is the row every predicate is evaluated against.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedRow {
    pub patient: PatientRecord,
    pub study: StudyRecord,
    pub series: SeriesRecord,
    pub image: ImageRecord,
    /// Latest value per scalar name across this image's derived records.
    pub derived: BTreeMap<String, f64>,
}

impl JoinedRow {
    /// Whole-year age at acquisition.
    pub fn age(&self) -> i32 {
        age_at(self.patient.birth_year, self.study.date)
    }
}

pub fn age_at(birth_year: i32, study_date: NaiveDate) -> i32 {
    use chrono::Datelike;
    study_date.year() - birth_year
}
