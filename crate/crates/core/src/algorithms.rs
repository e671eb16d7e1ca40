//! The pixel-pipeline DSL that stands in for grid-resident executables.
//!
//! ```text
//! program   = { line } ;
//! line      = [ statement ] [ "#" comment ] newline ;
//! statement = "threshold" t
//!           | "fraction_above" t "emit" name
//!           | "mean" "emit" name
//!           | "max" "emit" name
//!           | "count_components" t "emit" name ;
//! t         = integer in 0..=65535 ;
//! name      = letter { letter | digit | "_" } ;
//! ```
//!
//! Statements run top to bottom over a private copy of the pixels. Only
//! `threshold` changes that copy; it binarizes to 0/65535.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::ids::{GlobalId, IdKind, SiteCode};
use crate::imagestore::MgiFile;
use crate::model::AlgorithmRecord;

pub const DENSITY_NAME: &str = "smf-density";
pub const DENSITY_THRESHOLD: u16 = 8000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AlgorithmError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("emit name {0:?} used twice")]
    DuplicateEmit(String),
    #[error("program has no emit statement")]
    EmptyProgram,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Statement {
    Threshold(u16),
    FractionAbove { t: u16, emit: String },
    Mean { emit: String },
    Max { emit: String },
    CountComponents { t: u16, emit: String },
}

impl Statement {
    pub fn emit(&self) -> Option<&str> {
        match self {
            Statement::Threshold(_) => None,
            Statement::FractionAbove { emit, .. }
            | Statement::Mean { emit }
            | Statement::Max { emit }
            | Statement::CountComponents { emit, .. } => Some(emit),
        }
    }
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statement::Threshold(t) => write!(f, "threshold {t}"),
            Statement::FractionAbove { t, emit } => write!(f, "fraction_above {t} emit {emit}"),
            Statement::Mean { emit } => write!(f, "mean emit {emit}"),
            Statement::Max { emit } => write!(f, "max emit {emit}"),
            Statement::CountComponents { t, emit } => write!(f, "count_components {t} emit {emit}"),
        }
    }
}

/// A parsed program without registry identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub statements: Vec<Statement>,
    pub source_text: String,
}

impl Program {
    pub fn emits(&self) -> Vec<String> {
        self.statements.iter().filter_map(|s| s.emit().map(str::to_string)).collect()
    }

    pub fn execute(&self, img: &MgiFile) -> BTreeMap<String, f64> {
        execute_pixels(&self.statements, img.pixels(), img.rows() as usize, img.cols() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlgorithmProgram {
    pub id: GlobalId,
    pub name: String,
    pub version: u32,
    pub program: Program,
}

impl AlgorithmProgram {
    pub fn from_record(rec: &AlgorithmRecord) -> Result<Self, AlgorithmError> {
        Ok(AlgorithmProgram {
            id: rec.id.clone(),
            name: rec.name.clone(),
            version: rec.version,
            program: parse_algorithm(&rec.source)?,
        })
    }

    pub fn to_record(&self) -> AlgorithmRecord {
        AlgorithmRecord {
            id: self.id.clone(),
            name: self.name.clone(),
            version: self.version,
            source: self.program.source_text.clone(),
            emits: self.program.emits(),
        }
    }

    pub fn execute(&self, img: &MgiFile) -> BTreeMap<String, f64> {
        self.program.execute(img)
    }
}

fn is_emit_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub fn parse_algorithm(text: &str) -> Result<Program, AlgorithmError> {
    let mut statements = Vec::new();
    let mut emitted = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let code = raw.split('#').next().unwrap_or("");
        let words: Vec<&str> = code.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let err = |message: String| AlgorithmError::Syntax { line, message };
        let level = |w: &str| -> Result<u16, AlgorithmError> {
            w.parse::<u16>()
                .map_err(|_| err(format!("expected a level in 0..=65535, found {w:?}")))
        };
        let emit = |rest: &[&str]| -> Result<String, AlgorithmError> {
            match rest {
                ["emit", name] if is_emit_name(name) => Ok(name.to_string()),
                ["emit", name] => Err(err(format!("{name:?} is not a valid emit name"))),
                _ => Err(err(format!("expected `emit <name>`, found {:?}", rest.join(" ")))),
            }
        };
        let stmt = match words[0] {
            "threshold" => match &words[1..] {
                [t] => Statement::Threshold(level(t)?),
                _ => return Err(err("expected `threshold <t>`".into())),
            },
            "fraction_above" if words.len() >= 2 => Statement::FractionAbove {
                t: level(words[1])?,
                emit: emit(&words[2..])?,
            },
            "count_components" if words.len() >= 2 => Statement::CountComponents {
                t: level(words[1])?,
                emit: emit(&words[2..])?,
            },
            "fraction_above" | "count_components" => {
                return Err(err(format!("expected `{} <t> emit <name>`", words[0])))
            }
            "mean" => Statement::Mean { emit: emit(&words[1..])? },
            "max" => Statement::Max { emit: emit(&words[1..])? },
            other => return Err(err(format!("unknown verb {other:?}"))),
        };
        if let Some(name) = stmt.emit() {
            if !emitted.insert(name.to_string()) {
                return Err(AlgorithmError::DuplicateEmit(name.to_string()));
            }
        }
        statements.push(stmt);
    }
    if emitted.is_empty() {
        return Err(AlgorithmError::EmptyProgram);
    }
    Ok(Program {
        statements,
        source_text: text.to_string(),
    })
}

pub fn density_program(threshold: u16) -> Program {
    parse_algorithm(&format!("fraction_above {threshold} emit density\n")).expect("density program parses")
}

pub fn builtin_density_id() -> GlobalId {
    GlobalId::new(SiteCode::new("VO").expect("valid site code"), IdKind::Algorithm, 1)
}

pub fn builtin_density() -> AlgorithmProgram {
    AlgorithmProgram {
        id: builtin_density_id(),
        name: DENSITY_NAME.to_string(),
        version: 1,
        program: density_program(DENSITY_THRESHOLD),
    }
}

pub fn execute_pixels(statements: &[Statement], pixels: &[u16], rows: usize, cols: usize) -> BTreeMap<String, f64> {
    debug_assert_eq!(pixels.len(), rows * cols);
    let mut buf = pixels.to_vec();
    let total = buf.len();
    let mut out = BTreeMap::new();
    for stmt in statements {
        match stmt {
            Statement::Threshold(t) => {
                for p in &mut buf {
                    *p = if *p >= *t { u16::MAX } else { 0 };
                }
            }
            Statement::FractionAbove { t, emit } => {
                let hits = buf.iter().filter(|&&p| p >= *t).count();
                let v = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
                out.insert(emit.clone(), v);
            }
            Statement::Mean { emit } => {
                let sum: u64 = buf.iter().map(|&p| p as u64).sum();
                let v = if total == 0 { 0.0 } else { sum as f64 / total as f64 };
                out.insert(emit.clone(), v);
            }
            Statement::Max { emit } => {
                out.insert(emit.clone(), buf.iter().copied().max().unwrap_or(0) as f64);
            }
            Statement::CountComponents { t, emit } => {
                out.insert(emit.clone(), count_components(&buf, rows, cols, *t) as f64);
            }
        }
    }
    out
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// 4-connected components of `{p >= t}`, by union-find over a single raster pass.
pub fn count_components(buf: &[u16], rows: usize, cols: usize, t: u16) -> usize {
    let mut parent: Vec<u32> = (0..buf.len() as u32).collect();
    let on = |i: usize| buf[i] >= t;
    let mut roots = buf.iter().filter(|&&p| p >= t).count();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if !on(i) {
                continue;
            }
            let neighbours = [(c > 0).then(|| i - 1), (r > 0).then(|| i - cols)];
            for j in neighbours.into_iter().flatten() {
                if on(j) {
                    let (a, b) = (find(&mut parent, i as u32), find(&mut parent, j as u32));
                    if a != b {
                        parent[a as usize] = b;
                        roots -= 1;
                    }
                }
            }
        }
    }
    roots
}
