use std::collections::BTreeSet;

use chrono::NaiveDate;

use super::ast::*;
use super::QueryError;
use crate::ids::{GlobalId, SiteCode};
use crate::model::JoinedRow;

/// Attribute vocabulary of one catalog: the fixed attributes plus the derived
/// scalar names its registered algorithms emit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    derived: BTreeSet<String>,
}

impl Vocabulary {
    pub fn with_derived(names: impl IntoIterator<Item = String>) -> Self {
        Vocabulary {
            derived: names.into_iter().collect(),
        }
    }

    pub fn has_derived(&self, name: &str) -> bool {
        self.derived.contains(name)
    }

    pub fn derived_names(&self) -> impl Iterator<Item = &str> {
        self.derived.iter().map(String::as_str)
    }
}

/// A concrete catalog column.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Sex,
    Age,
    PatientId,
    StudyDate,
    Laterality,
    View,
    ImageId,
    Dose,
    Derived(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnValue {
    Number(f64),
    Date(NaiveDate),
    Text(String),
    Id(GlobalId),
}

/// Lowered predicate tree: `and`/`or` chains are flattened.
#[derive(Debug, Clone, PartialEq)]
pub enum Pred {
    Const(bool),
    Cmp { col: Column, op: CmpOp, value: ColumnValue },
    Range { col: Column, lo: ColumnValue, hi: ColumnValue },
    All(Vec<Pred>),
    Any(Vec<Pred>),
    Not(Box<Pred>),
}

/// Scan plan for one site's catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPlan {
    pub target: Target,
    pub predicate: Pred,
    pub projection: Vec<String>,
}

/// Fields each result row of a target carries (derived scalars are added per
/// vocabulary for image rows).
pub fn base_projection(target: Target) -> &'static [&'static str] {
    match target {
        Target::Images => &[
            "file.id",
            "file.sha256",
            "file.size",
            "image.cols",
            "image.dose_mgy",
            "image.laterality",
            "image.rows",
            "image.view",
            "patient.age",
            "patient.id",
            "patient.sex",
            "series.id",
            "study.date",
            "study.id",
        ],
        Target::Studies => &["images", "patient.id", "study.date"],
        Target::Patients => &["images", "patient.birth_year", "patient.sex"],
    }
}

fn column_value(row: &JoinedRow, col: &Column) -> Option<ColumnValue> {
    Some(match col {
        Column::Sex => ColumnValue::Text(row.patient.sex.as_str().to_string()),
        Column::Age => ColumnValue::Number(row.age() as f64),
        Column::PatientId => ColumnValue::Id(row.patient.id.clone()),
        Column::StudyDate => ColumnValue::Date(row.study.date),
        Column::Laterality => ColumnValue::Text(row.image.laterality.as_str().to_string()),
        Column::View => ColumnValue::Text(row.image.view.as_str().to_string()),
        Column::ImageId => ColumnValue::Id(row.image.id.clone()),
        Column::Dose => ColumnValue::Number(row.image.dose_mgy?),
        Column::Derived(name) => ColumnValue::Number(*row.derived.get(name)?),
    })
}

fn compare(op: CmpOp, left: &ColumnValue, right: &ColumnValue) -> bool {
    match (left, right) {
        (ColumnValue::Number(a), ColumnValue::Number(b)) => op.holds(a, b),
        (ColumnValue::Date(a), ColumnValue::Date(b)) => op.holds(a, b),
        (ColumnValue::Text(a), ColumnValue::Text(b)) => op.holds(a, b),
        (ColumnValue::Id(a), ColumnValue::Id(b)) => op.holds(a, b),
        _ => false,
    }
}

impl Pred {
    /// Absent values (no dose, no derived record) make every comparison on
    /// them false.
    pub fn eval(&self, row: &JoinedRow) -> bool {
        match self {
            Pred::Const(b) => *b,
            Pred::Cmp { col, op, value } => column_value(row, col).is_some_and(|v| compare(*op, &v, value)),
            Pred::Range { col, lo, hi } => column_value(row, col)
                .is_some_and(|v| compare(CmpOp::Ge, &v, lo) && compare(CmpOp::Le, &v, hi)),
            Pred::All(ps) => ps.iter().all(|p| p.eval(row)),
            Pred::Any(ps) => ps.iter().any(|p| p.eval(row)),
            Pred::Not(p) => !p.eval(row),
        }
    }

    fn derived_columns<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Pred::Cmp { col: Column::Derived(n), .. } | Pred::Range { col: Column::Derived(n), .. } => out.push(n),
            Pred::All(ps) | Pred::Any(ps) => ps.iter().for_each(|p| p.derived_columns(out)),
            Pred::Not(p) => p.derived_columns(out),
            _ => {}
        }
    }
}

impl LocalPlan {
    pub fn matches(&self, row: &JoinedRow) -> bool {
        self.predicate.eval(row)
    }

    pub fn derived_columns(&self) -> impl Iterator<Item = &str> {
        let mut out = Vec::new();
        self.predicate.derived_columns(&mut out);
        out.into_iter()
    }
}

fn lower_value(v: &Literal) -> ColumnValue {
    match v {
        Literal::Number(n) => ColumnValue::Number(*n),
        Literal::Date(d) => ColumnValue::Date(*d),
        Literal::Text(t) => ColumnValue::Text(t.clone()),
        Literal::Id(i) => ColumnValue::Id(i.clone()),
    }
}

fn lower_attr(attr: &Attribute, vocab: &Vocabulary) -> Result<Column, QueryError> {
    Ok(match attr {
        Attribute::PatientSex => Column::Sex,
        Attribute::PatientAge => Column::Age,
        Attribute::PatientId => Column::PatientId,
        Attribute::StudyDate => Column::StudyDate,
        Attribute::ImageLaterality => Column::Laterality,
        Attribute::ImageView => Column::View,
        Attribute::ImageId => Column::ImageId,
        Attribute::ImageDose => Column::Dose,
        Attribute::Derived(name) => {
            if !vocab.has_derived(name) {
                return Err(QueryError::UnknownAttribute(attr.name()));
            }
            Column::Derived(name.clone())
        }
    })
}

fn lower_expr(e: &Expr, vocab: &Vocabulary) -> Result<Pred, QueryError> {
    Ok(match e {
        Expr::Const(b) => Pred::Const(*b),
        Expr::Compare { attr, op, value } => Pred::Cmp {
            col: lower_attr(attr, vocab)?,
            op: *op,
            value: lower_value(value),
        },
        Expr::Range { attr, lo, hi } => Pred::Range {
            col: lower_attr(attr, vocab)?,
            lo: lower_value(lo),
            hi: lower_value(hi),
        },
        Expr::And(..) => {
            let mut parts = Vec::new();
            flatten(e, &mut parts, true);
            Pred::All(parts.into_iter().map(|p| lower_expr(p, vocab)).collect::<Result<_, _>>()?)
        }
        Expr::Or(..) => {
            let mut parts = Vec::new();
            flatten(e, &mut parts, false);
            Pred::Any(parts.into_iter().map(|p| lower_expr(p, vocab)).collect::<Result<_, _>>()?)
        }
        Expr::Not(inner) => Pred::Not(Box::new(lower_expr(inner, vocab)?)),
    })
}

fn flatten<'a>(e: &'a Expr, out: &mut Vec<&'a Expr>, conj: bool) {
    match (e, conj) {
        (Expr::And(l, r), true) | (Expr::Or(l, r), false) => {
            flatten(l, out, conj);
            flatten(r, out, conj);
        }
        _ => out.push(e),
    }
}

/// Lower a validated query into a scan plan over this catalog's columns.
pub fn lower_to_local_plan(q: &FormalQuery, vocab: &Vocabulary) -> Result<LocalPlan, QueryError> {
    let predicate = lower_expr(&q.expr, vocab)?;
    let mut projection: Vec<String> = base_projection(q.target).iter().map(|s| s.to_string()).collect();
    if q.target == Target::Images {
        projection.extend(vocab.derived_names().map(|n| format!("derived.{n}")));
        projection.sort();
    }
    Ok(LocalPlan {
        target: q.target,
        predicate,
        projection,
    })
}

/// A sub-query addressed to another site. `hop` is always 1: the receiver
/// evaluates locally and never forwards.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteQuery {
    pub site: SiteCode,
    pub query: FormalQuery,
    pub hop: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryPlan {
    pub local: FormalQuery,
    pub remotes: Vec<RemoteQuery>,
    pub origin: SiteCode,
    pub hop: u8,
}

impl QueryPlan {
    /// Plan for a query that arrived from a peer: local evaluation only.
    pub fn local_only(q: FormalQuery, origin: SiteCode) -> Self {
        QueryPlan {
            local: q,
            remotes: Vec::new(),
            origin,
            hop: 1,
        }
    }
}

/// Sites that can possibly hold matching rows, if the query pins an id at
/// top level. `None` means no pinning.
fn pinned_sites(q: &FormalQuery) -> Option<BTreeSet<SiteCode>> {
    let owners: BTreeSet<SiteCode> = q
        .expr
        .conjuncts()
        .into_iter()
        .filter_map(|c| match c {
            Expr::Compare {
                attr: Attribute::PatientId | Attribute::ImageId,
                op: CmpOp::Eq,
                value: Literal::Id(id),
            } => Some(id.site().clone()),
            _ => None,
        })
        .collect();
    (!owners.is_empty()).then_some(owners)
}

/// False when the query pins ids minted at exactly one other site: the
/// issuing node cannot hold a match, so its local answer is left out of the
/// merge and the result reads the same from every node.
pub fn needs_local(q: &FormalQuery, self_site: &SiteCode) -> bool {
    match pinned_sites(q) {
        Some(owners) if owners.len() == 1 => owners.contains(self_site),
        _ => true,
    }
}

/// Single-hop star decomposition: the query runs locally and at every other
/// member, except that an id-pinned query only goes to the id's minting site.
pub fn decompose(q: &FormalQuery, membership: &[SiteCode], self_site: &SiteCode) -> Result<QueryPlan, QueryError> {
    if !membership.contains(self_site) {
        return Err(QueryError::NotAMember(self_site.clone()));
    }
    let mut others: BTreeSet<&SiteCode> = membership.iter().filter(|s| *s != self_site).collect();
    if let Some(owners) = pinned_sites(q) {
        // Conjuncts naming ids from two different sites cannot both hold.
        if owners.len() > 1 {
            others.clear();
        } else {
            others.retain(|s| owners.contains(*s));
        }
    }
    Ok(QueryPlan {
        local: q.clone(),
        remotes: others
            .into_iter()
            .map(|site| RemoteQuery {
                site: site.clone(),
                query: q.clone(),
                hop: 1,
            })
            .collect(),
        origin: self_site.clone(),
        hop: 0,
    })
}
