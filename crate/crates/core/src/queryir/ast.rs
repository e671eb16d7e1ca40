use std::fmt;

use chrono::NaiveDate;

use crate::ids::{GlobalId, IdKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Patients,
    Studies,
    Images,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Patients => "patients",
            Target::Studies => "studies",
            Target::Images => "images",
        }
    }

    pub fn row_kind(self) -> IdKind {
        match self {
            Target::Patients => IdKind::Patient,
            Target::Studies => IdKind::Study,
            Target::Images => IdKind::Image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    PatientSex,
    PatientAge,
    PatientId,
    StudyDate,
    ImageLaterality,
    ImageView,
    ImageId,
    ImageDose,
    Derived(String),
}

/// How an attribute may be compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttrType {
    /// Closed vocabulary; `=` and `!=` only.
    Categorical(&'static [&'static str]),
    /// A GlobalId of the given kind; `=` and `!=` only.
    Identifier(IdKind),
    Numeric,
    Date,
}

impl Attribute {
    pub const FIXED: [(&'static str, Attribute); 8] = [
        ("patient.sex", Attribute::PatientSex),
        ("patient.age", Attribute::PatientAge),
        ("patient.id", Attribute::PatientId),
        ("study.date", Attribute::StudyDate),
        ("image.laterality", Attribute::ImageLaterality),
        ("image.view", Attribute::ImageView),
        ("image.id", Attribute::ImageId),
        ("image.dose_mgy", Attribute::ImageDose),
    ];

    pub fn from_name(name: &str) -> Option<Attribute> {
        if let Some(rest) = name.strip_prefix("derived.") {
            return is_ident(rest).then(|| Attribute::Derived(rest.to_string()));
        }
        Attribute::FIXED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, a)| a.clone())
    }

    pub fn name(&self) -> String {
        match self {
            Attribute::Derived(n) => format!("derived.{n}"),
            fixed => Attribute::FIXED
                .iter()
                .find(|(_, a)| a == fixed)
                .map(|(n, _)| n.to_string())
                .expect("fixed attribute"),
        }
    }

    pub fn ty(&self) -> AttrType {
        match self {
            Attribute::PatientSex => AttrType::Categorical(&["F", "M"]),
            Attribute::ImageLaterality => AttrType::Categorical(&["L", "R"]),
            Attribute::ImageView => AttrType::Categorical(&["CC", "MLO"]),
            Attribute::PatientId => AttrType::Identifier(IdKind::Patient),
            Attribute::ImageId => AttrType::Identifier(IdKind::Image),
            Attribute::PatientAge | Attribute::ImageDose | Attribute::Derived(_) => AttrType::Numeric,
            Attribute::StudyDate => AttrType::Date,
        }
    }
}

/// `[A-Za-z_][A-Za-z0-9_]*`, the shape of derived scalar names.
pub fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn holds<T: PartialOrd>(self, left: &T, right: &T) -> bool {
        match self {
            CmpOp::Eq => left == right,
            CmpOp::Ne => left != right,
            CmpOp::Lt => left < right,
            CmpOp::Le => left <= right,
            CmpOp::Gt => left > right,
            CmpOp::Ge => left >= right,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Number(f64),
    Date(NaiveDate),
    Text(String),
    Id(GlobalId),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Number(n) => write!(f, "{n}"),
            Literal::Date(d) => write!(f, "{}", d.format("%Y-%m-%d")),
            Literal::Text(s) if is_bare_word(s) => f.write_str(s),
            Literal::Text(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    if c == '"' || c == '\\' {
                        f.write_str("\\")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str("\"")
            }
            Literal::Id(id) => write!(f, "{id}"),
        }
    }
}

pub(crate) fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | ':' | '-' | '+')
}

const KEYWORDS: [&str; 8] = ["select", "where", "and", "or", "not", "in", "true", "false"];

fn is_bare_word(s: &str) -> bool {
    !s.is_empty() && s.chars().all(is_word_char) && !KEYWORDS.contains(&s.to_ascii_lowercase().as_str())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(bool),
    Compare { attr: Attribute, op: CmpOp, value: Literal },
    /// Inclusive on both ends.
    Range { attr: Attribute, lo: Literal, hi: Literal },
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
}

impl Expr {
    pub fn and(l: Expr, r: Expr) -> Expr {
        Expr::And(Box::new(l), Box::new(r))
    }

    pub fn or(l: Expr, r: Expr) -> Expr {
        Expr::Or(Box::new(l), Box::new(r))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(e: Expr) -> Expr {
        Expr::Not(Box::new(e))
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Or(..) => 1,
            Expr::And(..) => 2,
            _ => 3,
        }
    }

    /// Top-level conjuncts, flattening nested `and`.
    pub fn conjuncts(&self) -> Vec<&Expr> {
        match self {
            Expr::And(l, r) => {
                let mut v = l.conjuncts();
                v.extend(r.conjuncts());
                v
            }
            other => vec![other],
        }
    }

    pub fn attributes(&self) -> Vec<&Attribute> {
        match self {
            Expr::Const(_) => vec![],
            Expr::Compare { attr, .. } | Expr::Range { attr, .. } => vec![attr],
            Expr::And(l, r) | Expr::Or(l, r) => {
                let mut v = l.attributes();
                v.extend(r.attributes());
                v
            }
            Expr::Not(e) => e.attributes(),
        }
    }

    fn fmt_min(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        if self.precedence() < min {
            f.write_str("(")?;
            self.fmt_min(f, 0)?;
            return f.write_str(")");
        }
        match self {
            Expr::Const(b) => write!(f, "{b}"),
            Expr::Compare { attr, op, value } => write!(f, "{} {} {}", attr.name(), op.as_str(), value),
            Expr::Range { attr, lo, hi } => write!(f, "{} in [{}, {}]", attr.name(), lo, hi),
            Expr::Or(l, r) => {
                l.fmt_min(f, 1)?;
                f.write_str(" or ")?;
                r.fmt_min(f, 2)
            }
            Expr::And(l, r) => {
                l.fmt_min(f, 2)?;
                f.write_str(" and ")?;
                r.fmt_min(f, 3)
            }
            Expr::Not(e) => {
                f.write_str("not ")?;
                e.fmt_min(f, 3)
            }
        }
    }
}

/// Canonical form; parsing it yields the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_min(f, 0)
    }
}

/// A parsed, validated query. Equality ignores `source_text`.
#[derive(Debug, Clone)]
pub struct FormalQuery {
    pub target: Target,
    pub expr: Expr,
    pub source_text: String,
}

impl PartialEq for FormalQuery {
    fn eq(&self, other: &Self) -> bool {
        self.target == other.target && self.expr == other.expr
    }
}

impl FormalQuery {
    /// The canonical text carried in wire envelopes and result sets.
    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for FormalQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "select {} where {}", self.target.as_str(), self.expr)
    }
}
