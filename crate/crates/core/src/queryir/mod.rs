//! The formal query language: parsing, validation, lowering to a catalog scan
//! plan, and decomposition into local and remote parts.

mod ast;
mod parser;
mod plan;

use thiserror::Error;

pub use ast::{is_ident, AttrType, Attribute, CmpOp, Expr, FormalQuery, Literal, Target};
pub use parser::parse_query;
pub use plan::{needs_local, 
    base_projection, decompose, lower_to_local_plan, Column, ColumnValue, LocalPlan, Pred, QueryPlan, RemoteQuery,
    Vocabulary,
};

use crate::ids::SiteCode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("syntax error at byte {position}: expected {}, found {found}", expected.join(" or "))]
    Syntax {
        position: usize,
        expected: Vec<String>,
        found: String,
    },
    #[error("unknown attribute {0}")]
    UnknownAttribute(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("site {0} is not a member of the VO")]
    NotAMember(SiteCode),
}

#[cfg(test)]
mod tests;
