//! Gridbox: a federated medical-imaging grid in miniature.
//!
//! Autonomous site nodes keep a metadata catalog and a content-addressed image
//! store. A central registry holds VO membership and users. Queries and
//! algorithm executions are decomposed at the receiving node, shipped to the
//! sites that hold the data, and the XML result sets are merged on the way
//! back.

pub mod algorithms;
pub mod cohort;
pub mod ids;
pub mod imagestore;
pub mod model;
pub mod node;
pub mod queryir;
pub mod resultset;
pub mod scenario;
pub mod vo;
pub mod wire;

#[cfg(test)]
mod fixtures;

pub use ids::{GlobalId, IdKind, SiteCode};
