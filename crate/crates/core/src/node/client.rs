//! Workstation-side access to a node.

use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use crate::ids::SiteCode;
use crate::imagestore::{strip_direct_identifiers, Anonymizer, MgiFile};
use crate::model::{AlgorithmRecord, CatalogStats};
use crate::resultset::{ResultError, ResultSet};
use crate::vo::SessionToken;
use crate::wire::{self, CallError, Credential, ErrorCode, Op, OpTraffic, RemoteError, Reply};

use super::{AddReceipt, ExecReceipt, QueryOutcome};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Call(#[from] CallError),
    #[error("node sent an unreadable reply: {0}")]
    BadReply(String),
    #[error("not authenticated")]
    NoToken,
}

impl ClientError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Call(c) => c.remote_code(),
            ClientError::NoToken => Some(ErrorCode::AuthFailed),
            ClientError::BadReply(_) => None,
        }
    }

    pub fn is_connection(&self) -> bool {
        matches!(self, ClientError::Call(c) if c.is_transport())
    }
}

impl From<ResultError> for ClientError {
    fn from(e: ResultError) -> Self {
        ClientError::BadReply(e.to_string())
    }
}

impl From<RemoteError> for ClientError {
    fn from(e: RemoteError) -> Self {
        ClientError::BadReply(e.message)
    }
}

fn decode<T: for<'de> serde::Deserialize<'de>>(v: Value) -> Result<T, ClientError> {
    serde_json::from_value(v).map_err(|e| ClientError::BadReply(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct NodeClient {
    addr: String,
    token: Option<String>,
    timeout: Duration,
}

impl NodeClient {
    pub fn new(addr: impl Into<String>) -> Self {
        NodeClient {
            addr: addr.into(),
            token: None,
            timeout: Duration::from_secs(120),
        }
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    /// Send a request with this client's token, whatever it is. Lets tests
    /// exercise arbitrary ops and malformed tokens.
    pub fn raw(&self, op: Op, token: Option<&str>, params: Value, binary: &[u8]) -> Result<Reply, CallError> {
        let cred = match token {
            Some(t) => Credential::Token(t),
            None => Credential::None,
        };
        wire::call(&self.addr, self.timeout, op, cred, params, binary)
    }

    fn call(&self, op: Op, params: Value, binary: &[u8]) -> Result<Reply, ClientError> {
        let token = self.token.as_deref().ok_or(ClientError::NoToken)?;
        Ok(self.raw(op, Some(token), params, binary)?)
    }

    pub fn authenticate(&mut self, user: &str, credential: &str) -> Result<SessionToken, ClientError> {
        let reply = self.raw(Op::Auth, None, json!({ "user": user, "credential": credential }), &[])?;
        let t: SessionToken = decode(reply.result)?;
        self.token = Some(t.token.clone());
        Ok(t)
    }

    /// Upload a file. Names and full birth dates are stripped here so they
    /// never travel; files this side cannot parse go up unchanged and the
    /// node reports why.
    pub fn add_file(&self, mgi: &[u8]) -> Result<AddReceipt, ClientError> {
        let minimized = MgiFile::parse(mgi)
            .ok()
            .filter(|f| !Anonymizer::is_anonymized(f))
            .and_then(|f| strip_direct_identifiers(&f).ok())
            .map(|f| f.to_bytes());
        let body = minimized.as_deref().unwrap_or(mgi);
        decode(self.call(Op::Add, json!({}), body)?.result)
    }

    /// File bytes by file id, image id or sha256.
    pub fn retrieve(&self, id: &str) -> Result<Vec<u8>, ClientError> {
        Ok(self.call(Op::Retrieve, json!({ "id": id }), &[])?.binary)
    }

    pub fn query(&self, text: &str) -> Result<QueryOutcome, ClientError> {
        let reply = self.call(Op::Query, json!({ "query": text }), &[])?;
        let xml: String = wire::param(&reply.result, "xml")?;
        Ok(QueryOutcome {
            result: ResultSet::from_xml(xml.as_bytes())?,
            warnings: reply.warnings,
        })
    }

    /// The XML exactly as the node serialized it.
    pub fn query_xml(&self, text: &str) -> Result<(String, Vec<String>), ClientError> {
        let reply = self.call(Op::Query, json!({ "query": text }), &[])?;
        Ok((wire::param(&reply.result, "xml")?, reply.warnings))
    }

    pub fn add_algorithm(&self, name: &str, source: &str) -> Result<(AlgorithmRecord, Vec<String>), ClientError> {
        let reply = self.call(Op::AddAlg, json!({ "name": name, "source": source }), &[])?;
        Ok((decode(reply.result)?, reply.warnings))
    }

    pub fn execute_algorithm(
        &self,
        name: &str,
        version: Option<u32>,
        selector: &str,
    ) -> Result<(ExecReceipt, Vec<String>), ClientError> {
        let reply = self.call(
            Op::ExecAlg,
            json!({ "name": name, "version": version, "selector": selector }),
            &[],
        )?;
        Ok((decode(reply.result)?, reply.warnings))
    }

    pub fn stats(&self) -> Result<CatalogStats, ClientError> {
        decode(self.call(Op::Stats, json!({}), &[])?.result)
    }

    pub fn traffic(&self) -> Result<BTreeMap<String, OpTraffic>, ClientError> {
        decode(self.call(Op::Traffic, json!({}), &[])?.result)
    }
}

/// Create or update a user at the registry.
pub fn add_user(
    registry: &str,
    admin_token: &str,
    user: &str,
    credential: &str,
    home_site: Option<&SiteCode>,
    enabled: bool,
) -> Result<(), ClientError> {
    wire::call(
        registry,
        Duration::from_secs(30),
        Op::UserAdd,
        Credential::Token(admin_token),
        json!({ "user": user, "credential": credential, "home_site": home_site, "enabled": enabled }),
        &[],
    )?;
    Ok(())
}
