use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rand::RngCore;
use serde_json::{json, Value};

use crate::algorithms::{builtin_density, parse_algorithm, AlgorithmProgram};
use crate::ids::{GlobalId, IdKind, SiteCode};
use crate::imagestore::{is_sha256_hex, sha256_hex, Anonymizer, BlobError, BlobStore, FileRef, HeaderKey, MgiFile};
use crate::model::{
    AlgorithmRecord, Catalog, CatalogError, DerivedRecord, ImageRecord, Laterality, PatientRecord, Record,
    SeriesRecord, SeriesTree, Sex, StudyRecord, StudyTree, View,
};
use crate::queryir::{decompose, lower_to_local_plan, needs_local, parse_query, FormalQuery, QueryError, Target};
use crate::resultset::{ResultError, ResultSet};
use crate::vo::{identity_digest, NodeDescriptor, SessionToken};
use crate::wire::{
    self, Accountant, CallError, Credential, ErrorCode, Handler, Op, Outcome, RemoteError, Reply, Request,
};

use super::results::{local_result, LocalQueryError};
use super::{NodeConfig, NodeError};

fn err(code: ErrorCode, msg: impl Into<String>) -> RemoteError {
    RemoteError::new(code, msg)
}

fn internal(e: impl std::fmt::Display) -> RemoteError {
    err(ErrorCode::Internal, e.to_string())
}

fn storage(e: impl std::fmt::Display) -> RemoteError {
    err(ErrorCode::StorageError, e.to_string())
}

fn query_error(e: QueryError) -> RemoteError {
    match e {
        QueryError::UnknownAttribute(_) => err(ErrorCode::UnknownAttribute, e.to_string()),
        QueryError::NotAMember(_) => internal(e),
        _ => err(ErrorCode::QuerySyntax, e.to_string()),
    }
}

fn local_query_error(e: LocalQueryError) -> RemoteError {
    match e {
        LocalQueryError::Query(q) => query_error(q),
        LocalQueryError::Catalog(CatalogError::UnknownAttribute(a)) => {
            err(ErrorCode::UnknownAttribute, format!("unknown attribute {a}"))
        }
        LocalQueryError::Catalog(c) => internal(c),
        LocalQueryError::Result(r) => err(ErrorCode::SchemaViolation, r.to_string()),
    }
}

fn result_error(e: ResultError) -> RemoteError {
    err(ErrorCode::SchemaViolation, e.to_string())
}

fn load_or_create_secret(path: &Path) -> Result<Vec<u8>, NodeError> {
    match std::fs::read_to_string(path) {
        Ok(s) => hex::decode(s.trim()).map_err(|e| NodeError::Config(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            let mut b = [0u8; 32];
            rand::rng().fill_bytes(&mut b);
            std::fs::write(path, hex::encode(b))?;
            Ok(b.to_vec())
        }
        Err(e) => Err(e.into()),
    }
}

struct Membership {
    nodes: BTreeMap<SiteCode, NodeDescriptor>,
    fetched: Instant,
}

/// Result of a federated query: the merged answer plus one warning per site
/// that did not answer.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub result: ResultSet,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct AddReceipt {
    pub file: FileRef,
    pub image: GlobalId,
    pub patient: GlobalId,
    pub written: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct ExecReceipt {
    pub algorithm: GlobalId,
    pub count: u64,
    pub per_site: BTreeMap<SiteCode, u64>,
}

pub struct Node {
    cfg: NodeConfig,
    address: String,
    catalog: Catalog,
    blobs: BlobStore,
    anonymizer: Anonymizer,
    identity_secret: Vec<u8>,
    vo_secret: RwLock<Vec<u8>>,
    members: Mutex<Membership>,
    tokens: Mutex<HashMap<String, SessionToken>>,
    pending_gossip: Mutex<BTreeSet<(SiteCode, GlobalId)>>,
    accountant: Arc<Accountant>,
    exec_lock: Mutex<()>,
}

impl Node {
    /// Open local state under the data directory. Does not contact the
    /// registry; see [`Node::register`].
    pub fn open(cfg: NodeConfig, address: String, accountant: Arc<Accountant>) -> Result<Node, NodeError> {
        let dir = &cfg.data_dir;
        std::fs::create_dir_all(dir)?;
        let site = cfg.site.clone();
        let secret = match &cfg.secret {
            Some(s) => s.as_bytes().to_vec(),
            None => load_or_create_secret(&dir.join("site.secret"))?,
        };
        let identity_secret = load_or_create_secret(&dir.join("identity"))?;
        let catalog = Catalog::open(site.clone(), &dir.join("catalog.log"))?;
        catalog.upsert_algorithm(builtin_density().to_record())?;
        let blobs = BlobStore::open(site.clone(), dir.join("store"))?;
        let anonymizer = Anonymizer::with_linkage_file(site, secret, &dir.join("linkage.tsv"))?;
        Ok(Node {
            cfg,
            address,
            catalog,
            blobs,
            anonymizer,
            identity_secret,
            vo_secret: RwLock::new(Vec::new()),
            members: Mutex::new(Membership {
                nodes: BTreeMap::new(),
                fetched: Instant::now(),
            }),
            tokens: Mutex::new(HashMap::new()),
            pending_gossip: Mutex::new(BTreeSet::new()),
            accountant,
            exec_lock: Mutex::new(()),
        })
    }

    pub fn site(&self) -> &SiteCode {
        &self.cfg.site
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn accountant(&self) -> &Arc<Accountant> {
        &self.accountant
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    // ---- registry and membership ----

    fn registry_call(&self, op: Op, params: Value) -> Result<Reply, CallError> {
        let secret = self.vo_secret.read().unwrap().clone();
        let cred = if secret.is_empty() {
            Credential::None
        } else {
            Credential::Peer {
                secret: &secret,
                site: self.site(),
            }
        };
        wire::call(&self.cfg.registry, self.cfg.remote_timeout, op, cred, params, &[])
    }

    /// Announce this node to the registry and take the membership it returns.
    pub fn register(&self) -> Result<(), NodeError> {
        let params = json!({
            "site": self.site(),
            "address": self.address,
            "identity_secret": hex::encode(&self.identity_secret),
        });
        let reply = wire::call(
            &self.cfg.registry,
            self.cfg.remote_timeout,
            Op::NodeReg,
            Credential::None,
            params,
            &[],
        )
        .map_err(|e| NodeError::Registry(e.to_string()))?;
        let secret: String = wire::param(&reply.result, "vo_secret").map_err(|e| NodeError::Registry(e.message))?;
        *self.vo_secret.write().unwrap() = hex::decode(secret).map_err(|e| NodeError::Registry(e.to_string()))?;
        let membership: Vec<NodeDescriptor> =
            wire::param(&reply.result, "membership").map_err(|e| NodeError::Registry(e.message))?;
        self.install_membership(membership);
        Ok(())
    }

    pub fn identity(&self) -> String {
        identity_digest(&self.identity_secret)
    }

    fn install_membership(&self, list: Vec<NodeDescriptor>) {
        let mut m = self.members.lock().unwrap();
        let fresh: Vec<SiteCode> = list
            .iter()
            .map(|d| d.site.clone())
            .filter(|s| !m.nodes.contains_key(s) && s != self.site())
            .collect();
        m.nodes = list.into_iter().map(|d| (d.site.clone(), d)).collect();
        m.fetched = Instant::now();
        drop(m);
        if !fresh.is_empty() {
            // Newcomers need the programs that originated here.
            let own: Vec<GlobalId> = self
                .catalog
                .algorithms()
                .into_iter()
                .filter(|a| a.id.site() == self.site())
                .map(|a| a.id)
                .collect();
            let mut pending = self.pending_gossip.lock().unwrap();
            for site in fresh {
                for id in &own {
                    pending.insert((site.clone(), id.clone()));
                }
            }
        }
    }

    pub fn refresh_membership(&self) -> Result<(), CallError> {
        let reply = self.registry_call(Op::NodeList, json!({}))?;
        let list: Vec<NodeDescriptor> = wire::param(&reply.result, "membership")?;
        self.install_membership(list);
        Ok(())
    }

    fn membership(&self) -> Vec<NodeDescriptor> {
        let stale = self.members.lock().unwrap().fetched.elapsed() >= self.cfg.membership_refresh;
        if stale {
            if let Err(e) = self.refresh_membership() {
                log::warn!("{}: membership refresh failed, using cached list: {e}", self.site());
                self.members.lock().unwrap().fetched = Instant::now();
            }
        }
        self.members.lock().unwrap().nodes.values().cloned().collect()
    }

    pub fn member_sites(&self) -> Vec<SiteCode> {
        self.membership().into_iter().map(|d| d.site).collect()
    }

    fn peer_address(&self, site: &SiteCode) -> Option<String> {
        let known = self.members.lock().unwrap().nodes.get(site).map(|d| d.address.clone());
        known.or_else(|| {
            self.refresh_membership().ok()?;
            self.members.lock().unwrap().nodes.get(site).map(|d| d.address.clone())
        })
    }

    fn peer_call(&self, site: &SiteCode, op: Op, params: Value, timeout: Duration) -> Result<Reply, CallError> {
        let addr = self.peer_address(site).ok_or_else(|| {
            CallError::Remote(err(ErrorCode::UnknownPeer, format!("{site} is not a VO member")))
        })?;
        let secret = self.vo_secret.read().unwrap().clone();
        wire::call(
            &addr,
            timeout,
            op,
            Credential::Peer {
                secret: &secret,
                site: self.site(),
            },
            params,
            &[],
        )
    }

    // ---- authentication ----

    pub fn authenticate(&self, user: &str, credential: &str) -> Result<SessionToken, RemoteError> {
        let reply = self
            .registry_call(
                Op::UserVerify,
                json!({ "user": user, "credential": credential, "ttl": self.cfg.token_ttl }),
            )
            .map_err(|e| match e {
                CallError::Remote(r) if r.code == ErrorCode::AuthFailed => r,
                CallError::Remote(r) => err(ErrorCode::RegistryUnreachable, r.to_string()),
                other => err(ErrorCode::RegistryUnreachable, other.to_string()),
            })?;
        let token: SessionToken = serde_json::from_value(reply.result).map_err(internal)?;
        self.tokens.lock().unwrap().insert(token.token.clone(), token.clone());
        Ok(token)
    }

    /// Validate a client token, asking the registry about ones not seen here.
    pub fn check_token(&self, token: Option<&str>) -> Result<SessionToken, RemoteError> {
        let denied = || err(ErrorCode::AuthFailed, "missing, expired or unknown session token");
        let token = token.filter(|t| !t.is_empty() && !t.starts_with(wire::PEER_PREFIX)).ok_or_else(denied)?;
        let cached = self.tokens.lock().unwrap().get(token).cloned();
        if let Some(t) = cached {
            if t.is_live() {
                return Ok(t);
            }
            self.tokens.lock().unwrap().remove(token);
            return Err(denied());
        }
        match self.registry_call(Op::TokenCheck, json!({ "token": token })) {
            Ok(reply) => {
                let t: SessionToken = serde_json::from_value(reply.result).map_err(internal)?;
                if !t.is_live() {
                    return Err(denied());
                }
                self.tokens.lock().unwrap().insert(t.token.clone(), t.clone());
                Ok(t)
            }
            Err(CallError::Remote(r)) if r.code == ErrorCode::AuthFailed => Err(denied()),
            Err(e) => Err(err(ErrorCode::RegistryUnreachable, e.to_string())),
        }
    }

    fn check_peer(&self, req: &Request) -> Result<SiteCode, RemoteError> {
        let secret = self.vo_secret.read().unwrap().clone();
        let site = wire::verify_peer_token(&secret, req)
            .ok_or_else(|| err(ErrorCode::AuthFailed, "request is not signed by a VO member"))?;
        if self.members.lock().unwrap().nodes.contains_key(&site) {
            return Ok(site);
        }
        let _ = self.refresh_membership();
        if self.members.lock().unwrap().nodes.contains_key(&site) {
            Ok(site)
        } else {
            Err(err(ErrorCode::UnknownPeer, format!("{site} is not a registered node")))
        }
    }

    // ---- Add ----

    pub fn add_file(&self, bytes: &[u8]) -> Result<AddReceipt, RemoteError> {
        let malformed = |m: String| err(ErrorCode::MalformedFile, m);
        let f = MgiFile::parse(bytes).map_err(|e| malformed(e.to_string()))?;
        let need = |k: HeaderKey| {
            f.get(k)
                .map(str::to_string)
                .ok_or_else(|| malformed(format!("header lacks {k}")))
        };
        let original_pid = need(HeaderKey::PatientId)?;
        let sex: Sex = need(HeaderKey::PatientSex)?.parse().map_err(|e| malformed(format!("{e}")))?;
        let study_key = need(HeaderKey::StudyId)?;
        let study_date = NaiveDate::parse_from_str(&need(HeaderKey::StudyDate)?, "%Y-%m-%d")
            .map_err(|e| malformed(format!("study.date: {e}")))?;
        let series_key = need(HeaderKey::SeriesId)?;
        let image_key = need(HeaderKey::ImageId)?;
        let laterality: Laterality = need(HeaderKey::ImageLaterality)?
            .parse()
            .map_err(|e| malformed(format!("{e}")))?;
        let view: View = need(HeaderKey::ImageView)?.parse().map_err(|e| malformed(format!("{e}")))?;
        need(HeaderKey::PatientBirthDate)?;
        let dose_mgy = f
            .get(HeaderKey::ImageDose)
            .map(|d| d.parse::<f64>().map_err(|_| malformed(format!("image.dose_mgy {d:?} is not a number"))))
            .transpose()?;
        let modality = f.get(HeaderKey::SeriesModality).unwrap_or("MG").to_string();

        let pseudonym = self
            .anonymizer
            .pseudonym_for(&original_pid, f.get(HeaderKey::PatientName));
        let anon = self
            .anonymizer
            .anonymize(&f, &pseudonym)
            .map_err(|e| malformed(e.to_string()))?;
        let patient_id = GlobalId::parse_kind(anon.get(HeaderKey::PatientId).unwrap_or(""), IdKind::Patient)
            .map_err(|e| malformed(e.to_string()))?;
        if patient_id.site() != self.site() {
            return Err(malformed(format!("file belongs to patient {patient_id} of another site")));
        }
        let birth_year = crate::imagestore::birth_year_of(anon.get(HeaderKey::PatientBirthDate).unwrap_or(""))
            .map_err(|e| malformed(e.to_string()))?;
        let pseudonym = anon.get(HeaderKey::PatientName).unwrap_or(&pseudonym).to_string();

        let stored = anon.to_bytes();
        let file = self.blobs.put(&stored).map_err(storage)?;
        let path = format!("{original_pid}\u{1f}{study_key}");
        let study_id = self.anonymizer.mint(IdKind::Study, &path);
        let path = format!("{path}\u{1f}{series_key}");
        let series_id = self.anonymizer.mint(IdKind::Series, &path);
        let image_id = self.anonymizer.mint(IdKind::Image, &format!("{path}\u{1f}{image_key}"));

        let patient = PatientRecord {
            id: patient_id.clone(),
            pseudonym,
            sex,
            birth_year,
        };
        let image = ImageRecord {
            id: image_id.clone(),
            series: series_id.clone(),
            laterality,
            view,
            rows: anon.rows(),
            cols: anon.cols(),
            file: file.clone(),
            dose_mgy,
        };
        let tree = StudyTree {
            study: StudyRecord {
                id: study_id.clone(),
                patient: patient_id.clone(),
                date: study_date,
            },
            series: vec![SeriesTree {
                series: SeriesRecord {
                    id: series_id,
                    study: study_id,
                    modality,
                },
                images: vec![image],
            }],
        };
        let written = self.catalog.ingest_tree(patient, vec![tree]).map_err(|e| match e {
            CatalogError::InvalidRecord(m) => malformed(m),
            CatalogError::ForeignSite { .. } | CatalogError::DanglingParent(_) => malformed(e.to_string()),
            other => storage(other),
        })?;
        Ok(AddReceipt {
            file,
            image: image_id,
            patient: patient_id,
            written,
        })
    }

    // ---- Retrieve ----

    /// Bytes for a file id, image id or bare digest held at this site.
    fn local_bytes(&self, id: &str) -> Result<Vec<u8>, RemoteError> {
        let not_found = || err(ErrorCode::NotFound, format!("no file {id} at {}", self.site()));
        let sha = if is_sha256_hex(id) {
            id.to_string()
        } else {
            let gid: GlobalId = id.parse().map_err(|e: crate::ids::IdError| err(ErrorCode::BadRequest, e.to_string()))?;
            match gid.kind() {
                IdKind::File => self.blobs.resolve(&gid).ok_or_else(not_found)?,
                IdKind::Image => match self.catalog.lookup(&gid) {
                    Some(Record::Image(img)) => img.file.sha256,
                    _ => return Err(not_found()),
                },
                IdKind::Derived => match self.catalog.lookup(&gid) {
                    Some(Record::Derived(d)) => d.file.ok_or_else(not_found)?.sha256,
                    _ => return Err(not_found()),
                },
                _ => return Err(err(ErrorCode::BadRequest, format!("{id} does not name a file"))),
            }
        };
        self.blobs.get(&sha).map_err(|e| match e {
            BlobError::NotFound(_) => not_found(),
            other => storage(other),
        })
    }

    fn fetch_from(&self, site: &SiteCode, id: &str) -> Result<Vec<u8>, RemoteError> {
        match self.peer_call(site, Op::PeerFetch, json!({ "id": id }), self.cfg.relay_timeout) {
            Ok(reply) => {
                let expected: Option<String> = reply.result.get("sha256").and_then(Value::as_str).map(str::to_string);
                if expected.as_deref() != Some(sha256_hex(&reply.binary).as_str()) {
                    return Err(err(ErrorCode::StorageError, format!("relay from {site} failed its hash check")));
                }
                Ok(reply.binary)
            }
            Err(CallError::Remote(r)) => Err(r),
            Err(e) => Err(err(ErrorCode::PeerUnreachable, e.to_string())),
        }
    }

    pub fn retrieve(&self, id: &str) -> Result<Vec<u8>, RemoteError> {
        let id = id.trim();
        if is_sha256_hex(id) {
            match self.local_bytes(id) {
                Err(e) if e.code == ErrorCode::NotFound => {}
                other => return other,
            }
            let mut unreachable = Vec::new();
            for site in self.member_sites().iter().filter(|s| *s != self.site()) {
                match self.fetch_from(site, id) {
                    Ok(b) => return Ok(b),
                    Err(e) if e.code == ErrorCode::NotFound => {}
                    Err(e) => unreachable.push(format!("{site}: {}", e.message)),
                }
            }
            return Err(if unreachable.is_empty() {
                err(ErrorCode::NotFound, format!("no site holds {id}"))
            } else {
                err(
                    ErrorCode::PeerUnreachable,
                    format!("{id} not found; unreachable: {}", unreachable.join("; ")),
                )
            });
        }
        let gid: GlobalId = id
            .parse()
            .map_err(|e: crate::ids::IdError| err(ErrorCode::NotFound, format!("{id}: {e}")))?;
        if gid.site() == self.site() {
            self.local_bytes(id)
        } else {
            self.fetch_from(gid.site(), id)
        }
    }

    // ---- Query ----

    fn parse(&self, text: &str) -> Result<FormalQuery, RemoteError> {
        parse_query(text).map_err(query_error)
    }

    /// Run `f` on every remote of `q`'s decomposition concurrently with
    /// `local`. Returns the local value and the per-site remote outcomes.
    fn scatter<L, R>(
        &self,
        q: &FormalQuery,
        local: impl FnOnce() -> L,
        remote: impl Fn(&SiteCode) -> Result<R, RemoteError> + Sync,
    ) -> Result<(L, Vec<(SiteCode, Result<R, RemoteError>)>), RemoteError>
    where
        R: Send,
    {
        let members = self.member_sites();
        let members = if members.contains(self.site()) {
            members
        } else {
            let mut m = members;
            m.push(self.site().clone());
            m
        };
        let plan = decompose(q, &members, self.site()).map_err(query_error)?;
        let remote = &remote;
        Ok(std::thread::scope(|s| {
            let handles: Vec<_> = plan
                .remotes
                .iter()
                .map(|r| (r.site.clone(), s.spawn(move || remote(&r.site))))
                .collect();
            let l = local();
            let rs = handles
                .into_iter()
                .map(|(site, h)| {
                    let out = h.join().unwrap_or_else(|_| Err(internal("remote dispatch panicked")));
                    (site, out)
                })
                .collect();
            (l, rs)
        }))
    }

    pub fn run_query(&self, text: &str) -> Result<QueryOutcome, RemoteError> {
        let q = self.parse(text)?;
        let canonical = q.canonical();
        let (local, remotes) = self.scatter(
            &q,
            || local_result(&self.catalog, &q).map_err(local_query_error),
            |site| {
                let reply = self
                    .peer_call(site, Op::RQuery, json!({ "query": canonical, "hop": 1 }), self.cfg.remote_timeout)
                    .map_err(|e| match e {
                        CallError::Remote(r) => r,
                        other => err(ErrorCode::PeerUnreachable, other.to_string()),
                    })?;
                let xml: String = wire::param(&reply.result, "xml")?;
                let rs = ResultSet::from_xml(xml.as_bytes()).map_err(result_error)?;
                if rs.origin_sites != BTreeSet::from([site.clone()]) {
                    return Err(err(ErrorCode::SchemaViolation, format!("{site} answered for other sites")));
                }
                Ok(rs)
            },
        )?;
        let local = local?;
        let mut parts = Vec::new();
        let mut warnings = Vec::new();
        for (site, out) in remotes {
            match out {
                Ok(rs) => parts.push(rs),
                Err(e) => warnings.push(format!("site {site} did not answer: {e}")),
            }
        }
        if parts.is_empty() || needs_local(&q, self.site()) {
            parts.insert(0, local);
        }
        let result = ResultSet::merge(&parts).map_err(result_error)?;
        Ok(QueryOutcome { result, warnings })
    }

    pub fn handle_remote_query(&self, query: &str, hop: u8) -> Result<ResultSet, RemoteError> {
        if hop != 1 {
            return Err(err(ErrorCode::HopViolation, format!("remote queries carry hop 1, got {hop}")));
        }
        if !self.cfg.rquery_delay.is_zero() {
            std::thread::sleep(self.cfg.rquery_delay);
        }
        let q = self.parse(query)?;
        local_result(&self.catalog, &q).map_err(local_query_error)
    }

    // ---- algorithms ----

    pub fn find_algorithm(&self, name: &str, version: Option<u32>) -> Option<AlgorithmRecord> {
        self.catalog
            .algorithms()
            .into_iter()
            .filter(|a| a.name == name && version.is_none_or(|v| a.version == v))
            .max_by_key(|a| a.version)
    }

    fn accept_algorithm(&self, rec: AlgorithmRecord) -> Result<(), RemoteError> {
        let program = parse_algorithm(&rec.source).map_err(|e| err(ErrorCode::SyntaxError, e.to_string()))?;
        if program.emits() != rec.emits {
            return Err(err(ErrorCode::BadRequest, "emit list does not match the source"));
        }
        if let Some(existing) = self.find_algorithm(&rec.name, Some(rec.version)) {
            if existing.id != rec.id {
                return Err(err(
                    ErrorCode::VersionConflict,
                    format!("{} v{} is already registered as {}", rec.name, rec.version, existing.id),
                ));
            }
        }
        self.catalog.upsert_algorithm(rec).map_err(storage)?;
        Ok(())
    }

    fn gossip(&self, site: &SiteCode, rec: &AlgorithmRecord) -> Result<(), RemoteError> {
        let params = json!({ "record": rec, "hop": 1 });
        match self.peer_call(site, Op::AddAlg, params, self.cfg.remote_timeout) {
            Ok(_) => Ok(()),
            Err(CallError::Remote(r)) => Err(r),
            Err(e) => Err(err(ErrorCode::PeerUnreachable, e.to_string())),
        }
    }

    /// Retry gossip that failed earlier. Called periodically.
    pub fn flush_pending_gossip(&self) {
        let pending: Vec<_> = self.pending_gossip.lock().unwrap().iter().cloned().collect();
        for (site, id) in pending {
            let Some(Record::Algorithm(rec)) = self.catalog.lookup(&id) else {
                self.pending_gossip.lock().unwrap().remove(&(site, id));
                continue;
            };
            match self.gossip(&site, &rec) {
                Err(e) if e.code == ErrorCode::PeerUnreachable => {}
                Err(e) => {
                    log::warn!("{}: {site} rejected {}: {e}", self.site(), rec.id);
                    self.pending_gossip.lock().unwrap().remove(&(site, id));
                }
                Ok(()) => {
                    self.pending_gossip.lock().unwrap().remove(&(site, id));
                }
            }
        }
    }

    pub fn pending_gossip(&self) -> usize {
        self.pending_gossip.lock().unwrap().len()
    }

    pub fn add_algorithm(&self, name: &str, source: &str) -> Result<(AlgorithmRecord, Vec<String>), RemoteError> {
        if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(err(ErrorCode::BadRequest, format!("bad algorithm name {name:?}")));
        }
        let program = parse_algorithm(source).map_err(|e| err(ErrorCode::SyntaxError, e.to_string()))?;
        let rec = {
            let _g = self.exec_lock.lock().unwrap();
            let version = self.find_algorithm(name, None).map_or(1, |a| a.version + 1);
            let rec = AlgorithmProgram {
                id: GlobalId::mint(self.site(), IdKind::Algorithm),
                name: name.to_string(),
                version,
                program,
            }
            .to_record();
            self.catalog.upsert_algorithm(rec.clone()).map_err(storage)?;
            rec
        };
        let mut warnings = Vec::new();
        for site in self.member_sites().iter().filter(|s| *s != self.site()) {
            if let Err(e) = self.gossip(site, &rec) {
                if e.code == ErrorCode::PeerUnreachable {
                    self.pending_gossip.lock().unwrap().insert((site.clone(), rec.id.clone()));
                    warnings.push(format!("site {site} unreachable; registration will be retried: {}", e.message));
                } else {
                    warnings.push(format!("site {site} rejected the program: {e}"));
                }
            }
        }
        Ok((rec, warnings))
    }

    fn selector(&self, text: &str) -> Result<FormalQuery, RemoteError> {
        let q = self.parse(text)?;
        if q.target != Target::Images {
            return Err(err(ErrorCode::QuerySyntax, "an execution selector must select images"));
        }
        Ok(q)
    }

    /// Run a program over this site's images matching `q`, writing one
    /// derived record per image.
    pub fn execute_local(&self, rec: &AlgorithmRecord, q: &FormalQuery) -> Result<u64, RemoteError> {
        let program = AlgorithmProgram::from_record(rec).map_err(|e| err(ErrorCode::SyntaxError, e.to_string()))?;
        let plan = lower_to_local_plan(q, &self.catalog.vocabulary()).map_err(query_error)?;
        let matched = self
            .catalog
            .select(&plan)
            .map_err(|e| local_query_error(LocalQueryError::Catalog(e)))?;
        let mut count = 0;
        for row in matched {
            let bytes = self.blobs.get(&row.image.file.sha256).map_err(storage)?;
            let img = MgiFile::parse(&bytes).map_err(storage)?;
            let scalars = program.execute(&img);
            let mut report = format!("image = {}\nalgorithm = {}\n", row.image.id, rec.id);
            for (k, v) in &scalars {
                report.push_str(&format!("{k} = {v}\n"));
            }
            let file = self.blobs.put(report.as_bytes()).map_err(storage)?;
            let id = self
                .anonymizer
                .mint(IdKind::Derived, &format!("{}|{}", row.image.id, rec.id));
            self.catalog
                .upsert_derived(DerivedRecord {
                    id,
                    image: row.image.id.clone(),
                    algorithm: rec.id.clone(),
                    scalars,
                    file: Some(file),
                })
                .map_err(storage)?;
            count += 1;
        }
        Ok(count)
    }

    pub fn execute_algorithm(
        &self,
        name: &str,
        version: Option<u32>,
        selector: &str,
    ) -> Result<(ExecReceipt, Vec<String>), RemoteError> {
        let q = self.selector(selector)?;
        let rec = self.find_algorithm(name, version).ok_or_else(|| {
            let v = version.map(|v| format!(" v{v}")).unwrap_or_default();
            err(ErrorCode::UnknownAlgorithm, format!("no algorithm {name}{v}"))
        })?;
        let canonical = q.canonical();
        let (local, remotes) = self.scatter(
            &q,
            || self.execute_local(&rec, &q),
            |site| {
                let params = json!({ "record": rec, "selector": canonical, "hop": 1 });
                let reply = self
                    .peer_call(site, Op::ExecAlg, params, self.cfg.remote_timeout)
                    .map_err(|e| match e {
                        CallError::Remote(r) => r,
                        other => err(ErrorCode::PeerUnreachable, other.to_string()),
                    })?;
                wire::param::<u64>(&reply.result, "count")
            },
        )?;
        let mut per_site = BTreeMap::from([(self.site().clone(), local?)]);
        let mut warnings = Vec::new();
        for (site, out) in remotes {
            match out {
                Ok(n) => {
                    per_site.insert(site, n);
                }
                Err(e) => warnings.push(format!("site {site} did not execute: {e}")),
            }
        }
        Ok((
            ExecReceipt {
                algorithm: rec.id,
                count: per_site.values().sum(),
                per_site,
            },
            warnings,
        ))
    }

    // ---- dispatch ----

    fn dispatch(&self, req: &Request, binary: Vec<u8>) -> Result<Outcome, RemoteError> {
        let op = Op::from_name(&req.op).ok_or_else(|| err(ErrorCode::UnknownOp, format!("unknown op {}", req.op)))?;
        let p = &req.params;
        let from_peer = req.token.as_deref().is_some_and(|t| t.starts_with(wire::PEER_PREFIX));
        match op {
            Op::Auth => {
                let user: String = wire::param(p, "user")?;
                let credential: String = wire::param(p, "credential")?;
                let t = self.authenticate(&user, &credential)?;
                Ok(Outcome::value(serde_json::to_value(t).map_err(internal)?))
            }
            Op::RQuery => {
                self.check_peer(req)?;
                let hop: u8 = wire::param(p, "hop")?;
                let query: String = wire::param(p, "query")?;
                let rs = self.handle_remote_query(&query, hop)?;
                let xml = String::from_utf8(rs.to_xml()).map_err(internal)?;
                Ok(Outcome::value(json!({ "xml": xml })))
            }
            Op::PeerFetch => {
                self.check_peer(req)?;
                let id: String = wire::param(p, "id")?;
                let bytes = self.local_bytes(&id)?;
                Ok(Outcome {
                    result: json!({ "sha256": sha256_hex(&bytes), "size": bytes.len() }),
                    warnings: Vec::new(),
                    binary: bytes,
                })
            }
            Op::AddAlg if from_peer => {
                self.check_peer(req)?;
                let hop: u8 = wire::param(p, "hop")?;
                if hop != 1 {
                    return Err(err(ErrorCode::HopViolation, "gossiped programs carry hop 1"));
                }
                let rec: AlgorithmRecord = wire::param(p, "record")?;
                let id = rec.id.clone();
                self.accept_algorithm(rec)?;
                Ok(Outcome::value(json!({ "id": id })))
            }
            Op::ExecAlg if from_peer => {
                self.check_peer(req)?;
                let hop: u8 = wire::param(p, "hop")?;
                if hop != 1 {
                    return Err(err(ErrorCode::HopViolation, "remote executions carry hop 1"));
                }
                let rec: AlgorithmRecord = wire::param(p, "record")?;
                let selector: String = wire::param(p, "selector")?;
                let q = self.selector(&selector)?;
                if self.catalog.lookup(&rec.id).is_none() {
                    self.accept_algorithm(rec.clone())?;
                }
                let count = self.execute_local(&rec, &q)?;
                Ok(Outcome::value(json!({ "count": count })))
            }
            Op::Add | Op::Retrieve | Op::Query | Op::AddAlg | Op::ExecAlg | Op::Stats | Op::Traffic => {
                self.check_token(req.token.as_deref())?;
                self.client_op(op, p, binary)
            }
            other => Err(err(ErrorCode::UnknownOp, format!("{other} is not a node operation"))),
        }
    }

    fn client_op(&self, op: Op, p: &Value, binary: Vec<u8>) -> Result<Outcome, RemoteError> {
        match op {
            Op::Add => {
                let receipt = self.add_file(&binary)?;
                Ok(Outcome::value(serde_json::to_value(receipt).map_err(internal)?))
            }
            Op::Retrieve => {
                let id: String = wire::param(p, "id")?;
                let bytes = self.retrieve(&id)?;
                Ok(Outcome {
                    result: json!({ "sha256": sha256_hex(&bytes), "size": bytes.len() }),
                    warnings: Vec::new(),
                    binary: bytes,
                })
            }
            Op::Query => {
                let text: String = wire::param(p, "query")?;
                let out = self.run_query(&text)?;
                let xml = String::from_utf8(out.result.to_xml()).map_err(internal)?;
                Ok(Outcome {
                    result: json!({
                        "xml": xml,
                        "summary": out.result.summary(),
                        "origin": out.result.origin_sites,
                    }),
                    warnings: out.warnings,
                    binary: Vec::new(),
                })
            }
            Op::AddAlg => {
                let name: String = wire::param(p, "name")?;
                let source: String = wire::param(p, "source")?;
                let (rec, warnings) = self.add_algorithm(&name, &source)?;
                Ok(Outcome {
                    result: serde_json::to_value(rec).map_err(internal)?,
                    warnings,
                    binary: Vec::new(),
                })
            }
            Op::ExecAlg => {
                let name: String = wire::param(p, "name")?;
                let version: Option<u32> = wire::param(p, "version")?;
                let selector: String = wire::param(p, "selector")?;
                let (receipt, warnings) = self.execute_algorithm(&name, version, &selector)?;
                Ok(Outcome {
                    result: serde_json::to_value(receipt).map_err(internal)?,
                    warnings,
                    binary: Vec::new(),
                })
            }
            Op::Stats => Ok(Outcome::value(serde_json::to_value(self.catalog.stats()).map_err(internal)?)),
            Op::Traffic => Ok(Outcome::value(serde_json::to_value(self.accountant.snapshot()).map_err(internal)?)),
            _ => unreachable!("client_op called with {op}"),
        }
    }
}

impl Handler for Node {
    fn handle(&self, req: &Request, binary: Vec<u8>) -> Result<Outcome, RemoteError> {
        self.dispatch(req, binary)
    }
}
