//! Framed request/response protocol shared by nodes, the registry and clients.
//!
//! A frame is a 4-byte big-endian length followed by that many bytes of UTF-8
//! JSON. When the envelope's `binary_len` is non-zero, exactly that many raw
//! bytes follow the frame. Every connection carries a sequence of
//! request/response pairs; a server answers each request before reading the
//! next.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::SiteCode;

pub const MAX_ENVELOPE: usize = 16 << 20;
pub const MAX_BINARY: u64 = 512 << 20;

macro_rules! ops {
    ($($var:ident => $text:literal),+ $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Op { $($var),+ }

        impl Op {
            pub const ALL: &'static [Op] = &[$(Op::$var),+];

            pub fn as_str(self) -> &'static str {
                match self { $(Op::$var => $text),+ }
            }

            pub fn from_name(s: &str) -> Option<Op> {
                match s { $($text => Some(Op::$var),)+ _ => None }
            }
        }
    };
}

ops! {
    Auth => "AUTH",
    Add => "ADD",
    Retrieve => "RETRIEVE",
    Query => "QUERY",
    AddAlg => "ADD_ALG",
    ExecAlg => "EXEC_ALG",
    RQuery => "RQUERY",
    PeerFetch => "PEER_FETCH",
    Stats => "STATS",
    Traffic => "TRAFFIC",
    NodeReg => "NODE_REG",
    NodeList => "NODE_LIST",
    UserVerify => "USER_VERIFY",
    UserAdd => "USER_ADD",
    TokenCheck => "TOKEN_CHECK",
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

macro_rules! error_codes {
    ($($var:ident),+ $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum ErrorCode { $($var),+ }

        impl ErrorCode {
            pub fn as_str(self) -> &'static str {
                match self { $(ErrorCode::$var => stringify!($var)),+ }
            }
        }
    };
}

error_codes! {
    AuthFailed,
    RegistryUnreachable,
    MalformedFile,
    StorageError,
    NotFound,
    PeerUnreachable,
    QuerySyntax,
    UnknownAttribute,
    UnknownAlgorithm,
    SyntaxError,
    HopViolation,
    UnknownPeer,
    DuplicateSiteDifferentIdentity,
    VersionConflict,
    SchemaViolation,
    BadRequest,
    UnknownOp,
    Internal,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An error as carried in a response envelope.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{code}: {message}")]
pub struct RemoteError {
    pub code: ErrorCode,
    pub message: String,
}

impl RemoteError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        RemoteError {
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        RemoteError::new(ErrorCode::BadRequest, message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default)]
    pub params: Value,
    #[serde(default)]
    pub binary_len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_code: Option<ErrorCode>,
    #[serde(default)]
    pub result: Value,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub binary_len: u64,
}

pub trait Envelope: Serialize + for<'de> Deserialize<'de> {
    fn binary_len(&self) -> u64;
}

impl Envelope for Request {
    fn binary_len(&self) -> u64 {
        self.binary_len
    }
}

impl Envelope for Response {
    fn binary_len(&self) -> u64 {
        self.binary_len
    }
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Writes one frame plus its binary section. Returns the envelope bytes so
/// callers can account for them.
pub fn write_frame<E: Envelope>(w: &mut impl Write, envelope: &E, binary: &[u8]) -> io::Result<Vec<u8>> {
    let json = encode_envelope(envelope, binary)?;
    write_encoded(w, &json, binary)?;
    Ok(json)
}

fn encode_envelope<E: Envelope>(envelope: &E, binary: &[u8]) -> io::Result<Vec<u8>> {
    debug_assert_eq!(envelope.binary_len(), binary.len() as u64);
    let json = serde_json::to_vec(envelope).map_err(|e| invalid(e.to_string()))?;
    if json.len() > MAX_ENVELOPE {
        return Err(invalid("envelope too large"));
    }
    Ok(json)
}

fn write_encoded(w: &mut impl Write, json: &[u8], binary: &[u8]) -> io::Result<()> {
    w.write_all(&(json.len() as u32).to_be_bytes())?;
    w.write_all(json)?;
    w.write_all(binary)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` means the peer closed the connection cleanly
/// between frames.
pub fn read_frame<E: Envelope>(r: &mut impl Read) -> io::Result<Option<(E, Vec<u8>, Vec<u8>)>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_ENVELOPE {
        return Err(invalid(format!("envelope of {len} bytes exceeds limit")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let envelope: E = serde_json::from_slice(&json).map_err(|e| invalid(format!("bad envelope: {e}")))?;
    let n = envelope.binary_len();
    if n > MAX_BINARY {
        return Err(invalid(format!("binary section of {n} bytes exceeds limit")));
    }
    let mut binary = Vec::new();
    r.take(n).read_to_end(&mut binary)?;
    if binary.len() as u64 != n {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated binary section"));
    }
    Ok(Some((envelope, json, binary)))
}

// ---- traffic accounting ----

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpTraffic {
    pub frames: u64,
    pub envelope_bytes: u64,
    pub binary_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Request,
    Response,
}

/// One frame as seen by a server, for streaming capture.
pub struct FrameRecord<'a> {
    pub op: &'a str,
    pub direction: Direction,
    pub envelope: &'a [u8],
    pub binary: &'a [u8],
}

pub type Tap = Arc<dyn Fn(&FrameRecord<'_>) + Send + Sync>;

/// Per-op byte counts for every frame a server receives or sends. Responses
/// are attributed to the op of the request they answer. Since every
/// connection terminates at some server, summing the accountants of all
/// servers counts each frame on the wire exactly once.
#[derive(Default)]
pub struct Accountant {
    counts: Mutex<BTreeMap<String, OpTraffic>>,
    tap: Mutex<Option<Tap>>,
}

impl Accountant {
    pub fn new() -> Arc<Self> {
        Arc::new(Accountant::default())
    }

    pub fn set_tap(&self, tap: Option<Tap>) {
        *self.tap.lock().unwrap() = tap;
    }

    pub fn record(&self, op: &str, direction: Direction, envelope: &[u8], binary: &[u8]) {
        {
            let mut counts = self.counts.lock().unwrap();
            let c = counts.entry(op.to_string()).or_default();
            c.frames += 1;
            c.envelope_bytes += envelope.len() as u64 + 4;
            c.binary_bytes += binary.len() as u64;
        }
        let tap = self.tap.lock().unwrap().clone();
        if let Some(tap) = tap {
            tap(&FrameRecord {
                op,
                direction,
                envelope,
                binary,
            });
        }
    }

    pub fn snapshot(&self) -> BTreeMap<String, OpTraffic> {
        self.counts.lock().unwrap().clone()
    }

    pub fn reset(&self) {
        self.counts.lock().unwrap().clear();
    }
}

pub fn sum_traffic<'a>(
    parts: impl IntoIterator<Item = &'a BTreeMap<String, OpTraffic>>,
) -> BTreeMap<String, OpTraffic> {
    let mut out: BTreeMap<String, OpTraffic> = BTreeMap::new();
    for part in parts {
        for (op, t) in part {
            let e = out.entry(op.clone()).or_default();
            e.frames += t.frames;
            e.envelope_bytes += t.envelope_bytes;
            e.binary_bytes += t.binary_bytes;
        }
    }
    out
}

// ---- peer authentication ----

type HmacSha256 = Hmac<Sha256>;

pub const PEER_PREFIX: &str = "peer:";

fn peer_mac(secret: &[u8], site: &SiteCode, id: u64, op: &str, params: &Value) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(secret).expect("hmac accepts any key length");
    let params_digest = Sha256::digest(params.to_string().as_bytes());
    mac.update(format!("{}|{id}|{op}|", site.as_str()).as_bytes());
    mac.update(&params_digest);
    mac
}

/// Token a node attaches to requests it sends to peers and the registry.
pub fn peer_token(secret: &[u8], site: &SiteCode, id: u64, op: &str, params: &Value) -> String {
    let tag = peer_mac(secret, site, id, op, params).finalize().into_bytes();
    format!("{PEER_PREFIX}{}:{}", site.as_str(), hex::encode(tag))
}

/// The site a peer token claims, if it is shaped like one.
pub fn peer_claim(token: &str) -> Option<(SiteCode, &str)> {
    let rest = token.strip_prefix(PEER_PREFIX)?;
    let (site, tag) = rest.split_once(':')?;
    Some((SiteCode::new(site).ok()?, tag))
}

pub fn verify_peer_token(secret: &[u8], req: &Request) -> Option<SiteCode> {
    let (site, tag) = peer_claim(req.token.as_deref()?)?;
    let tag = hex::decode(tag).ok()?;
    peer_mac(secret, &site, req.id, &req.op, &req.params)
        .verify_slice(&tag)
        .ok()
        .map(|_| site)
}

// ---- client ----

#[derive(Debug, Error)]
pub enum CallError {
    #[error("cannot reach {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("connection to {addr} failed: {source}")]
    Io { addr: String, source: io::Error },
    #[error("{0}")]
    Remote(#[from] RemoteError),
}

impl CallError {
    pub fn remote_code(&self) -> Option<ErrorCode> {
        match self {
            CallError::Remote(e) => Some(e.code),
            _ => None,
        }
    }

    pub fn is_transport(&self) -> bool {
        !matches!(self, CallError::Remote(_))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Reply {
    pub result: Value,
    pub warnings: Vec<String>,
    pub binary: Vec<u8>,
}

static NEXT_REQUEST_ID: AtomicU64 = AtomicU64::new(1);

pub fn next_request_id() -> u64 {
    NEXT_REQUEST_ID.fetch_add(1, Ordering::Relaxed)
}

/// How a request should be authenticated.
pub enum Credential<'a> {
    None,
    Token(&'a str),
    Peer { secret: &'a [u8], site: &'a SiteCode },
}

/// A client connection. Calls are sequential; open several connections for
/// concurrency.
pub struct Connection {
    addr: String,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Connection {
    pub fn open(addr: &str, timeout: Duration) -> Result<Connection, CallError> {
        let connect_err = |source| CallError::Connect {
            addr: addr.to_string(),
            source,
        };
        let mut last = io::Error::new(io::ErrorKind::NotFound, "address did not resolve");
        let mut stream = None;
        for sa in addr.to_socket_addrs().map_err(connect_err)? {
            match TcpStream::connect_timeout(&sa, timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = e,
            }
        }
        let stream = stream.ok_or_else(|| connect_err(last))?;
        stream.set_nodelay(true).ok();
        stream.set_read_timeout(Some(timeout)).map_err(connect_err)?;
        stream.set_write_timeout(Some(timeout)).map_err(connect_err)?;
        Ok(Connection {
            addr: addr.to_string(),
            reader: BufReader::new(stream.try_clone().map_err(connect_err)?),
            writer: BufWriter::new(stream),
        })
    }

    pub fn call(&mut self, op: Op, cred: Credential<'_>, params: Value, binary: &[u8]) -> Result<Reply, CallError> {
        let id = next_request_id();
        let token = match cred {
            Credential::None => None,
            Credential::Token(t) => Some(t.to_string()),
            Credential::Peer { secret, site } => Some(peer_token(secret, site, id, op.as_str(), &params)),
        };
        let req = Request {
            id,
            op: op.as_str().to_string(),
            token,
            params,
            binary_len: binary.len() as u64,
        };
        let io_err = |source| CallError::Io {
            addr: self.addr.clone(),
            source,
        };
        write_frame(&mut self.writer, &req, binary).map_err(io_err)?;
        let (resp, _, binary) = read_frame::<Response>(&mut self.reader)
            .map_err(|source| CallError::Io {
                addr: self.addr.clone(),
                source,
            })?
            .ok_or_else(|| CallError::Io {
                addr: self.addr.clone(),
                source: io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed before reply"),
            })?;
        if resp.id != id {
            return Err(CallError::Io {
                addr: self.addr.clone(),
                source: invalid(format!("reply id {} does not match request {id}", resp.id)),
            });
        }
        match resp.status {
            Status::Ok => Ok(Reply {
                result: resp.result,
                warnings: resp.warnings,
                binary,
            }),
            Status::Error => {
                let message = resp
                    .result
                    .get("message")
                    .and_then(Value::as_str)
                    .unwrap_or("")
                    .to_string();
                Err(RemoteError::new(resp.error_code.unwrap_or(ErrorCode::Internal), message).into())
            }
        }
    }
}

/// One-shot call on a fresh connection.
pub fn call(
    addr: &str,
    timeout: Duration,
    op: Op,
    cred: Credential<'_>,
    params: Value,
    binary: &[u8],
) -> Result<Reply, CallError> {
    Connection::open(addr, timeout)?.call(op, cred, params, binary)
}

// ---- server ----

#[derive(Debug, Default)]
pub struct Outcome {
    pub result: Value,
    pub warnings: Vec<String>,
    pub binary: Vec<u8>,
}

impl Outcome {
    pub fn value(result: Value) -> Self {
        Outcome {
            result,
            ..Outcome::default()
        }
    }
}

pub trait Handler: Send + Sync + 'static {
    fn handle(&self, req: &Request, binary: Vec<u8>) -> Result<Outcome, RemoteError>;
}

struct ServerShared {
    stopping: AtomicBool,
    streams: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
}

/// A running accept loop. Dropping the handle leaves the server running;
/// call [`ServerHandle::shutdown`] to stop it.
pub struct ServerHandle {
    addr: std::net::SocketAddr,
    shared: Arc<ServerShared>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    /// Stop accepting and sever every open connection. In-flight handlers
    /// keep running but their replies go nowhere.
    pub fn shutdown(&mut self) {
        if self.shared.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(500));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for (_, s) in self.shared.streams.lock().unwrap().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

pub fn serve(listener: TcpListener, handler: Arc<dyn Handler>, accountant: Arc<Accountant>) -> io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let shared = Arc::new(ServerShared {
        stopping: AtomicBool::new(false),
        streams: Mutex::new(HashMap::new()),
        next_conn: AtomicU64::new(0),
    });
    let s = shared.clone();
    let accept = thread::Builder::new()
        .name(format!("accept-{addr}"))
        .spawn(move || {
            for stream in listener.incoming() {
                if s.stopping.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let conn = s.next_conn.fetch_add(1, Ordering::Relaxed);
                if let Ok(clone) = stream.try_clone() {
                    s.streams.lock().unwrap().insert(conn, clone);
                }
                let (s, handler, accountant) = (s.clone(), handler.clone(), accountant.clone());
                let spawned = thread::Builder::new().name(format!("conn-{conn}")).spawn(move || {
                    if let Err(e) = serve_connection(stream, &*handler, &accountant) {
                        log::debug!("connection {conn} ended: {e}");
                    }
                    s.streams.lock().unwrap().remove(&conn);
                });
                if let Err(e) = spawned {
                    log::warn!("cannot spawn connection thread: {e}");
                }
            }
        })?;
    Ok(ServerHandle {
        addr,
        shared,
        accept: Some(accept),
    })
}

fn serve_connection(stream: TcpStream, handler: &dyn Handler, accountant: &Accountant) -> io::Result<()> {
    stream.set_nodelay(true).ok();
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some((req, json, binary)) = read_frame::<Request>(&mut reader)? {
        accountant.record(&req.op, Direction::Request, &json, &binary);
        let (resp, out) = match handler.handle(&req, binary) {
            Ok(o) => (
                Response {
                    id: req.id,
                    status: Status::Ok,
                    error_code: None,
                    result: o.result,
                    warnings: o.warnings,
                    binary_len: o.binary.len() as u64,
                },
                o.binary,
            ),
            Err(e) => (
                Response {
                    id: req.id,
                    status: Status::Error,
                    error_code: Some(e.code),
                    result: serde_json::json!({ "message": e.message }),
                    warnings: Vec::new(),
                    binary_len: 0,
                },
                Vec::new(),
            ),
        };
        // Counted before sending, so a caller holding the reply sees it.
        let json = encode_envelope(&resp, &out)?;
        accountant.record(&req.op, Direction::Response, &json, &out);
        write_encoded(&mut writer, &json, &out)?;
    }
    Ok(())
}

/// Decode a params field, mapping failures to `BadRequest`.
pub fn param<T: for<'de> Deserialize<'de>>(params: &Value, name: &str) -> Result<T, RemoteError> {
    let v = params.get(name).cloned().unwrap_or(Value::Null);
    serde_json::from_value(v).map_err(|e| RemoteError::bad_request(format!("parameter {name:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::io::Cursor;

    #[test]
    fn frame_round_trip_with_binary() {
        let req = Request {
            id: 7,
            op: "ADD".into(),
            token: Some("t".into()),
            params: json!({"a": 1}),
            binary_len: 3,
        };
        let mut buf = Vec::new();
        let json = write_frame(&mut buf, &req, &[1, 2, 3]).unwrap();
        assert_eq!(&buf[..4], &(json.len() as u32).to_be_bytes());
        let (back, _, bin) = read_frame::<Request>(&mut Cursor::new(&buf)).unwrap().unwrap();
        assert_eq!(back, req);
        assert_eq!(bin, vec![1, 2, 3]);
        assert!(read_frame::<Request>(&mut Cursor::new(&buf[..buf.len() - 1])).is_err());
        assert!(read_frame::<Request>(&mut Cursor::new(Vec::new())).unwrap().is_none());
    }

    #[test]
    fn envelope_field_names() {
        let resp = Response {
            id: 1,
            status: Status::Error,
            error_code: Some(ErrorCode::AuthFailed),
            result: Value::Null,
            warnings: vec![],
            binary_len: 0,
        };
        let v: Value = serde_json::to_value(&resp).unwrap();
        assert_eq!(v["status"], "error");
        assert_eq!(v["error_code"], "AuthFailed");
    }

    #[test]
    fn peer_tokens_bind_request() {
        let site = SiteCode::new("CAM").unwrap();
        let params = json!({"query": "select images where true", "hop": 1});
        let mut req = Request {
            id: 5,
            op: "RQUERY".into(),
            token: Some(peer_token(b"k", &site, 5, "RQUERY", &params)),
            params,
            binary_len: 0,
        };
        assert_eq!(verify_peer_token(b"k", &req), Some(site));
        assert_eq!(verify_peer_token(b"other", &req), None);
        req.params["hop"] = json!(0);
        assert_eq!(verify_peer_token(b"k", &req), None);
    }

    struct Echo;
    impl Handler for Echo {
        fn handle(&self, req: &Request, binary: Vec<u8>) -> Result<Outcome, RemoteError> {
            if req.op == "BAD" {
                return Err(RemoteError::new(ErrorCode::NotFound, "nope"));
            }
            Ok(Outcome {
                result: req.params.clone(),
                warnings: vec!["w".into()],
                binary,
            })
        }
    }

    #[test]
    fn server_answers_and_accounts() {
        let acc = Accountant::new();
        let mut server = serve(TcpListener::bind("127.0.0.1:0").unwrap(), Arc::new(Echo), acc.clone()).unwrap();
        let addr = server.addr().to_string();
        let mut c = Connection::open(&addr, Duration::from_secs(5)).unwrap();
        let r = c.call(Op::Add, Credential::None, json!({"x": 1}), b"abcd").unwrap();
        assert_eq!(r.result, json!({"x": 1}));
        assert_eq!(r.binary, b"abcd");
        assert_eq!(r.warnings, vec!["w".to_string()]);
        let traffic = acc.snapshot();
        assert_eq!(traffic["ADD"].frames, 2);
        assert_eq!(traffic["ADD"].binary_bytes, 8);
        server.shutdown();
        assert!(c.call(Op::Add, Credential::None, json!({}), b"").is_err());
        assert!(Connection::open(&addr, Duration::from_millis(300))
            .and_then(|mut c| c.call(Op::Stats, Credential::None, json!({}), b""))
            .is_err());
    }

    #[test]
    fn remote_errors_carry_code() {
        let mut server = serve(TcpListener::bind("127.0.0.1:0").unwrap(), Arc::new(Echo), Accountant::new()).unwrap();
        let mut c = Connection::open(&server.addr().to_string(), Duration::from_secs(5)).unwrap();
        let req_op = Op::Stats;
        assert!(c.call(req_op, Credential::None, json!({}), b"").is_ok());
        let id = next_request_id();
        let bad = Request {
            id,
            op: "BAD".into(),
            token: None,
            params: Value::Null,
            binary_len: 0,
        };
        write_frame(&mut c.writer, &bad, b"").unwrap();
        let (resp, _, _) = read_frame::<Response>(&mut c.reader).unwrap().unwrap();
        assert_eq!(resp.error_code, Some(ErrorCode::NotFound));
        assert_eq!(resp.result["message"], "nope");
        server.shutdown();
    }
}
