//! C ABI over the workstation client.
//!
//! Every call returns a [`GbStatus`]. On failure the message is available
//! from [`gb_last_error`] on the same thread until the next call. Strings
//! and byte buffers handed out by the library are released with
//! [`gb_string_free`] and [`gb_bytes_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gridbox::node::{ClientError, NodeClient};
use gridbox::wire::ErrorCode;

/// Result of every `gb_*` call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GbStatus {
    Ok = 0,
    /// A null pointer, non-UTF-8 string or similar misuse.
    InvalidArgument = 1,
    /// The node could not be reached.
    Connection = 2,
    AuthFailed = 3,
    /// Query or algorithm text did not parse.
    Syntax = 4,
    NotFound = 5,
    /// The node rejected the request for another reason.
    Rejected = 6,
    /// A bug in this library.
    Internal = 7,
}

/// Opaque client handle.
pub struct GbClient {
    inner: NodeClient,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Fail(GbStatus, String);

impl From<ClientError> for Fail {
    fn from(e: ClientError) -> Self {
        let status = if e.is_connection() {
            GbStatus::Connection
        } else {
            match e.code() {
                Some(ErrorCode::AuthFailed) => GbStatus::AuthFailed,
                Some(ErrorCode::RegistryUnreachable | ErrorCode::PeerUnreachable) => GbStatus::Connection,
                Some(ErrorCode::QuerySyntax | ErrorCode::UnknownAttribute | ErrorCode::SyntaxError) => GbStatus::Syntax,
                Some(ErrorCode::NotFound | ErrorCode::UnknownAlgorithm) => GbStatus::NotFound,
                _ => GbStatus::Rejected,
            }
        };
        Fail(status, e.to_string())
    }
}

fn invalid(what: &str) -> Fail {
    Fail(GbStatus::InvalidArgument, what.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GbStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GbStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn client<'a>(c: *mut GbClient) -> Result<&'a mut GbClient, Fail> {
    c.as_mut().ok_or_else(|| invalid("client is null"))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    let c = CString::new(s).map_err(|_| Fail(GbStatus::Internal, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn json(v: &impl serde::Serialize) -> Result<String, Fail> {
    serde_json::to_string(v).map_err(|e| Fail(GbStatus::Internal, e.to_string()))
}

/// Message of the last failed call on this thread, or "" after a success.
/// Owned by the library.
#[no_mangle]
pub extern "C" fn gb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static.
#[no_mangle]
pub extern "C" fn gb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Create a client for the node at `addr` (`host:port`). No connection is
/// made yet.
///
/// # Safety
/// `addr` must be null or a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gb_client_new(addr: *const c_char, out: *mut *mut GbClient) -> GbStatus {
    guard(|| {
        let addr = text(addr, "addr")?;
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        *out = Box::into_raw(Box::new(GbClient {
            inner: NodeClient::new(addr),
        }));
        Ok(())
    })
}

/// # Safety
/// `c` must be null or a handle from [`gb_client_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gb_client_free(c: *mut GbClient) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Log in; the session token is kept in the handle.
///
/// # Safety
/// `c` must be a live handle; `user` and `credential` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn gb_authenticate(c: *mut GbClient, user: *const c_char, credential: *const c_char) -> GbStatus {
    guard(|| {
        let c = client(c)?;
        c.inner.authenticate(text(user, "user")?, text(credential, "credential")?)?;
        Ok(())
    })
}

/// Use an existing session token instead of logging in.
///
/// # Safety
/// `c` must be a live handle; `token` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gb_set_token(c: *mut GbClient, token: *const c_char) -> GbStatus {
    guard(|| {
        let c = client(c)?;
        let token = text(token, "token")?.to_string();
        c.inner = c.inner.clone().with_token(token);
        Ok(())
    })
}

/// Copy of the current session token, or null when not logged in. Free
/// with [`gb_string_free`].
///
/// # Safety
/// `c` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gb_token(c: *mut GbClient, out: *mut *mut c_char) -> GbStatus {
    guard(|| {
        let c = client(c)?;
        match c.inner.token() {
            Some(t) => put_string(out, t.to_string()),
            None if out.is_null() => Err(invalid("output pointer is null")),
            None => {
                *out = ptr::null_mut();
                Ok(())
            }
        }
    })
}

/// Run a federated query. `xml_out` receives the merged result set,
/// `warnings_out` (optional) a JSON array of per-site warnings.
///
/// # Safety
/// `c` must be a live handle; `query` a NUL-terminated string; `xml_out`
/// writable; `warnings_out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gb_query(
    c: *mut GbClient,
    query: *const c_char,
    xml_out: *mut *mut c_char,
    warnings_out: *mut *mut c_char,
) -> GbStatus {
    guard(|| {
        let c = client(c)?;
        if xml_out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let (xml, warnings) = c.inner.query_xml(text(query, "query")?)?;
        if !warnings_out.is_null() {
            put_string(warnings_out, json(&warnings)?)?;
        }
        put_string(xml_out, xml)
    })
}

/// Upload one image file. `receipt_out` (optional) receives the receipt as
/// JSON: file reference, image and patient ids, bytes written.
///
/// # Safety
/// `c` must be a live handle; `data` must point to `len` readable bytes;
/// `receipt_out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gb_add(c: *mut GbClient, data: *const u8, len: usize, receipt_out: *mut *mut c_char) -> GbStatus {
    guard(|| {
        let c = client(c)?;
        if data.is_null() && len > 0 {
            return Err(invalid("data is null"));
        }
        let bytes = if len == 0 { &[][..] } else { std::slice::from_raw_parts(data, len) };
        let receipt = c.inner.add_file(bytes)?;
        if !receipt_out.is_null() {
            put_string(receipt_out, json(&receipt)?)?;
        }
        Ok(())
    })
}

/// Fetch file bytes by file id, image id, derived id or sha256. Free the
/// buffer with [`gb_bytes_free`].
///
/// # Safety
/// `c` must be a live handle; `id` a NUL-terminated string; `data_out` and
/// `len_out` writable.
#[no_mangle]
pub unsafe extern "C" fn gb_retrieve(
    c: *mut GbClient,
    id: *const c_char,
    data_out: *mut *mut u8,
    len_out: *mut usize,
) -> GbStatus {
    guard(|| {
        let c = client(c)?;
        if data_out.is_null() || len_out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let bytes = c.inner.retrieve(text(id, "id")?)?.into_boxed_slice();
        *len_out = bytes.len();
        *data_out = Box::into_raw(bytes).cast();
        Ok(())
    })
}

/// Upload an algorithm program; `record_out` (optional) receives the stored
/// record as JSON.
///
/// # Safety
/// `c` must be a live handle; `name`, `source` NUL-terminated strings;
/// `record_out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gb_add_algorithm(
    c: *mut GbClient,
    name: *const c_char,
    source: *const c_char,
    record_out: *mut *mut c_char,
) -> GbStatus {
    guard(|| {
        let c = client(c)?;
        let (rec, _) = c.inner.add_algorithm(text(name, "name")?, text(source, "source")?)?;
        if !record_out.is_null() {
            put_string(record_out, json(&rec)?)?;
        }
        Ok(())
    })
}

/// Run an algorithm over the images `selector` selects, across the VO.
/// `version` 0 means the latest. `receipt_out` (optional) receives the
/// per-site counts as JSON.
///
/// # Safety
/// `c` must be a live handle; `name`, `selector` NUL-terminated strings;
/// `receipt_out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gb_execute_algorithm(
    c: *mut GbClient,
    name: *const c_char,
    version: u32,
    selector: *const c_char,
    receipt_out: *mut *mut c_char,
) -> GbStatus {
    guard(|| {
        let c = client(c)?;
        let version = (version != 0).then_some(version);
        let (receipt, _) = c
            .inner
            .execute_algorithm(text(name, "name")?, version, text(selector, "selector")?)?;
        if !receipt_out.is_null() {
            put_string(receipt_out, json(&receipt)?)?;
        }
        Ok(())
    })
}

/// Catalog statistics of the node as JSON.
///
/// # Safety
/// `c` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gb_stats(c: *mut GbClient, out: *mut *mut c_char) -> GbStatus {
    guard(|| {
        let c = client(c)?;
        let s = c.inner.stats()?;
        put_string(out, json(&s)?)
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn gb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `data`/`len` must be null/0 or exactly a pair returned by
/// [`gb_retrieve`], freed once.
#[no_mangle]
pub unsafe extern "C" fn gb_bytes_free(data: *mut u8, len: usize) {
    if !data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(data, len)));
    }
}
