//! The C ABI driven from Rust against an in-process registry and node.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use gridbox::cohort::{Cohort, CohortSpec, Profile};
use gridbox::node::{add_user, start_node, NodeConfig, NodeHandle};
use gridbox::vo::{start_registry, Registry, RegistryHandle};
use gridbox::wire::Accountant;
use gridbox::SiteCode;
use gridbox_ffi::*;

struct Site {
    _registry: RegistryHandle,
    node: NodeHandle,
    _dir: tempfile::TempDir,
}

fn site() -> Site {
    let registry = start_registry("127.0.0.1:0", Registry::in_memory(), Some("adm".into()), Accountant::new()).unwrap();
    add_user(&registry.addr(), "adm", "ffi-user", "pw", None, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = NodeConfig::new(SiteCode::new("CAM").unwrap(), registry.addr(), dir.path());
    cfg.secret = Some("ffi".into());
    let node = start_node(cfg, Accountant::new()).unwrap();
    Site {
        _registry: registry,
        node,
        _dir: dir,
    }
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    gb_string_free(s);
    out
}

unsafe fn last_error() -> String {
    CStr::from_ptr(gb_last_error()).to_str().unwrap().to_string()
}

unsafe fn connect(addr: &str) -> *mut GbClient {
    let mut h = ptr::null_mut();
    assert_eq!(gb_client_new(c(addr).as_ptr(), &mut h), GbStatus::Ok);
    h
}

#[test]
fn session_add_query_retrieve() {
    let s = site();
    unsafe {
        let h = connect(&s.node.addr());
        let mut out = ptr::null_mut();
        assert_eq!(gb_stats(h, &mut out), GbStatus::AuthFailed);
        assert!(!last_error().is_empty());

        assert_eq!(gb_authenticate(h, c("ffi-user").as_ptr(), c("pw").as_ptr()), GbStatus::Ok);
        assert_eq!(last_error(), "");

        let cohort = Cohort::generate(&CohortSpec::profile(Profile::Cambridge, SiteCode::new("CAM").unwrap(), 9, 1));
        let (p, st, i) = cohort.images().next().unwrap();
        let bytes = cohort.mgi(p, st, i).to_bytes();
        let mut receipt = ptr::null_mut();
        assert_eq!(gb_add(h, bytes.as_ptr(), bytes.len(), &mut receipt), GbStatus::Ok);
        let receipt: serde_json::Value = serde_json::from_str(&take(receipt)).unwrap();
        let image = receipt["image"].as_str().unwrap().to_string();

        let mut xml = ptr::null_mut();
        let mut warnings = ptr::null_mut();
        let q = c("select images where image.laterality = L or image.laterality = R");
        assert_eq!(gb_query(h, q.as_ptr(), &mut xml, &mut warnings), GbStatus::Ok);
        assert!(take(xml).contains(&image));
        assert_eq!(take(warnings), "[]");

        let (mut data, mut len) = (ptr::null_mut(), 0usize);
        assert_eq!(gb_retrieve(h, c(&image).as_ptr(), &mut data, &mut len), GbStatus::Ok);
        let back = std::slice::from_raw_parts(data, len).to_vec();
        gb_bytes_free(data, len);
        assert_eq!(
            gridbox::imagestore::sha256_hex(&back),
            receipt["file"]["sha256"].as_str().unwrap()
        );

        assert_eq!(gb_stats(h, &mut out), GbStatus::Ok);
        let stats: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(stats["images"], 1);

        // A second handle reuses the first one's session.
        let mut token = ptr::null_mut();
        assert_eq!(gb_token(h, &mut token), GbStatus::Ok);
        let h2 = connect(&s.node.addr());
        assert_eq!(gb_set_token(h2, token), GbStatus::Ok);
        gb_string_free(token);
        assert_eq!(gb_stats(h2, &mut out), GbStatus::Ok);
        gb_string_free(out);

        gb_client_free(h);
        gb_client_free(h2);
    }
}

#[test]
fn algorithms_through_the_abi() {
    let s = site();
    unsafe {
        let h = connect(&s.node.addr());
        assert_eq!(gb_authenticate(h, c("ffi-user").as_ptr(), c("pw").as_ptr()), GbStatus::Ok);
        let mut rec = ptr::null_mut();
        let src = c("mean emit m\n");
        assert_eq!(gb_add_algorithm(h, c("avg").as_ptr(), src.as_ptr(), &mut rec), GbStatus::Ok);
        let rec: serde_json::Value = serde_json::from_str(&take(rec)).unwrap();
        assert_eq!(rec["version"], 1);

        let bad = c("blur emit m\n");
        assert_eq!(gb_add_algorithm(h, c("bad").as_ptr(), bad.as_ptr(), ptr::null_mut()), GbStatus::Syntax);

        let mut receipt = ptr::null_mut();
        let sel = c("select images where true");
        assert_eq!(gb_execute_algorithm(h, c("avg").as_ptr(), 0, sel.as_ptr(), &mut receipt), GbStatus::Ok);
        let receipt: serde_json::Value = serde_json::from_str(&take(receipt)).unwrap();
        assert_eq!(receipt["count"], 0);
        assert_eq!(
            gb_execute_algorithm(h, c("missing").as_ptr(), 0, sel.as_ptr(), ptr::null_mut()),
            GbStatus::NotFound
        );
        gb_client_free(h);
    }
}

#[test]
fn misuse_and_failures_map_to_status_codes() {
    let s = site();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(gb_client_new(ptr::null(), &mut h), GbStatus::InvalidArgument);
        assert!(h.is_null());
        let mut out = ptr::null_mut();
        assert_eq!(gb_stats(ptr::null_mut(), &mut out), GbStatus::InvalidArgument);

        let h = connect(&s.node.addr());
        assert_eq!(gb_authenticate(h, c("ffi-user").as_ptr(), c("wrong").as_ptr()), GbStatus::AuthFailed);
        assert_eq!(gb_authenticate(h, c("ffi-user").as_ptr(), ptr::null()), GbStatus::InvalidArgument);
        assert_eq!(gb_authenticate(h, c("ffi-user").as_ptr(), c("pw").as_ptr()), GbStatus::Ok);

        let mut xml = ptr::null_mut();
        let q = c("select images where");
        assert_eq!(gb_query(h, q.as_ptr(), &mut xml, ptr::null_mut()), GbStatus::Syntax);
        assert!(last_error().contains("expected"), "{}", last_error());
        assert_eq!(gb_query(h, c("select images where true").as_ptr(), ptr::null_mut(), ptr::null_mut()), GbStatus::InvalidArgument);

        let (mut data, mut len) = (ptr::null_mut(), 0usize);
        let id = c("CAM:file:000000000000000000000000000000aa");
        assert_eq!(gb_retrieve(h, id.as_ptr(), &mut data, &mut len), GbStatus::NotFound);
        assert_eq!(gb_add(h, b"junk".as_ptr(), 4, ptr::null_mut()), GbStatus::Rejected);
        gb_client_free(h);

        let dead = connect("127.0.0.1:1");
        assert_eq!(gb_set_token(dead, c("t").as_ptr()), GbStatus::Ok);
        assert_eq!(gb_stats(dead, &mut out), GbStatus::Connection);
        gb_client_free(dead);

        let v = CStr::from_ptr(gb_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
