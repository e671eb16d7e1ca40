//! XML result sets and the merge step that combines per-site answers.
//!
//! The serialized form is fixed byte for byte:
//!
//! ```text
//! <resultset query="select images where patient.sex = F" origin="CAM,UDI">
//!   <row id="CAM:image:…">
//!     <field name="patient.id">CAM:patient:…</field>
//!   </row>
//!   <summary images="1" patients="1"/>
//! </resultset>
//! ```
//!
//! Rows are ordered by id and fields by name, so equal result sets always
//! serialize to equal bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use thiserror::Error;

use crate::ids::{GlobalId, SiteCode};
use crate::queryir::{parse_query, Target};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResultError {
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("result set schema violation: {0}")]
    SchemaViolation(String),
    #[error("cannot merge results of different queries: {0:?} vs {1:?}")]
    QueryMismatch(String, String),
    #[error("nothing to merge")]
    NothingToMerge,
}

pub type Row = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub images: u64,
    pub patients: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultSet {
    pub query_text: String,
    pub origin_sites: BTreeSet<SiteCode>,
    rows: BTreeMap<GlobalId, Row>,
    summary: Summary,
}

fn target_of(query_text: &str) -> Result<Target, ResultError> {
    parse_query(query_text)
        .map(|q| q.target)
        .map_err(|e| ResultError::SchemaViolation(format!("query attribute does not parse: {e}")))
}

fn summarize(target: Target, rows: &BTreeMap<GlobalId, Row>) -> Result<Summary, ResultError> {
    let field = |id: &GlobalId, row: &Row, name: &str| -> Result<String, ResultError> {
        row.get(name)
            .cloned()
            .ok_or_else(|| ResultError::SchemaViolation(format!("row {id} lacks {name}")))
    };
    let count = |id: &GlobalId, row: &Row| -> Result<u64, ResultError> {
        field(id, row, "images")?
            .parse()
            .map_err(|_| ResultError::SchemaViolation(format!("row {id} has a non-integer image count")))
    };
    let mut patients = BTreeSet::new();
    let mut images = 0;
    for (id, row) in rows {
        if id.kind() != target.row_kind() {
            return Err(ResultError::SchemaViolation(format!(
                "row {id} is not a {} row",
                target.row_kind()
            )));
        }
        match target {
            Target::Images => {
                images += 1;
                patients.insert(field(id, row, "patient.id")?);
            }
            Target::Studies => {
                images += count(id, row)?;
                patients.insert(field(id, row, "patient.id")?);
            }
            Target::Patients => {
                images += count(id, row)?;
                patients.insert(id.to_string());
            }
        }
    }
    Ok(Summary {
        images,
        patients: patients.len() as u64,
    })
}

impl ResultSet {
    /// Build a result set, rejecting duplicate row ids.
    pub fn new(
        query_text: impl Into<String>,
        origin_sites: BTreeSet<SiteCode>,
        rows: impl IntoIterator<Item = (GlobalId, Row)>,
    ) -> Result<Self, ResultError> {
        let query_text = query_text.into();
        let mut map = BTreeMap::new();
        for (id, row) in rows {
            if map.contains_key(&id) {
                return Err(ResultError::SchemaViolation(format!("duplicate row id {id}")));
            }
            map.insert(id, row);
        }
        let summary = summarize(target_of(&query_text)?, &map)?;
        Ok(ResultSet {
            query_text,
            origin_sites,
            rows: map,
            summary,
        })
    }

    pub fn empty(query_text: impl Into<String>, origin: SiteCode) -> Result<Self, ResultError> {
        ResultSet::new(query_text, BTreeSet::from([origin]), [])
    }

    pub fn rows(&self) -> &BTreeMap<GlobalId, Row> {
        &self.rows
    }

    pub fn ids(&self) -> BTreeSet<GlobalId> {
        self.rows.keys().cloned().collect()
    }

    pub fn summary(&self) -> Summary {
        self.summary
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_xml(&self) -> Vec<u8> {
        let mut out = String::with_capacity(128 + self.rows.len() * 512);
        let origin = self
            .origin_sites
            .iter()
            .map(SiteCode::as_str)
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(
            out,
            "<resultset query=\"{}\" origin=\"{}\">",
            escape_attr(&self.query_text),
            escape_attr(&origin)
        );
        for (id, row) in &self.rows {
            let _ = writeln!(out, "  <row id=\"{}\">", escape_attr(&id.to_string()));
            for (name, value) in row {
                let _ = writeln!(
                    out,
                    "    <field name=\"{}\">{}</field>",
                    escape_attr(name),
                    escape_text(value)
                );
            }
            out.push_str("  </row>\n");
        }
        let _ = writeln!(
            out,
            "  <summary images=\"{}\" patients=\"{}\"/>",
            self.summary.images, self.summary.patients
        );
        out.push_str("</resultset>\n");
        out.into_bytes()
    }

    pub fn from_xml(bytes: &[u8]) -> Result<Self, ResultError> {
        let text = std::str::from_utf8(bytes).map_err(|e| ResultError::MalformedXml(e.to_string()))?;
        XmlReader::new(text).read()
    }

    /// Deduplicated union of per-site answers to the same query. Two sites
    /// reporting different fields for one id is a federation bug and is
    /// reported, not papered over.
    pub fn merge<'a>(parts: impl IntoIterator<Item = &'a ResultSet>) -> Result<ResultSet, ResultError> {
        let mut parts = parts.into_iter();
        let first = parts.next().ok_or(ResultError::NothingToMerge)?;
        let mut merged = first.clone();
        for part in parts {
            if part.query_text != merged.query_text {
                return Err(ResultError::QueryMismatch(merged.query_text.clone(), part.query_text.clone()));
            }
            merged.origin_sites.extend(part.origin_sites.iter().cloned());
            for (id, row) in &part.rows {
                match merged.rows.get(id) {
                    Some(existing) if existing != row => {
                        return Err(ResultError::SchemaViolation(format!(
                            "row {id} reported with conflicting fields"
                        )))
                    }
                    Some(_) => {}
                    None => {
                        merged.rows.insert(id.clone(), row.clone());
                    }
                }
            }
        }
        merged.summary = summarize(target_of(&merged.query_text)?, &merged.rows)?;
        debug_assert_eq!(merged.summary, summarize(target_of(&merged.query_text)?, &merged.rows)?);
        Ok(merged)
    }
}

fn escape_into(out: &mut String, s: &str, attr: bool) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' if attr => out.push_str("&quot;"),
            '\n' if attr => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            '\t' if attr => out.push_str("&#9;"),
            c => out.push(c),
        }
    }
}

fn escape_attr(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    escape_into(&mut out, s, true);
    out
}

fn escape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    escape_into(&mut out, s, false);
    out
}

struct XmlReader<'a> {
    reader: Reader<&'a [u8]>,
}

fn malformed(e: impl std::fmt::Display) -> ResultError {
    ResultError::MalformedXml(e.to_string())
}

fn schema(msg: impl Into<String>) -> ResultError {
    ResultError::SchemaViolation(msg.into())
}

impl<'a> XmlReader<'a> {
    fn new(text: &'a str) -> Self {
        XmlReader {
            reader: Reader::from_str(text),
        }
    }

    fn attrs(e: &BytesStart<'_>, expected: &[&str]) -> Result<Vec<String>, ResultError> {
        let mut found: BTreeMap<String, String> = BTreeMap::new();
        for a in e.attributes() {
            let a = a.map_err(malformed)?;
            let key = String::from_utf8_lossy(a.key.as_ref()).into_owned();
            let value = a.unescape_value().map_err(malformed)?.into_owned();
            if !expected.contains(&key.as_str()) {
                return Err(schema(format!("unexpected attribute {key:?}")));
            }
            found.insert(key, value);
        }
        expected
            .iter()
            .map(|k| found.remove(*k).ok_or_else(|| schema(format!("missing attribute {k:?}"))))
            .collect()
    }

    /// Next event that is not insignificant whitespace or a declaration.
    fn next(&mut self) -> Result<Event<'a>, ResultError> {
        loop {
            match self.reader.read_event().map_err(malformed)? {
                Event::Text(t) if t.iter().all(u8::is_ascii_whitespace) => continue,
                Event::Decl(_) | Event::Comment(_) => continue,
                ev => return Ok(ev),
            }
        }
    }

    fn read(mut self) -> Result<ResultSet, ResultError> {
        let root = match self.next()? {
            Event::Start(e) if e.name().as_ref() == b"resultset" => e,
            Event::Eof => return Err(malformed("empty document")),
            other => return Err(schema(format!("expected <resultset>, found {other:?}"))),
        };
        let [query_text, origin]: [String; 2] = Self::attrs(&root, &["query", "origin"])?
            .try_into()
            .expect("two attributes");
        let origin_sites = origin
            .split(',')
            .filter(|s| !s.is_empty())
            .map(SiteCode::new)
            .collect::<Result<BTreeSet<_>, _>>()
            .map_err(|e| schema(e.to_string()))?;
        let mut rows: Vec<(GlobalId, Row)> = Vec::new();
        let mut seen = BTreeSet::new();
        let summary = loop {
            match self.next()? {
                Event::Start(e) if e.name().as_ref() == b"row" => {
                    let [id]: [String; 1] = Self::attrs(&e, &["id"])?.try_into().expect("one attribute");
                    let id: GlobalId = id.parse().map_err(|e| schema(format!("bad row id: {e}")))?;
                    if !seen.insert(id.clone()) {
                        return Err(schema(format!("duplicate row id {id}")));
                    }
                    let row = self.read_row()?;
                    rows.push((id, row));
                }
                Event::Empty(e) if e.name().as_ref() == b"summary" => {
                    let [images, patients]: [String; 2] =
                        Self::attrs(&e, &["images", "patients"])?.try_into().expect("two attributes");
                    let parse = |s: &str| s.parse::<u64>().map_err(|_| schema(format!("bad summary count {s:?}")));
                    break Summary {
                        images: parse(&images)?,
                        patients: parse(&patients)?,
                    };
                }
                Event::Eof => return Err(malformed("unexpected end of document")),
                other => return Err(schema(format!("unexpected {other:?} in <resultset>"))),
            }
        };
        match self.next()? {
            Event::End(e) if e.name().as_ref() == b"resultset" => {}
            Event::Eof => return Err(malformed("unexpected end of document")),
            other => return Err(schema(format!("expected </resultset>, found {other:?}"))),
        }
        match self.next()? {
            Event::Eof => {}
            other => return Err(schema(format!("trailing content {other:?}"))),
        }
        let rs = ResultSet::new(query_text, origin_sites, rows)?;
        if rs.summary != summary {
            return Err(schema(format!(
                "summary says images={} patients={}, rows give images={} patients={}",
                summary.images, summary.patients, rs.summary.images, rs.summary.patients
            )));
        }
        Ok(rs)
    }

    fn read_row(&mut self) -> Result<Row, ResultError> {
        let mut row = Row::new();
        loop {
            match self.next()? {
                Event::Start(e) if e.name().as_ref() == b"field" => {
                    let [name]: [String; 1] = Self::attrs(&e, &["name"])?.try_into().expect("one attribute");
                    let mut value = String::new();
                    loop {
                        match self.reader.read_event().map_err(malformed)? {
                            Event::Text(t) => value.push_str(&t.unescape().map_err(malformed)?),
                            Event::End(e) if e.name().as_ref() == b"field" => break,
                            Event::Eof => return Err(malformed("unexpected end of document")),
                            other => return Err(schema(format!("unexpected {other:?} in <field>"))),
                        }
                    }
                    if row.insert(name.clone(), value).is_some() {
                        return Err(schema(format!("duplicate field {name:?}")));
                    }
                }
                Event::Empty(e) if e.name().as_ref() == b"field" => {
                    let [name]: [String; 1] = Self::attrs(&e, &["name"])?.try_into().expect("one attribute");
                    if row.insert(name.clone(), String::new()).is_some() {
                        return Err(schema(format!("duplicate field {name:?}")));
                    }
                }
                Event::End(e) if e.name().as_ref() == b"row" => return Ok(row),
                Event::Eof => return Err(malformed("unexpected end of document")),
                other => return Err(schema(format!("unexpected {other:?} in <row>"))),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::IdKind;
    use proptest::prelude::*;

    const Q: &str = "select images where patient.sex = F";

    fn site(s: &str) -> SiteCode {
        SiteCode::new(s).unwrap()
    }

    fn image_row(site_code: &str, n: u128, patient: u128) -> (GlobalId, Row) {
        let s = site(site_code);
        let pid = GlobalId::new(s.clone(), IdKind::Patient, patient);
        (
            GlobalId::new(s, IdKind::Image, n),
            Row::from([
                ("patient.id".to_string(), pid.to_string()),
                ("image.laterality".to_string(), "L".to_string()),
            ]),
        )
    }

    fn set(site_code: &str, rows: Vec<(GlobalId, Row)>) -> ResultSet {
        ResultSet::new(Q, BTreeSet::from([site(site_code)]), rows).unwrap()
    }

    #[test]
    fn empty_result_xml() {
        let r = ResultSet::empty(Q, site("CAM")).unwrap();
        assert_eq!(
            String::from_utf8(r.to_xml()).unwrap(),
            "<resultset query=\"select images where patient.sex = F\" origin=\"CAM\">\n  <summary images=\"0\" patients=\"0\"/>\n</resultset>\n"
        );
    }

    #[test]
    fn exact_layout() {
        let r = set("CAM", vec![image_row("CAM", 2, 9), image_row("CAM", 1, 9)]);
        assert_eq!(r.summary(), Summary { images: 2, patients: 1 });
        let pid = "CAM:patient:00000000000000000000000000000009";
        let expected = format!(
            "<resultset query=\"select images where patient.sex = F\" origin=\"CAM\">\n\
             \x20 <row id=\"CAM:image:00000000000000000000000000000001\">\n\
             \x20   <field name=\"image.laterality\">L</field>\n\
             \x20   <field name=\"patient.id\">{pid}</field>\n\
             \x20 </row>\n\
             \x20 <row id=\"CAM:image:00000000000000000000000000000002\">\n\
             \x20   <field name=\"image.laterality\">L</field>\n\
             \x20   <field name=\"patient.id\">{pid}</field>\n\
             \x20 </row>\n\
             \x20 <summary images=\"2\" patients=\"1\"/>\n\
             </resultset>\n"
        );
        assert_eq!(String::from_utf8(r.to_xml()).unwrap(), expected);
    }

    #[test]
    fn escaping_round_trips() {
        let text = "select images where derived.x > 0 and patient.sex = F";
        let mut row = image_row("CAM", 1, 1);
        row.1.insert("note".into(), "a<b & \"c\" > d\n e".into());
        let r = ResultSet::new(text, BTreeSet::from([site("CAM")]), vec![row]).unwrap();
        assert_eq!(ResultSet::from_xml(&r.to_xml()).unwrap(), r);
    }

    #[test]
    fn hundred_rows_round_trip() {
        let rows = (0..100).map(|i| image_row("UDI", i, i / 7)).collect();
        let r = set("UDI", rows);
        assert_eq!(ResultSet::from_xml(&r.to_xml()).unwrap(), r);
    }

    #[test]
    fn rejects_duplicate_ids_bad_summary_and_truncation() {
        let r = set("CAM", vec![image_row("CAM", 1, 1), image_row("CAM", 2, 1)]);
        let xml = String::from_utf8(r.to_xml()).unwrap();
        let dup = xml.replace(
            "CAM:image:00000000000000000000000000000002",
            "CAM:image:00000000000000000000000000000001",
        );
        assert!(matches!(ResultSet::from_xml(dup.as_bytes()), Err(ResultError::SchemaViolation(_))));
        let lying = xml.replace("images=\"2\"", "images=\"3\"");
        assert!(matches!(ResultSet::from_xml(lying.as_bytes()), Err(ResultError::SchemaViolation(_))));
        let cut = &xml.as_bytes()[..xml.len() / 2];
        assert!(matches!(ResultSet::from_xml(cut), Err(ResultError::MalformedXml(_))));
        assert!(matches!(ResultSet::from_xml(b""), Err(ResultError::MalformedXml(_))));
        assert!(matches!(ResultSet::from_xml(&[0xff, 0xfe]), Err(ResultError::MalformedXml(_))));
    }

    #[test]
    fn patient_and_study_summaries() {
        let s = site("CAM");
        let prow = |n: u128, images: u64| {
            (
                GlobalId::new(s.clone(), IdKind::Patient, n),
                Row::from([("images".to_string(), images.to_string())]),
            )
        };
        let r = ResultSet::new(
            "select patients where true",
            BTreeSet::from([s.clone()]),
            vec![prow(1, 8), prow(2, 16)],
        )
        .unwrap();
        assert_eq!(r.summary(), Summary { images: 24, patients: 2 });
        assert_eq!(ResultSet::from_xml(&r.to_xml()).unwrap(), r);
        let wrong_kind = ResultSet::new("select studies where true", BTreeSet::from([s.clone()]), vec![prow(1, 8)]);
        assert!(matches!(wrong_kind, Err(ResultError::SchemaViolation(_))));
    }

    #[test]
    fn merge_identity_idempotence_and_disjoint_union() {
        let cam = set("CAM", (0..8).map(|i| image_row("CAM", i, 1)).collect());
        let udi = set("UDI", (0..16).map(|i| image_row("UDI", i, 2)).collect());
        let empty = ResultSet::new(Q, BTreeSet::new(), []).unwrap();
        assert_eq!(ResultSet::merge([&cam, &empty]).unwrap(), cam);
        assert_eq!(ResultSet::merge([&cam, &cam]).unwrap(), cam);
        let both = ResultSet::merge([&cam, &udi]).unwrap();
        assert_eq!(both.len(), 24);
        assert_eq!(both.summary(), Summary { images: 24, patients: 2 });
        assert_eq!(both.origin_sites, BTreeSet::from([site("CAM"), site("UDI")]));
    }

    #[test]
    fn merge_errors() {
        let a = set("CAM", vec![image_row("CAM", 1, 1)]);
        let b = ResultSet::new("select images where true", BTreeSet::from([site("CAM")]), []).unwrap();
        assert!(matches!(ResultSet::merge([&a, &b]), Err(ResultError::QueryMismatch(..))));
        let mut conflicting = image_row("CAM", 1, 1);
        conflicting.1.insert("image.laterality".into(), "R".into());
        let c = set("UDI", vec![conflicting]);
        assert!(matches!(ResultSet::merge([&a, &c]), Err(ResultError::SchemaViolation(_))));
        assert_eq!(ResultSet::merge(std::iter::empty()), Err(ResultError::NothingToMerge));
    }

    fn arb_parts() -> impl Strategy<Value = Vec<ResultSet>> {
        // A site reports an image the same way every time, so the patient is a
        // function of the image.
        let part = (0usize..3, prop::collection::btree_set(0u128..40, 0..25)).prop_map(|(s, rows)| {
            let code = ["CAM", "UDI", "OXF"][s];
            let rows = rows.into_iter().map(|n| image_row(code, n, n % 6)).collect();
            set(code, rows)
        });
        prop::collection::vec(part, 1..6)
    }

    proptest! {
        #[test]
        fn merge_is_order_and_grouping_insensitive(parts in arb_parts(), seed: u64) {
            let flat = ResultSet::merge(&parts).unwrap();
            let mut shuffled = parts.clone();
            let mut s = seed | 1;
            for i in (1..shuffled.len()).rev() {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                shuffled.swap(i, (s % (i as u64 + 1)) as usize);
            }
            let mid = shuffled.len() / 2;
            let left = ResultSet::merge(&shuffled[..mid.max(1)]).unwrap();
            let nested = if mid >= 1 && mid < shuffled.len() {
                let right = ResultSet::merge(&shuffled[mid..]).unwrap();
                ResultSet::merge([&left, &right]).unwrap()
            } else {
                left
            };
            prop_assert_eq!(nested.to_xml(), flat.to_xml());
            let summary = flat.summary();
            let patients: BTreeSet<&String> = flat.rows().values().map(|r| &r["patient.id"]).collect();
            prop_assert_eq!(summary.images as usize, flat.len());
            prop_assert_eq!(summary.patients as usize, patients.len());
            prop_assert_eq!(ResultSet::from_xml(&flat.to_xml()).unwrap(), flat);
        }
    }
}
