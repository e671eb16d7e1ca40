//! Scripted multi-node runs: a registry and site nodes as child processes,
//! driven by a line-oriented script.
//!
//! ```text
//! # comment
//! start-vo <n> [SITE ...] [rquery-delay-ms=<ms>]
//! gen-cohort <SITE> <seed> <patients> [cambridge|udine]
//! query-at <SITE> <label> <query>
//! query-bg <SITE> <label> <query>       run in the background
//! wait <label>
//! exec-at <SITE> <label> <algorithm>[@<version>] <selector>
//! add-alg-at <SITE> <label> <name> <source, `;` separating statements>
//! kill <SITE>
//! sleep <ms>
//! assert-equal <label> <label> ...      byte-identical XML
//! assert-summary <label> images=<n> patients=<m>
//! assert-manifest <label> <truth>       truth: all-female, age-50-60-left,
//!                                       left (summed over sites) or <label>@<SITE>
//! assert-count <label> <n>|<truth>      records written by an exec step
//! assert-site-rows <label> <SITE> all|<n>
//! assert-warning <label> <SITE>
//! assert-no-warning <label>
//! assert-locality                       no binary bytes in QUERY/RQUERY/EXEC_ALG
//! assert-no-rquery
//! ```
//!
//! Queries may use `${anchor:SITE}` for the anchor patient of a generated
//! cohort. Setup failures stop the run; assertion failures are collected.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::Duration;

use rand::RngCore;

use crate::cohort::{self, Cohort, CohortSpec, Manifest, Profile};
use crate::ids::SiteCode;
use crate::node::{add_user, ClientError, NodeClient};
use crate::resultset::ResultSet;
use crate::wire::sum_traffic;

pub const DEFAULT_SITES: [&str; 4] = ["CAM", "UDI", "OXF", "MIL"];
const USER: &str = "scenario-clinician";

#[derive(Debug, Clone)]
pub struct StepReport {
    pub line: usize,
    pub step: String,
    pub outcome: Result<(), String>,
}

#[derive(Debug, Default)]
pub struct Report {
    pub steps: Vec<StepReport>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.steps.iter().all(|s| s.outcome.is_ok())
    }

    pub fn failures(&self) -> usize {
        self.steps.iter().filter(|s| s.outcome.is_err()).count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            match &s.outcome {
                Ok(()) => out.push_str(&format!("ok   {:>3}  {}\n", s.line, s.step)),
                Err(e) => out.push_str(&format!("FAIL {:>3}  {}\n           {e}\n", s.line, s.step)),
            }
        }
        out.push_str(&format!(
            "{} steps, {} failed: {}\n",
            self.steps.len(),
            self.failures(),
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

enum Recorded {
    Query {
        xml: String,
        result: ResultSet,
        warnings: Vec<String>,
    },
    Exec {
        count: u64,
        warnings: Vec<String>,
    },
    Alg {
        warnings: Vec<String>,
    },
}

impl Recorded {
    fn warnings(&self) -> &[String] {
        match self {
            Recorded::Query { warnings, .. } | Recorded::Exec { warnings, .. } | Recorded::Alg { warnings } => warnings,
        }
    }
}

struct Proc {
    child: Child,
    addr: String,
}

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

type Background = JoinHandle<Result<(String, Vec<String>), ClientError>>;

pub struct ScenarioRunner {
    exe: PathBuf,
    work: PathBuf,
    keep_work: bool,
    registry: Option<Proc>,
    nodes: BTreeMap<SiteCode, Proc>,
    clients: BTreeMap<SiteCode, NodeClient>,
    manifests: BTreeMap<SiteCode, Manifest>,
    results: BTreeMap<String, Recorded>,
    background: BTreeMap<String, Background>,
}

enum StepError {
    Fatal(String),
    Failed(String),
}

fn fatal(e: impl std::fmt::Display) -> StepError {
    StepError::Fatal(e.to_string())
}

fn failed(e: impl std::fmt::Display) -> StepError {
    StepError::Failed(e.to_string())
}

fn site(s: &str) -> Result<SiteCode, StepError> {
    SiteCode::new(s).map_err(|e| StepError::Fatal(e.to_string()))
}

fn spawn_listening(mut cmd: Command, log: &Path) -> Result<Proc, String> {
    let log = fs::File::create(log).map_err(|e| e.to_string())?;
    let mut child = cmd
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::from(log))
        .spawn()
        .map_err(|e| format!("cannot start {cmd:?}: {e}"))?;
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut lines = BufReader::new(stdout).lines();
        if let Some(Ok(first)) = lines.next() {
            let _ = tx.send(first);
        }
        // Keep draining so the child never blocks on a full pipe.
        for _ in lines {}
    });
    match rx.recv_timeout(Duration::from_secs(30)) {
        Ok(line) => match line.strip_prefix("LISTENING ") {
            Some(addr) => Ok(Proc {
                child,
                addr: addr.trim().to_string(),
            }),
            None => {
                let _ = child.kill();
                Err(format!("unexpected first line {line:?}"))
            }
        },
        Err(_) => {
            let _ = child.kill();
            let _ = child.wait();
            Err("process did not report a listening address".into())
        }
    }
}

impl ScenarioRunner {
    pub fn new(exe: impl Into<PathBuf>) -> std::io::Result<Self> {
        let mut tag = [0u8; 6];
        rand::rng().fill_bytes(&mut tag);
        let work = std::env::temp_dir().join(format!("gridbox-scenario-{}", hex::encode(tag)));
        fs::create_dir_all(&work)?;
        Ok(ScenarioRunner {
            exe: exe.into(),
            work,
            keep_work: std::env::var_os("GRIDBOX_KEEP_SCENARIO").is_some(),
            registry: None,
            nodes: BTreeMap::new(),
            clients: BTreeMap::new(),
            manifests: BTreeMap::new(),
            results: BTreeMap::new(),
            background: BTreeMap::new(),
        })
    }

    pub fn work_dir(&self) -> &Path {
        &self.work
    }

    pub fn run_file(&mut self, path: &Path) -> std::io::Result<Report> {
        Ok(self.run_script(&fs::read_to_string(path)?))
    }

    pub fn run_script(&mut self, script: &str) -> Report {
        let mut report = Report::default();
        for (n, raw) in script.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let outcome = self.step(line);
            let stop = matches!(outcome, Err(StepError::Fatal(_)));
            report.steps.push(StepReport {
                line: n + 1,
                step: line.to_string(),
                outcome: outcome.map_err(|e| match e {
                    StepError::Fatal(m) | StepError::Failed(m) => m,
                }),
            });
            if stop {
                break;
            }
        }
        report
    }

    fn client(&self, s: &SiteCode) -> Result<&NodeClient, StepError> {
        self.clients.get(s).ok_or_else(|| fatal(format!("no running node {s}")))
    }

    fn expand(&self, text: &str) -> Result<String, StepError> {
        let mut out = text.to_string();
        while let Some(start) = out.find("${anchor:") {
            let end = out[start..].find('}').ok_or_else(|| fatal("unterminated ${anchor:"))? + start;
            let s = site(&out[start + 9..end])?;
            let m = self
                .manifests
                .get(&s)
                .ok_or_else(|| fatal(format!("no cohort generated at {s}")))?;
            out.replace_range(start..=end, &m.anchor_patient.to_string());
        }
        Ok(out)
    }

    fn record(&self, label: &str) -> Result<&Recorded, StepError> {
        self.results
            .get(label)
            .ok_or_else(|| failed(format!("no result labelled {label:?}")))
    }

    fn query_result(&self, label: &str) -> Result<(&String, &ResultSet), StepError> {
        match self.record(label)? {
            Recorded::Query { xml, result, .. } => Ok((xml, result)),
            _ => Err(failed(format!("{label:?} is not a query result"))),
        }
    }

    fn truth(&self, name: &str) -> Result<(u64, u64), StepError> {
        if let Some((label, s)) = name.split_once('@') {
            let m = self
                .manifests
                .get(&site(s)?)
                .ok_or_else(|| failed(format!("no manifest for {s}")))?;
            let q = m.query(label).ok_or_else(|| failed(format!("manifest has no {label:?}")))?;
            return Ok((q.images, q.patients));
        }
        if self.manifests.is_empty() {
            return Err(failed("no cohorts generated"));
        }
        let mut total = (0, 0);
        for m in self.manifests.values() {
            let q = m.query(name).ok_or_else(|| failed(format!("manifest has no {name:?}")))?;
            total.0 += q.images;
            total.1 += q.patients;
        }
        Ok(total)
    }

    fn step(&mut self, line: &str) -> Result<(), StepError> {
        let words: Vec<&str> = line.split_whitespace().collect();
        let rest_after = |n: usize| -> String {
            let mut s = line;
            for _ in 0..n {
                s = s.trim_start();
                s = &s[s.find(char::is_whitespace).unwrap_or(s.len())..];
            }
            s.trim().to_string()
        };
        match words.as_slice() {
            ["start-vo", n, more @ ..] => self.start_vo(n, more),
            ["gen-cohort", s, seed, patients, more @ ..] => {
                let s = site(s)?;
                let seed: u64 = seed.parse().map_err(fatal)?;
                let patients: usize = patients.parse().map_err(fatal)?;
                let profile = match more.first() {
                    Some(p) => p.parse::<Profile>().map_err(fatal)?,
                    None if s.as_str() == "UDI" => Profile::Udine,
                    None => Profile::Cambridge,
                };
                let c = Cohort::generate(&CohortSpec::profile(profile, s.clone(), seed, patients));
                let m = cohort::upload(&c, self.client(&s)?).map_err(fatal)?;
                let stats = self.client(&s)?.stats().map_err(fatal)?;
                if stats != m.stats {
                    return Err(failed(format!("{s} stats {stats:?} differ from manifest {:?}", m.stats)));
                }
                fs::write(
                    self.work.join(format!("manifest-{s}.json")),
                    serde_json::to_vec_pretty(&m).expect("manifest serializes"),
                )
                .map_err(fatal)?;
                self.manifests.insert(s, m);
                Ok(())
            }
            ["query-at", s, label, ..] => {
                let text = self.expand(&rest_after(3))?;
                let (xml, warnings) = self.client(&site(s)?)?.query_xml(&text).map_err(failed)?;
                self.store_query(label, xml, warnings)
            }
            ["query-bg", s, label, ..] => {
                let text = self.expand(&rest_after(3))?;
                let client = self.client(&site(s)?)?.clone();
                let h = std::thread::spawn(move || client.query_xml(&text));
                self.background.insert(label.to_string(), h);
                Ok(())
            }
            ["wait", label] => {
                let h = self
                    .background
                    .remove(*label)
                    .ok_or_else(|| failed(format!("no background step {label:?}")))?;
                let (xml, warnings) = h
                    .join()
                    .map_err(|_| failed("background query panicked"))?
                    .map_err(failed)?;
                self.store_query(label, xml, warnings)
            }
            ["exec-at", s, label, alg, ..] => {
                let selector = self.expand(&rest_after(4))?;
                let (name, version) = match alg.split_once('@') {
                    Some((n, v)) => (n, Some(v.parse::<u32>().map_err(fatal)?)),
                    None => (*alg, None),
                };
                let (receipt, warnings) = self
                    .client(&site(s)?)?
                    .execute_algorithm(name, version, &selector)
                    .map_err(failed)?;
                self.results.insert(
                    label.to_string(),
                    Recorded::Exec {
                        count: receipt.count,
                        warnings,
                    },
                );
                Ok(())
            }
            ["add-alg-at", s, label, name, ..] => {
                let source = rest_after(4).replace(';', "\n");
                let (_, warnings) = self.client(&site(s)?)?.add_algorithm(name, &source).map_err(failed)?;
                self.results.insert(label.to_string(), Recorded::Alg { warnings });
                Ok(())
            }
            ["kill", s] => {
                let s = site(s)?;
                self.clients.remove(&s);
                self.nodes
                    .remove(&s)
                    .ok_or_else(|| fatal(format!("no running node {s}")))?;
                Ok(())
            }
            ["sleep", ms] => {
                std::thread::sleep(Duration::from_millis(ms.parse().map_err(fatal)?));
                Ok(())
            }
            ["assert-equal", first, others @ ..] if !others.is_empty() => {
                let (a, _) = self.query_result(first)?;
                for o in others {
                    let (b, _) = self.query_result(o)?;
                    if a != b {
                        return Err(failed(format!("{first} and {o} differ")));
                    }
                }
                Ok(())
            }
            ["assert-summary", label, images, patients] => {
                let (_, r) = self.query_result(label)?;
                let want = |kv: &str, key: &str| -> Result<u64, StepError> {
                    kv.strip_prefix(key)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| fatal(format!("expected {key}<n>, got {kv}")))
                };
                let expected = (want(images, "images=")?, want(patients, "patients=")?);
                let got = (r.summary().images, r.summary().patients);
                (got == expected)
                    .then_some(())
                    .ok_or_else(|| failed(format!("summary {got:?}, expected {expected:?}")))
            }
            ["assert-manifest", label, truth] => {
                let (_, r) = self.query_result(label)?;
                let expected = self.truth(truth)?;
                let got = (r.summary().images, r.summary().patients);
                (got == expected)
                    .then_some(())
                    .ok_or_else(|| failed(format!("summary (images, patients) = {got:?}, manifest says {expected:?}")))
            }
            ["assert-count", label, want] => {
                let Recorded::Exec { count, .. } = self.record(label)? else {
                    return Err(failed(format!("{label:?} is not an exec result")));
                };
                let expected = match want.parse::<u64>() {
                    Ok(n) => n,
                    Err(_) => self.truth(want)?.0,
                };
                (*count == expected)
                    .then_some(())
                    .ok_or_else(|| failed(format!("wrote {count} records, expected {expected}")))
            }
            ["assert-site-rows", label, s, want] => {
                let s = site(s)?;
                let (_, r) = self.query_result(label)?;
                let expected = match *want {
                    "all" => self
                        .manifests
                        .get(&s)
                        .map(|m| m.images)
                        .ok_or_else(|| failed(format!("no manifest for {s}")))?,
                    n => n.parse().map_err(fatal)?,
                };
                let got = r.rows().keys().filter(|id| id.site() == &s).count() as u64;
                (got == expected)
                    .then_some(())
                    .ok_or_else(|| failed(format!("{got} rows from {s}, expected {expected}")))
            }
            ["assert-warning", label, s] => {
                let w = self.record(label)?.warnings();
                w.iter()
                    .any(|w| w.contains(&format!("site {s} ")))
                    .then_some(())
                    .ok_or_else(|| failed(format!("no warning names {s}: {w:?}")))
            }
            ["assert-no-warning", label] => {
                let w = self.record(label)?.warnings();
                w.is_empty()
                    .then_some(())
                    .ok_or_else(|| failed(format!("unexpected warnings {w:?}")))
            }
            ["assert-locality"] => {
                let t = self.traffic()?;
                let bad: Vec<String> = ["QUERY", "RQUERY", "EXEC_ALG"]
                    .iter()
                    .filter_map(|op| t.get(*op).filter(|c| c.binary_bytes > 0).map(|c| format!("{op}: {}", c.binary_bytes)))
                    .collect();
                bad.is_empty()
                    .then_some(())
                    .ok_or_else(|| failed(format!("binary bytes on query traffic: {}", bad.join(", "))))
            }
            ["assert-no-rquery"] => {
                let t = self.traffic()?;
                match t.get("RQUERY") {
                    Some(c) if c.frames > 0 => Err(failed(format!("{} RQUERY frames observed", c.frames))),
                    _ => Ok(()),
                }
            }
            _ => Err(fatal(format!("unrecognized step {line:?}"))),
        }
    }

    fn store_query(&mut self, label: &str, xml: String, warnings: Vec<String>) -> Result<(), StepError> {
        let result = ResultSet::from_xml(xml.as_bytes()).map_err(failed)?;
        fs::write(self.work.join(format!("{label}.xml")), &xml).map_err(fatal)?;
        self.results.insert(
            label.to_string(),
            Recorded::Query { xml, result, warnings },
        );
        Ok(())
    }

    fn traffic(&self) -> Result<BTreeMap<String, crate::wire::OpTraffic>, StepError> {
        let parts = self
            .clients
            .values()
            .map(|c| c.traffic().map_err(failed))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(sum_traffic(&parts))
    }

    fn start_vo(&mut self, n: &str, more: &[&str]) -> Result<(), StepError> {
        if self.registry.is_some() {
            return Err(fatal("a VO is already running"));
        }
        let n: usize = n.parse().map_err(fatal)?;
        let mut sites = Vec::new();
        let mut delay_ms = 0u64;
        for w in more {
            match w.strip_prefix("rquery-delay-ms=") {
                Some(ms) => delay_ms = ms.parse().map_err(fatal)?,
                None => sites.push(site(w)?),
            }
        }
        if sites.is_empty() {
            if n > DEFAULT_SITES.len() {
                return Err(fatal(format!("name the sites for a {n}-node VO")));
            }
            sites = DEFAULT_SITES[..n].iter().map(|s| site(s)).collect::<Result<_, _>>()?;
        }
        if sites.len() != n {
            return Err(fatal(format!("{n} nodes requested, {} sites named", sites.len())));
        }
        let mut tag = [0u8; 16];
        rand::rng().fill_bytes(&mut tag);
        let admin = hex::encode(tag);
        rand::rng().fill_bytes(&mut tag);
        let credential = hex::encode(tag);

        let mut cmd = Command::new(&self.exe);
        cmd.args(["registry", "--listen", "127.0.0.1:0", "--data"])
            .arg(self.work.join("registry"))
            .env("GRIDBOX_ADMIN_TOKEN", &admin);
        let registry = spawn_listening(cmd, &self.work.join("registry.log")).map_err(fatal)?;
        add_user(&registry.addr, &admin, USER, &credential, None, true).map_err(fatal)?;
        for s in &sites {
            let mut cmd = Command::new(&self.exe);
            cmd.args(["node", "--site", s.as_str(), "--listen", "127.0.0.1:0", "--registry", &registry.addr])
                .arg("--data")
                .arg(self.work.join(s.as_str()))
                .env("GRIDBOX_SECRET", format!("scenario-secret-{s}"))
                .env("GRIDBOX_RQUERY_DELAY_MS", delay_ms.to_string())
                .env("GRIDBOX_MEMBERSHIP_REFRESH_MS", "200");
            let proc = spawn_listening(cmd, &self.work.join(format!("{s}.log"))).map_err(fatal)?;
            let mut client = NodeClient::new(proc.addr.clone());
            client.authenticate(USER, &credential).map_err(fatal)?;
            self.clients.insert(s.clone(), client);
            self.nodes.insert(s.clone(), proc);
        }
        self.registry = Some(registry);
        // Nodes that registered early learn about later ones on their next
        // membership refresh.
        std::thread::sleep(Duration::from_millis(400));
        Ok(())
    }
}

impl Drop for ScenarioRunner {
    fn drop(&mut self) {
        for (_, h) in std::mem::take(&mut self.background) {
            let _ = h.join();
        }
        self.nodes.clear();
        self.registry = None;
        if !self.keep_work {
            let _ = fs::remove_dir_all(&self.work);
        }
    }
}
