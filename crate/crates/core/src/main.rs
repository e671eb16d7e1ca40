use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gridbox::cohort::{self, Cohort, CohortSpec, Profile, DEFAULT_PATIENTS};
use gridbox::node::{self, add_user, ClientError, NodeClient, NodeConfig};
use gridbox::scenario::ScenarioRunner;
use gridbox::vo::{self, Registry};
use gridbox::wire::{Accountant, ErrorCode};
use gridbox::SiteCode;

const EXIT_USAGE: u8 = 2;
const EXIT_CONNECTION: u8 = 3;
const EXIT_AUTH: u8 = 4;
const EXIT_SYNTAX: u8 = 5;
const EXIT_NOT_FOUND: u8 = 6;
const EXIT_OTHER: u8 = 7;
const EXIT_SCENARIO: u8 = 8;

#[derive(Parser)]
#[command(name = "gridbox", version, about = "Federated imaging grid: registry, site node and workstation client")]
struct Cli {
    /// Node to talk to.
    #[arg(long, global = true, env = "GRIDBOX_NODE")]
    node: Option<String>,
    /// Session token from `gridbox auth`.
    #[arg(long, global = true, env = "GRIDBOX_TOKEN", hide_env_values = true)]
    token: Option<String>,
    #[arg(long, global = true, env = "GRIDBOX_USER")]
    user: Option<String>,
    #[arg(long, global = true, env = "GRIDBOX_CREDENTIAL", hide_env_values = true)]
    credential: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the VO registry.
    Registry {
        #[arg(long, default_value = "127.0.0.1:7700")]
        listen: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Token accepted for USER_ADD and TRAFFIC.
        #[arg(long, env = "GRIDBOX_ADMIN_TOKEN", hide_env_values = true)]
        admin_token: Option<String>,
    },
    /// Run a site node. Flags override the config file and GRIDBOX_* variables.
    Node {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        site: Option<String>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        registry: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Create or update a user at the registry.
    AddUser {
        #[arg(long, env = "GRIDBOX_REGISTRY")]
        registry: String,
        #[arg(long, env = "GRIDBOX_ADMIN_TOKEN", hide_env_values = true)]
        admin_token: String,
        name: String,
        secret: String,
        #[arg(long)]
        home_site: Option<String>,
        #[arg(long)]
        disabled: bool,
    },
    /// Log in and print a session token.
    Auth,
    /// Upload image files.
    Add { files: Vec<PathBuf> },
    /// Fetch a file by file id, image id, derived id or sha256.
    Retrieve {
        id: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run a query across the VO and print the XML result set.
    Query { text: String },
    /// Upload an algorithm; the source is read from a file or `-` for stdin.
    AddAlg { name: String, source: PathBuf },
    /// Run a stored algorithm over the images a query selects.
    ExecAlg {
        name: String,
        selector: String,
        #[arg(long)]
        version: Option<u32>,
    },
    /// Catalog statistics of the node.
    Stats,
    /// Per-operation traffic counters of the node.
    Traffic,
    /// Generate a synthetic cohort, upload it and write its manifest.
    GenCohort {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_PATIENTS)]
        patients: usize,
        #[arg(long, default_value = "cambridge")]
        profile: Profile,
        /// Use the profile's original patient count.
        #[arg(long)]
        full_scale: bool,
        /// Site code of the target node; also seeds the generator.
        #[arg(long)]
        site: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario script against freshly started processes.
    Scenario { script: PathBuf },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Failure {
            code,
            message: message.to_string(),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let code = if e.is_connection() {
            EXIT_CONNECTION
        } else {
            match e.code() {
                Some(ErrorCode::AuthFailed) => EXIT_AUTH,
                Some(ErrorCode::RegistryUnreachable | ErrorCode::PeerUnreachable) => EXIT_CONNECTION,
                Some(ErrorCode::QuerySyntax | ErrorCode::UnknownAttribute | ErrorCode::SyntaxError) => EXIT_SYNTAX,
                Some(ErrorCode::NotFound | ErrorCode::UnknownAlgorithm) => EXIT_NOT_FOUND,
                _ => EXIT_OTHER,
            }
        };
        Failure::new(code, e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gridbox: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn announce(addr: &str) {
    println!("LISTENING {addr}");
    let _ = std::io::stdout().flush();
}

fn serve_forever() -> ! {
    loop {
        std::thread::park();
    }
}

fn client(cli: &Cli) -> Result<NodeClient, Failure> {
    let addr = cli
        .node
        .clone()
        .ok_or_else(|| Failure::new(EXIT_USAGE, "no node given (--node or GRIDBOX_NODE)"))?;
    let mut c = NodeClient::new(addr);
    match (&cli.token, &cli.user, &cli.credential) {
        (Some(t), _, _) => c = c.with_token(t.clone()),
        (None, Some(u), Some(cred)) => {
            c.authenticate(u, cred)?;
        }
        _ => {}
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Registry {
            listen,
            data,
            admin_token,
        } => {
            let registry = match data {
                Some(d) => Registry::open(d).map_err(|e| Failure::new(EXIT_OTHER, e))?,
                None => Registry::in_memory(),
            };
            let handle = vo::start_registry(listen, registry, admin_token.clone(), Accountant::new())
                .map_err(|e| Failure::new(EXIT_CONNECTION, e))?;
            announce(&handle.addr());
            serve_forever()
        }
        Command::Node {
            config,
            site,
            listen,
            registry,
            data,
        } => {
            let mut env: Vec<(String, String)> = std::env::vars().collect();
            // Flags come last so they win over file and environment.
            let flags = [
                ("site", site.clone()),
                ("listen", listen.clone()),
                ("registry", registry.clone()),
                ("data_dir", data.as_ref().map(|d| d.display().to_string())),
            ];
            for (k, v) in flags {
                if let Some(v) = v {
                    env.push((format!("{}{}", node::ENV_PREFIX, k.to_ascii_uppercase()), v));
                }
            }
            let cfg = NodeConfig::load(config.as_deref(), env).map_err(|e| Failure::new(EXIT_USAGE, e))?;
            let handle = node::start_node(cfg, Accountant::new()).map_err(|e| match e {
                node::NodeError::Registry(_) => Failure::new(EXIT_CONNECTION, e),
                node::NodeError::Config(_) => Failure::new(EXIT_USAGE, e),
                _ => Failure::new(EXIT_OTHER, e),
            })?;
            announce(&handle.addr());
            serve_forever()
        }
        Command::AddUser {
            registry,
            admin_token,
            name,
            secret,
            home_site,
            disabled,
        } => {
            let home = home_site
                .as_deref()
                .map(SiteCode::new)
                .transpose()
                .map_err(|e| Failure::new(EXIT_USAGE, e))?;
            add_user(registry, admin_token, name, secret, home.as_ref(), !disabled)?;
            Ok(())
        }
        Command::Auth => {
            let mut c = NodeClient::new(
                cli.node
                    .clone()
                    .ok_or_else(|| Failure::new(EXIT_USAGE, "no node given (--node or GRIDBOX_NODE)"))?,
            );
            let (Some(u), Some(cred)) = (&cli.user, &cli.credential) else {
                return Err(Failure::new(EXIT_USAGE, "auth needs --user and --credential"));
            };
            let t = c.authenticate(u, cred)?;
            println!("{}", t.token);
            eprintln!("user {} token valid for {} s", t.user, t.ttl);
            Ok(())
        }
        Command::Add { files } => {
            let c = client(&cli)?;
            for f in files {
                let bytes = std::fs::read(f).map_err(|e| Failure::new(EXIT_OTHER, format!("{}: {e}", f.display())))?;
                let r = c.add_file(&bytes)?;
                println!(
                    "{} file={} image={} patient={} sha256={}{}",
                    f.display(),
                    r.file.id,
                    r.image,
                    r.patient,
                    r.file.sha256,
                    if r.written > 0 { "" } else { " (already stored)" }
                );
            }
            Ok(())
        }
        Command::Retrieve { id, out } => {
            let bytes = client(&cli)?.retrieve(id)?;
            match out {
                Some(p) => std::fs::write(p, &bytes).map_err(|e| Failure::new(EXIT_OTHER, e))?,
                None => std::io::stdout().write_all(&bytes).map_err(|e| Failure::new(EXIT_OTHER, e))?,
            }
            Ok(())
        }
        Command::Query { text } => {
            let (xml, warnings) = client(&cli)?.query_xml(text)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            println!("{xml}");
            let r = gridbox::resultset::ResultSet::from_xml(xml.as_bytes()).map_err(|e| Failure::new(EXIT_OTHER, e))?;
            eprintln!("images={} patients={}", r.summary().images, r.summary().patients);
            Ok(())
        }
        Command::AddAlg { name, source } => {
            let text = if source.as_os_str() == "-" {
                let mut s = String::new();
                std::io::stdin().read_to_string(&mut s).map_err(|e| Failure::new(EXIT_OTHER, e))?;
                s
            } else {
                std::fs::read_to_string(source).map_err(|e| Failure::new(EXIT_OTHER, format!("{}: {e}", source.display())))?
            };
            let (rec, warnings) = client(&cli)?.add_algorithm(name, &text)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            println!("{} {} v{}", rec.id, rec.name, rec.version);
            Ok(())
        }
        Command::ExecAlg { name, selector, version } => {
            let (receipt, warnings) = client(&cli)?.execute_algorithm(name, *version, selector)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", serde_json::to_string_pretty(&receipt).expect("receipt serializes"));
            Ok(())
        }
        Command::Stats => {
            let s = client(&cli)?.stats()?;
            println!("{}", serde_json::to_string_pretty(&s).expect("stats serialize"));
            Ok(())
        }
        Command::Traffic => {
            let t = client(&cli)?.traffic()?;
            println!("{}", serde_json::to_string_pretty(&t).expect("traffic serializes"));
            Ok(())
        }
        Command::GenCohort {
            seed,
            patients,
            profile,
            full_scale,
            site,
            out,
        } => {
            let c = client(&cli)?;
            let site = SiteCode::new(site).map_err(|e| Failure::new(EXIT_USAGE, e))?;
            let spec = if *full_scale {
                CohortSpec::full_scale(*profile, site, *seed)
            } else {
                CohortSpec::profile(*profile, site, *seed, *patients)
            };
            let cohort = Cohort::generate(&spec);
            let manifest = cohort::upload(&cohort, &c).map_err(|e| {
                let code = Failure::from(e.source).code;
                Failure::new(code, format!("upload stopped after {} of {} files", e.done, e.total))
            })?;
            let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            match out {
                Some(p) => std::fs::write(p, text).map_err(|e| Failure::new(EXIT_OTHER, e))?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Scenario { script } => {
            let exe = std::env::current_exe().map_err(|e| Failure::new(EXIT_OTHER, e))?;
            let mut runner = ScenarioRunner::new(exe).map_err(|e| Failure::new(EXIT_OTHER, e))?;
            let report = runner
                .run_file(script)
                .map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", script.display())))?;
            print!("{}", report.render());
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::new(EXIT_SCENARIO, format!("{} step(s) failed", report.failures())))
            }
        }
    }
}
