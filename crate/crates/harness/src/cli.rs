//! Command-line front end.
//!
//! Exit codes: 0 ok, 1 usage, 2 service unreachable, 3 schema mismatch,
//! 4 finding not reproducible.

use std::collections::BTreeSet;
use std::net::{SocketAddr, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use ufuzz_core::campaign::{
    fault_preset, spec_campaign, AgentConfig, Campaign, CampaignConfig, CorpusKind, FindingKind, LocalAgent, Task, Variant,
    FAULT_PRESETS,
};
use ufuzz_core::compare::{early_bug_eval, Verdict};
use ufuzz_core::engine::{Engine, FaultModel};
use ufuzz_core::mutate::MutationMode;
use ufuzz_core::report::build_matrices;
use ufuzz_core::rom::build_rom;
use ufuzz_core::serialize::serialize;
use ufuzz_core::specfuzz::{run_spec_trial, DEFAULT_TRIALS};
use ufuzz_core::ucode::{MicroOp, UcodeAddress};
use ufuzz_core::vm::ExitReason;

use crate::agent::{AgentOptions, APPS};
use crate::controller::{load_corpus_dir, run_campaign, LinkConfig, RunError, RunOptions, Transport, UdpExecutor};
use crate::db::{CampaignDatabase, ConfigDoc, DbError, EventDoc, FindingDoc};
use crate::watchdog::{self, LaunchSpec, WatchdogClient, WatchdogConfig, WatchdogHandle};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_UNREACHABLE: i32 = 2;
pub const EXIT_SCHEMA: i32 = 3;
pub const EXIT_NOT_REPRODUCIBLE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ufuzz", version, about = "Microcode-coverage-guided fuzzer for a simulated microcoded CPU")]
pub struct Cli {
    /// Campaign database (JSON).
    #[arg(long, global = true, default_value = "ufuzz.json")]
    pub database: PathBuf,
    /// Watchdog REST endpoint used to reset the agent.
    #[arg(long, global = true)]
    pub instrumentor: Option<String>,
    /// Agent UDP address.
    #[arg(long, global = true, default_value = "127.0.0.1:4444")]
    pub agent: SocketAddr,
    /// Spawn a watchdog and agent on this host.
    #[arg(long, global = true, conflicts_with = "in_process")]
    pub local: bool,
    /// Execute tasks in this process without an agent.
    #[arg(long, global = true)]
    pub in_process: bool,
    /// Fault preset of the simulated engine.
    #[arg(long, global = true, default_value = "correct", value_parser = clap::builder::PossibleValuesParser::new(FAULT_PRESETS))]
    pub fault: String,
    /// Testcases to execute.
    #[arg(long, global = true, default_value_t = 1000)]
    pub iterations: u64,
    /// Campaign seed; UFUZZ_SEED overrides it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Skip the per-testcase coverage episode.
    #[arg(long, global = true)]
    pub no_coverage: bool,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Args)]
pub struct FuzzArgs {
    /// Directory receiving one file per finding.
    #[arg(short, long)]
    pub solutions: Option<PathBuf>,
    /// Directory of initial seeds.
    #[arg(short, long)]
    pub corpus: Option<PathBuf>,
    /// Directory of additional AFL-style seeds.
    #[arg(short, long)]
    pub afl_corpus: Option<PathBuf>,
    /// Wall-clock budget in hours.
    #[arg(short, long)]
    pub timeout_hours: Option<f64>,
    /// Pick parents uniformly and ignore coverage.
    #[arg(short, long)]
    pub disable_feedback: bool,
    /// Generate printable initial inputs.
    #[arg(short, long)]
    pub printable_input_generation: bool,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Coverage-guided fuzzing with havoc mutations.
    Afl(FuzzArgs),
    /// Coverage-guided fuzzing with genetic mutations.
    Genetic(FuzzArgs),
    /// Speculative-window fuzzing of single micro-ops.
    Spec {
        #[arg(short, long)]
        timeout_hours: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: u32,
    },
    /// Coverage overlap, uniqueness and exclusivity across databases.
    Report {
        #[arg(required = true)]
        databases: Vec<PathBuf>,
        /// Also write the matrices as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Re-run a stored finding and check it reproduces.
    Replay { db: PathBuf, id: u64 },
    /// Summarize a database.
    View { db: PathBuf },
    /// Run an agent process.
    Agent {
        #[arg(long, default_value = "127.0.0.1:4444")]
        bind: SocketAddr,
        /// Controller address that receives the boot HELLO.
        #[arg(long)]
        controller: Option<SocketAddr>,
        #[arg(long, default_value = APPS[0], value_parser = clap::builder::PossibleValuesParser::new(APPS))]
        app: String,
    },
    /// Run the watchdog service supervising an agent process.
    Watchdog {
        #[arg(long, default_value = "127.0.0.1:8000")]
        bind: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:4444")]
        agent_bind: SocketAddr,
        #[arg(long)]
        controller: Option<SocketAddr>,
        #[arg(long, default_value = APPS[0], value_parser = clap::builder::PossibleValuesParser::new(APPS))]
        app: String,
    },
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    run(cli)
}

fn seed_of(cli: &Cli) -> Result<u64, String> {
    match std::env::var("UFUZZ_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| format!("UFUZZ_SEED is not an integer: {v:?}")),
        Err(_) => Ok(cli.seed),
    }
}

fn fault(cli: &Cli) -> FaultModel {
    fault_preset(&cli.fault).expect("validated by clap")
}

pub fn run(cli: Cli) -> i32 {
    let seed = match seed_of(&cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match &cli.cmd {
        Cmd::Afl(a) => fuzz(&cli, "afl", a, seed),
        Cmd::Genetic(a) => fuzz(&cli, "genetic", a, seed),
        Cmd::Spec { timeout_hours, trials } => spec(&cli, *timeout_hours, *trials, seed),
        Cmd::Report { databases, csv } => report(databases, csv.as_deref()),
        Cmd::Replay { db, id } => replay(db, *id),
        Cmd::View { db } => view(db),
        Cmd::Agent { bind, controller, app } => {
            let opts = AgentOptions {
                bind: *bind,
                controller: *controller,
                app: app.clone(),
                config: AgentConfig { fault: fault(&cli), ..AgentConfig::default() },
            };
            match crate::agent::run(opts) {
                Ok(()) => EXIT_OK,
                Err(e) => {
                    eprintln!("error: agent: {e}");
                    EXIT_UNREACHABLE
                }
            }
        }
        Cmd::Watchdog { bind, agent_bind, controller, app } => serve_watchdog(&cli, *bind, *agent_bind, *controller, app),
    }
}

fn schema_exit(e: &DbError) -> i32 {
    eprintln!("error: {e}");
    match e {
        DbError::SchemaMismatch(_) => EXIT_SCHEMA,
        DbError::Io(_) => EXIT_USAGE,
    }
}

fn stop_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    std::thread::spawn(move || {
        let Ok(rt) = tokio::runtime::Builder::new_current_thread().enable_all().build() else { return };
        rt.block_on(async {
            if tokio::signal::ctrl_c().await.is_ok() {
                f.store(true, Ordering::Relaxed);
            }
        });
    });
    flag
}

fn budget(hours: Option<f64>) -> Result<Option<Duration>, String> {
    match hours {
        None => Ok(None),
        Some(h) if h.is_finite() && h >= 0.0 => Ok(Some(Duration::from_secs_f64(h * 3600.0))),
        Some(h) => Err(format!("invalid timeout {h}")),
    }
}

fn fuzz(cli: &Cli, mode: &str, a: &FuzzArgs, seed: u64) -> i32 {
    let timeout = match budget(a.timeout_hours) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let mut extra_seeds = Vec::new();
    for dir in [&a.corpus, &a.afl_corpus].into_iter().flatten() {
        match load_corpus_dir(dir) {
            Ok(s) => extra_seeds.extend(s),
            Err(e) => {
                eprintln!("error: corpus {}: {e}", dir.display());
                return EXIT_USAGE;
            }
        }
    }
    let config = CampaignConfig {
        mode: if mode == "afl" { MutationMode::Havoc } else { MutationMode::Genetic },
        seed,
        iterations: cli.iterations,
        corpus: if a.printable_input_generation { CorpusKind::Printable } else { CorpusKind::Valid },
        feedback: !a.disable_feedback,
        coverage: !cli.no_coverage,
        extra_seeds,
        ..CampaignConfig::default()
    };
    let mut doc = ConfigDoc::new(mode, &cli.fault, &config);
    doc.timeout_hours = a.timeout_hours.unwrap_or(0.0);
    let mut db = CampaignDatabase::new(doc);
    let mut campaign = Campaign::new(config);
    let opts = RunOptions { database: cli.database.clone(), timeout, solutions: a.solutions.clone() };
    if timeout == Some(Duration::ZERO) {
        return match db.save(&opts.database) {
            Ok(()) => EXIT_OK,
            Err(e) => schema_exit(&e),
        };
    }
    let stop = stop_flag();
    if cli.in_process {
        let mut agent = LocalAgent::new(AgentConfig { fault: fault(cli), ..AgentConfig::default() });
        return finish(run_campaign(&mut campaign, &mut db, &mut agent, &opts, &stop), &campaign);
    }
    let (mut ex, _wd) = match connect(cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            db.events.push(EventDoc::now(None, "unreachable", e));
            let _ = db.save(&opts.database);
            return EXIT_UNREACHABLE;
        }
    };
    db.events.extend(ex.take_events());
    let r = run_campaign(&mut campaign, &mut db, &mut ex, &opts, &stop);
    finish(r, &campaign)
}

fn finish<E: std::fmt::Display>(r: Result<(), RunError<E>>, c: &Campaign) -> i32 {
    println!(
        "executed {} testcases, {} addresses covered, {} findings ({} divergences, {} skipped on timeout)",
        c.stats.executed,
        c.covered().len(),
        c.findings.len(),
        c.stats.divergences,
        c.stats.skipped_timeout
    );
    match r {
        Ok(()) => EXIT_OK,
        Err(RunError::Db(e)) => schema_exit(&e),
        Err(RunError::Executor(e)) => {
            eprintln!("error: {e}");
            EXIT_UNREACHABLE
        }
    }
}

fn free_udp_port() -> std::io::Result<SocketAddr> {
    UdpSocket::bind("127.0.0.1:0")?.local_addr()
}

/// Reaches the agent: `--local` spawns a watchdog that launches one,
/// otherwise `--agent` is used directly with `--instrumentor` for resets.
fn connect(cli: &Cli) -> Result<(UdpExecutor, Option<WatchdogHandle>), String> {
    let any: SocketAddr = ([127, 0, 0, 1], 0).into();
    if cli.local {
        let agent = free_udp_port().map_err(|e| e.to_string())?;
        let mut ex = UdpExecutor::bind(any, agent, None, LinkConfig::default()).map_err(|e| e.to_string())?;
        let exe = std::env::current_exe().map_err(|e| e.to_string())?;
        let spec = LaunchSpec {
            program: exe,
            args: ["--fault", &cli.fault, "agent", "--bind", &agent.to_string(), "--controller", &ex.local_addr().to_string()]
                .map(String::from)
                .to_vec(),
            env: Vec::new(),
        };
        let wd = watchdog::spawn(spec, WatchdogConfig::default()).map_err(|e| e.to_string())?;
        let client = WatchdogClient::new(&wd.url());
        info!("watchdog on {}", wd.url());
        ex = UdpExecutor::rebind(ex, Some(client));
        ex.recover().map_err(|e| e.to_string())?;
        return Ok((ex, Some(wd)));
    }
    let client = cli.instrumentor.as_deref().map(WatchdogClient::new);
    let mut ex = UdpExecutor::bind(any, cli.agent, client.clone(), LinkConfig::default()).map_err(|e| e.to_string())?;
    if ex.handshake(Duration::from_secs(2)).is_err() {
        if client.is_none() {
            return Err(format!("agent {} unreachable", cli.agent));
        }
        ex.recover().map_err(|e| e.to_string())?;
    }
    Ok((ex, None))
}

fn spec(cli: &Cli, hours: Option<f64>, trials: u32, seed: u64) -> i32 {
    let timeout = match budget(hours) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let config = CampaignConfig { seed, iterations: cli.iterations, ..CampaignConfig::default() };
    let mut doc = ConfigDoc::new("spec", &cli.fault, &config);
    doc.timeout_hours = hours.unwrap_or(0.0);
    doc.spec_trials = trials;
    let mut db = CampaignDatabase::new(doc);
    if timeout != Some(Duration::ZERO) {
        let engine = Engine::new(build_rom());
        match spec_campaign(&engine, &fault(cli), cli.iterations, trials, seed) {
            Ok(f) => db.findings = f.iter().map(FindingDoc::of).collect(),
            Err(e) => {
                eprintln!("error: {e:?}");
                return EXIT_USAGE;
            }
        }
        db.events.push(EventDoc::now(Some(cli.iterations), "spec-done", format!("{} findings", db.findings.len())));
    }
    println!("{} findings", db.findings.len());
    match db.save(&cli.database) {
        Ok(()) => EXIT_OK,
        Err(e) => schema_exit(&e),
    }
}

fn report(paths: &[PathBuf], csv: Option<&Path>) -> i32 {
    let mut sets = Vec::new();
    for p in paths {
        match CampaignDatabase::load(p) {
            Ok(db) => {
                let set: BTreeSet<UcodeAddress> = db.covered().into_iter().filter_map(|a| UcodeAddress::new(a as u32).ok()).collect();
                sets.push((db.config.name.clone(), set));
            }
            Err(e) => {
                eprintln!("{}:", p.display());
                return schema_exit(&e);
            }
        }
    }
    let m = build_matrices(sets.iter().map(|(n, s)| (n.as_str(), s)));
    print!("{}", m.to_text());
    if let Some(path) = csv {
        if let Err(e) = std::fs::write(path, m.to_csv()) {
            eprintln!("error: {}: {e}", path.display());
            return EXIT_USAGE;
        }
    }
    EXIT_OK
}

fn view(path: &Path) -> i32 {
    let db = match CampaignDatabase::load(path) {
        Ok(d) => d,
        Err(e) => return schema_exit(&e),
    };
    let c = &db.config;
    println!("{} ({} mode, fault {}, seed {})", c.name, c.mode, c.fault, c.seed);
    println!("seeds: {}  covered addresses: {}  events: {}", db.seeds.len(), db.covered().len(), db.events.len());
    for f in &db.findings {
        let idx = f.index.map_or(String::from("-"), |i| i.to_string());
        println!("#{:<4} {:<16} testcase {:<6} index {:<4} {}", f.id, f.kind, f.testcase, idx, f.details);
    }
    EXIT_OK
}

/// Outcome of re-running a stored finding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Replay {
    Reproduced(String),
    NotReproducible(String),
}

pub fn replay_finding(db: &CampaignDatabase, id: u64) -> Result<Replay, DbError> {
    let f = db
        .findings
        .iter()
        .find(|f| f.id == id)
        .ok_or_else(|| DbError::SchemaMismatch(format!("no finding {id}")))?;
    let fault = fault_preset(&db.config.fault).ok_or_else(|| DbError::SchemaMismatch(format!("unknown fault {:?}", db.config.fault)))?;
    let code = f.code()?;
    let agent = LocalAgent::new(AgentConfig { fault: fault.clone(), ..AgentConfig::default() });
    let task = |variant, code: &[u8]| Task { id: 0, variant, code: code.to_vec(), hooks: Vec::new() };
    let nr = |m: String| Ok(Replay::NotReproducible(m));
    match f.kind()? {
        FindingKind::ArchDivergence => {
            let Ok(sp) = serialize(&code) else { return nr(String::from("testcase no longer serializes")) };
            let (Ok(p), Ok(q)) = (agent.execute(&task(Variant::Plain, &code)), agent.execute(&task(Variant::Serialized, &sp.code))) else {
                return nr(String::from("agent rejected the testcase"));
            };
            if !matches!(early_bug_eval(&p.summary(), &q.summary(), &sp.map), Verdict::Diverged { .. }) {
                return nr(String::from("P and Q agree"));
            }
            let index = agent.execute(&task(Variant::Localize, &code)).ok().and_then(|r| r.divergence);
            if index == f.index {
                Ok(Replay::Reproduced(format!("diverges at instruction {}", index.unwrap_or(0))))
            } else {
                nr(format!("divergent index {index:?}, stored {:?}", f.index))
            }
        }
        FindingKind::Lockup if db.config.mode != "spec" => match agent.execute(&task(Variant::Plain, &code)) {
            Ok(r) if matches!(r.exit, ExitReason::EngineLockup(_)) => Ok(Replay::Reproduced(format!("{}", r.exit))),
            Ok(r) => nr(format!("exit {}", r.exit)),
            Err(e) => nr(e.to_string()),
        },
        FindingKind::SpecPersistence | FindingKind::Lockup => {
            let mut raw = [0u8; 8];
            let n = code.len().min(8);
            raw[..n].copy_from_slice(&code[..n]);
            let cand = MicroOp::from_raw(u64::from_le_bytes(raw));
            let trials = db.config.spec_trials.max(1);
            let engine = Engine::new(build_rom());
            let r = run_spec_trial(&engine, cand, &fault, trials, db.config.seed ^ f.testcase)
                .map_err(|e| DbError::SchemaMismatch(format!("{e:?}")))?;
            let ok = if f.kind()? == FindingKind::Lockup { r.lockup.is_some() } else { !r.effects.is_empty() };
            if ok {
                Ok(Replay::Reproduced(format!("{} effects, lockup {:?}", r.effects.len(), r.lockup)))
            } else {
                nr(String::from("no persisted effect or lockup"))
            }
        }
        FindingKind::ProtocolFault => nr(String::from("protocol faults are not replayable")),
    }
}

fn replay(path: &Path, id: u64) -> i32 {
    let db = match CampaignDatabase::load(path) {
        Ok(d) => d,
        Err(e) => return schema_exit(&e),
    };
    match replay_finding(&db, id) {
        Ok(Replay::Reproduced(m)) => {
            println!("finding {id} reproduced: {m}");
            EXIT_OK
        }
        Ok(Replay::NotReproducible(m)) => {
            println!("finding {id} not reproducible: {m}");
            EXIT_NOT_REPRODUCIBLE
        }
        Err(DbError::SchemaMismatch(m)) if m.starts_with("no finding") => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(e) => schema_exit(&e),
    }
}

fn serve_watchdog(cli: &Cli, bind: SocketAddr, agent_bind: SocketAddr, controller: Option<SocketAddr>, app: &str) -> i32 {
    let exe = match std::env::current_exe() {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let mut args: Vec<String> = ["--fault", &cli.fault, "agent", "--bind", &agent_bind.to_string()].map(String::from).to_vec();
    if let Some(c) = controller {
        args.extend([String::from("--controller"), c.to_string()]);
    }
    let spec = LaunchSpec { program: exe, args, env: Vec::new() };
    let cfg = WatchdogConfig { bind, app: app.to_string(), ..WatchdogConfig::default() };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let r = rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        println!("watchdog listening on http://{}", listener.local_addr()?);
        watchdog::serve(listener, spec, cfg, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    });
    match r {
        Ok(()) => EXIT_OK,
        Err(e) => {
            error!("watchdog: {e}");
            eprintln!("error: {}", watchdog::WatchdogError::BindFailure(e));
            EXIT_UNREACHABLE
        }
    }
}
