//! Controller side of the agent link and the persistent campaign loop.

use std::fmt;
use std::net::{SocketAddr, UdpSocket};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use log::{info, warn};
use ufuzz_core::campaign::{Campaign, Executor, LocalAgent, Task, TaskResult};

use crate::db::{CampaignDatabase, DbError, EventDoc};
use crate::watchdog::{TargetState, WatchdogClient, WatchdogError};
use crate::wire::{decode, encode, Message, WireError};

#[derive(Debug, Clone)]
pub struct LinkConfig {
    /// Longest wait for one task's reply while the agent still answers PING.
    pub reply_timeout: Duration,
    pub retries: u32,
    /// First resend delay; doubles on every retry.
    pub backoff: Duration,
    pub ping_interval: Duration,
    /// Consecutive unanswered PINGs after which the agent counts as dead.
    pub ping_misses: u32,
    pub hello_timeout: Duration,
    pub reset_attempts: u32,
    /// How long to keep polling an unreachable watchdog before giving up.
    pub pause_limit: Duration,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            reply_timeout: Duration::from_secs(30),
            retries: 3,
            backoff: Duration::from_millis(100),
            ping_interval: Duration::from_millis(500),
            ping_misses: 3,
            hello_timeout: Duration::from_secs(15),
            reset_attempts: 3,
            pause_limit: Duration::from_secs(60),
        }
    }
}

#[derive(Debug)]
pub enum DispatchError {
    Timeout,
    MalformedReply(WireError),
    VersionMismatch(u8),
    /// The agent could not decode what we sent.
    Garbled(String),
    /// The agent rejected the task; retrying cannot help.
    Rejected(String),
    AgentUnreachable,
    WatchdogUnreachable(String),
    Io(std::io::Error),
}

impl fmt::Display for DispatchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DispatchError::Timeout => f.write_str("agent reply timed out"),
            DispatchError::MalformedReply(e) => write!(f, "malformed reply: {e}"),
            DispatchError::VersionMismatch(v) => write!(f, "agent speaks protocol version {v}"),
            DispatchError::Garbled(m) => write!(f, "agent could not decode the task: {m}"),
            DispatchError::Rejected(m) => write!(f, "agent rejected task: {m}"),
            DispatchError::AgentUnreachable => f.write_str("agent unreachable"),
            DispatchError::WatchdogUnreachable(m) => write!(f, "watchdog unreachable: {m}"),
            DispatchError::Io(e) => write!(f, "socket: {e}"),
        }
    }
}

impl std::error::Error for DispatchError {}

impl From<std::io::Error> for DispatchError {
    fn from(e: std::io::Error) -> Self {
        DispatchError::Io(e)
    }
}

/// An executor that also reports transport events for the database.
pub trait Transport: Executor {
    fn take_events(&mut self) -> Vec<EventDoc> {
        Vec::new()
    }
}

impl Transport for LocalAgent {}

/// Remote agent over UDP, with an optional watchdog for hard resets.
pub struct UdpExecutor {
    sock: UdpSocket,
    pub agent: SocketAddr,
    pub config: LinkConfig,
    watchdog: Option<WatchdogClient>,
    events: Vec<EventDoc>,
    nonce: u64,
    pub resets: u64,
    pub redispatches: u64,
    /// Last app name announced by the agent.
    pub app: Option<String>,
}

impl UdpExecutor {
    /// Binds the controller socket; `bind` may use port 0.
    pub fn bind(bind: SocketAddr, agent: SocketAddr, watchdog: Option<WatchdogClient>, config: LinkConfig) -> std::io::Result<UdpExecutor> {
        let sock = UdpSocket::bind(bind)?;
        Ok(UdpExecutor { sock, agent, config, watchdog, events: Vec::new(), nonce: 0, resets: 0, redispatches: 0, app: None })
    }

    /// Same socket, with a watchdog attached.
    pub fn rebind(self, watchdog: Option<WatchdogClient>) -> UdpExecutor {
        UdpExecutor { watchdog, ..self }
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.sock.local_addr().expect("bound socket")
    }

    fn event(&mut self, kind: &str, detail: String) {
        info!("{kind}: {detail}");
        self.events.push(EventDoc::now(None, kind, detail));
    }

    fn send(&self, m: &Message) -> Result<(), DispatchError> {
        let f = encode(m).map_err(DispatchError::MalformedReply)?;
        self.sock.send_to(&f, self.agent)?;
        Ok(())
    }

    fn recv(&self, until: Instant) -> Result<Option<(Result<Message, WireError>, SocketAddr)>, DispatchError> {
        let left = until.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Ok(None);
        }
        self.sock.set_read_timeout(Some(left))?;
        let mut buf = [0u8; 65_536];
        match self.sock.recv_from(&mut buf) {
            Ok((n, peer)) => Ok(Some((decode(&buf[..n]), peer))),
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => Ok(None),
            // ICMP port unreachable surfaces here on Linux; treat as silence.
            Err(e) if e.kind() == std::io::ErrorKind::ConnectionRefused => {
                std::thread::sleep(Duration::from_millis(10).min(left));
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Waits for a HELLO from the agent, probing it with HELLOs.
    pub fn handshake(&mut self, limit: Duration) -> Result<(), DispatchError> {
        let end = Instant::now() + limit;
        while Instant::now() < end {
            self.send(&Message::Hello { app: String::from("controller") })?;
            let tick = (Instant::now() + Duration::from_millis(250)).min(end);
            while let Some((m, peer)) = self.recv(tick)? {
                if let Ok(Message::Hello { app }) = m {
                    self.agent = peer;
                    self.app = Some(app);
                    return Ok(());
                }
            }
        }
        Err(DispatchError::AgentUnreachable)
    }

    /// One dispatch with resends. Fails fast with `AgentUnreachable` once
    /// PINGs go unanswered.
    pub fn dispatch(&mut self, task: &Task) -> Result<TaskResult, DispatchError> {
        let frame = Message::Task(task.clone());
        let mut last = DispatchError::Timeout;
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                let wait = self.config.backoff * (1 << (attempt - 1));
                self.event("retry", format!("task {} attempt {attempt} after {last}", task.id));
                std::thread::sleep(wait);
            }
            self.send(&frame)?;
            let deadline = Instant::now() + self.config.reply_timeout;
            let mut next_ping = Instant::now() + self.config.ping_interval;
            let mut unanswered = 0u32;
            last = loop {
                let now = Instant::now();
                if now >= deadline {
                    break DispatchError::Timeout;
                }
                if now >= next_ping {
                    if unanswered >= self.config.ping_misses {
                        return Err(DispatchError::AgentUnreachable);
                    }
                    self.nonce += 1;
                    self.send(&Message::Ping { nonce: self.nonce })?;
                    unanswered += 1;
                    next_ping = now + self.config.ping_interval;
                }
                match self.recv(next_ping.min(deadline))? {
                    None => {}
                    Some((Ok(Message::Result(r)), _)) if r.id == task.id => return Ok(r),
                    Some((Ok(Message::Pong { .. }), _)) => unanswered = 0,
                    Some((Ok(Message::Error { task: id, msg }), _)) if id == task.id => return Err(DispatchError::Rejected(msg)),
                    Some((Ok(Message::Error { msg, .. }), _)) => break DispatchError::Garbled(msg),
                    Some((Ok(_), _)) => {}
                    Some((Err(WireError::VersionMismatch(v)), _)) => break DispatchError::VersionMismatch(v),
                    Some((Err(e), _)) => break DispatchError::MalformedReply(e),
                }
            };
        }
        Err(last)
    }

    /// Hard-resets the agent through the watchdog and waits for its HELLO.
    /// An unreachable watchdog pauses here until it returns or the pause
    /// limit runs out.
    pub fn recover(&mut self) -> Result<(), DispatchError> {
        let Some(wd) = self.watchdog.clone() else {
            return Err(DispatchError::AgentUnreachable);
        };
        for attempt in 1..=self.config.reset_attempts {
            let paused = Instant::now();
            let mut logged = false;
            loop {
                match wd.reset() {
                    Ok(()) => break,
                    Err(e @ WatchdogError::Unreachable(_)) => {
                        if !logged {
                            self.event("paused", format!("watchdog: {e}"));
                            logged = true;
                        }
                        if paused.elapsed() >= self.config.pause_limit {
                            return Err(DispatchError::WatchdogUnreachable(e.to_string()));
                        }
                        std::thread::sleep(Duration::from_millis(250));
                    }
                    Err(e) => return Err(DispatchError::WatchdogUnreachable(e.to_string())),
                }
            }
            if logged {
                self.event("resumed", String::from("watchdog reachable"));
            }
            self.resets += 1;
            self.event("reset", format!("agent reset via watchdog (attempt {attempt})"));
            match self.wait_hello() {
                Ok(()) => return Ok(()),
                Err(e) => warn!("no HELLO after reset: {e}"),
            }
            if let Ok(s) = wd.status() {
                if s.state == TargetState::Down {
                    self.event("launch-failure", s.error.unwrap_or_default());
                }
            }
        }
        Err(DispatchError::AgentUnreachable)
    }

    fn wait_hello(&mut self) -> Result<(), DispatchError> {
        let end = Instant::now() + self.config.hello_timeout;
        while let Some((m, peer)) = self.recv(end)? {
            if let Ok(Message::Hello { app }) = m {
                self.agent = peer;
                self.app = Some(app);
                return Ok(());
            }
        }
        // The HELLO may have gone to an earlier controller address; probe.
        self.handshake(Duration::from_secs(2))
    }
}

impl Executor for UdpExecutor {
    type Error = DispatchError;

    /// Dispatches; on loss of the agent, resets it and re-dispatches the
    /// same task.
    fn execute(&mut self, task: &Task) -> Result<TaskResult, DispatchError> {
        loop {
            match self.dispatch(task) {
                Ok(r) => return Ok(r),
                Err(e @ (DispatchError::Rejected(_) | DispatchError::Io(_))) => return Err(e),
                Err(e) => {
                    self.event("agent-lost", format!("task {}: {e}", task.id));
                    self.recover()?;
                    self.redispatches += 1;
                    self.event("redispatch", format!("task {}", task.id));
                }
            }
        }
    }
}

impl Transport for UdpExecutor {
    fn take_events(&mut self) -> Vec<EventDoc> {
        std::mem::take(&mut self.events)
    }
}

#[derive(Debug)]
pub enum RunError<E> {
    Executor(E),
    Db(DbError),
}

impl<E: fmt::Display> fmt::Display for RunError<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Executor(e) => write!(f, "{e}"),
            RunError::Db(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub database: PathBuf,
    /// Wall-clock budget; `Some(0)` runs nothing.
    pub timeout: Option<Duration>,
    /// Where each finding's testcase is written.
    pub solutions: Option<PathBuf>,
}

/// Drives `campaign` to completion, saving the database after every step.
/// Stops early on `stop` or the wall-clock budget; the database is saved
/// in every case, including executor failure.
pub fn run_campaign<T: Transport>(
    campaign: &mut Campaign,
    db: &mut CampaignDatabase,
    ex: &mut T,
    opts: &RunOptions,
    stop: &AtomicBool,
) -> Result<(), RunError<T::Error>> {
    let start = Instant::now();
    let mut cursor = campaign.events.len();
    let mut written = campaign.findings.len();
    db.save(&opts.database).map_err(RunError::Db)?;
    let mut outcome = Ok(());
    loop {
        let out_of_time = opts.timeout.is_some_and(|t| start.elapsed() >= t);
        if campaign.done() || out_of_time || stop.load(Ordering::Relaxed) {
            if out_of_time || stop.load(Ordering::Relaxed) {
                db.events.push(EventDoc::now(Some(campaign.iteration), "stopped", String::from(if out_of_time { "time budget" } else { "signal" })));
            }
            break;
        }
        let r = campaign.step(ex);
        db.sync(campaign, &mut cursor);
        db.events.extend(ex.take_events());
        if let Some(dir) = &opts.solutions {
            write_solutions(dir, &campaign.findings[written..]).map_err(RunError::Db)?;
        }
        written = campaign.findings.len();
        if let Err(e) = r {
            db.events.push(EventDoc::now(Some(campaign.iteration), "aborted", format!("{e:?}")));
            outcome = Err(RunError::Executor(e));
            break;
        }
        db.save(&opts.database).map_err(RunError::Db)?;
    }
    db.events.extend(ex.take_events());
    db.save(&opts.database).map_err(RunError::Db)?;
    outcome
}

fn write_solutions(dir: &std::path::Path, findings: &[ufuzz_core::campaign::Finding]) -> Result<(), DbError> {
    for f in findings {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{:016x}", f.id)), &f.code)?;
    }
    Ok(())
}

/// Seeds from a corpus directory: every regular file, in name order.
pub fn load_corpus_dir(dir: &std::path::Path) -> std::io::Result<Vec<Vec<u8>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(std::fs::read).collect()
}

/// Writes seeds one file per seed, named by hex id.
pub fn save_corpus_dir(dir: &std::path::Path, seeds: &[ufuzz_core::mutate::Seed]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in seeds {
        std::fs::write(dir.join(format!("{:016x}", s.id)), &s.bytes)?;
    }
    Ok(())
}
