//! REST supervisor for the agent process. A reset kills the current agent
//! (if any) and relaunches it; the agent counts as up once it prints its
//! `ready` line.
//!
//! `GET /status`, `POST /reset` (202), `POST /boot {"app": ...}` (202).

use std::fmt;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::{Child, Command};
use tokio::sync::oneshot;

use crate::agent::APPS;

pub const BOOT_TIMEOUT: Duration = Duration::from_secs(10);
pub const LAUNCH_ATTEMPTS: u32 = 3;

/// How to start the agent. `--app <name>` is appended at launch.
#[derive(Debug, Clone)]
pub struct LaunchSpec {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub env: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetState {
    Down,
    Booting,
    Up,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Status {
    pub state: TargetState,
    pub uptime_ms: u64,
    pub app: String,
    /// Completed boot sequences.
    pub generation: u64,
    /// Processes spawned, including failed attempts.
    pub launches: u64,
    pub pid: Option<u32>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub enum WatchdogError {
    BindFailure(std::io::Error),
    LaunchFailure(String),
    Unreachable(String),
    Rejected(u16, String),
}

impl fmt::Display for WatchdogError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WatchdogError::BindFailure(e) => write!(f, "cannot bind watchdog: {e}"),
            WatchdogError::LaunchFailure(e) => write!(f, "agent launch failed: {e}"),
            WatchdogError::Unreachable(e) => write!(f, "watchdog unreachable: {e}"),
            WatchdogError::Rejected(c, b) => write!(f, "watchdog answered {c}: {b}"),
        }
    }
}

impl std::error::Error for WatchdogError {}

struct Info {
    state: TargetState,
    app: String,
    up_since: Option<Instant>,
    generation: u64,
    launches: u64,
    pid: Option<u32>,
    error: Option<String>,
}

struct Shared {
    spec: LaunchSpec,
    boot_timeout: Duration,
    info: Mutex<Info>,
    /// Serializes process management; holds the live child.
    proc: tokio::sync::Mutex<Option<Child>>,
}

impl Shared {
    fn status(&self) -> Status {
        let i = self.info.lock().unwrap();
        Status {
            state: i.state,
            uptime_ms: i.up_since.map_or(0, |t| t.elapsed().as_millis() as u64),
            app: i.app.clone(),
            generation: i.generation,
            launches: i.launches,
            pid: i.pid,
            error: i.error.clone(),
        }
    }

    /// Starts a boot unless one is already running. Returns whether a new
    /// boot was started.
    fn request_reset(self: &Arc<Self>, app: Option<String>) -> bool {
        {
            let mut i = self.info.lock().unwrap();
            if let Some(a) = app {
                i.app = a;
            }
            if i.state == TargetState::Booting {
                return false;
            }
            i.state = TargetState::Booting;
            i.up_since = None;
            i.error = None;
        }
        let me = self.clone();
        tokio::spawn(async move { me.reboot().await });
        true
    }

    async fn reboot(self: Arc<Self>) {
        let mut slot = self.proc.lock().await;
        if let Some(old) = slot.take() {
            kill(old).await;
        }
        let app = self.info.lock().unwrap().app.clone();
        let mut last = String::new();
        for attempt in 1..=LAUNCH_ATTEMPTS {
            self.info.lock().unwrap().launches += 1;
            match self.launch(&app).await {
                Ok(child) => {
                    let mut i = self.info.lock().unwrap();
                    i.pid = child.id();
                    i.state = TargetState::Up;
                    i.up_since = Some(Instant::now());
                    i.generation += 1;
                    info!("agent {app} up (pid {:?}, attempt {attempt})", i.pid);
                    *slot = Some(child);
                    return;
                }
                Err(e) => {
                    warn!("launch attempt {attempt} failed: {e}");
                    last = e;
                }
            }
        }
        let mut i = self.info.lock().unwrap();
        i.state = TargetState::Down;
        i.pid = None;
        i.error = Some(WatchdogError::LaunchFailure(last).to_string());
    }

    async fn launch(&self, app: &str) -> Result<Child, String> {
        let mut cmd = Command::new(&self.spec.program);
        cmd.args(&self.spec.args)
            .args(["--app", app])
            .envs(self.spec.env.iter().cloned())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .kill_on_drop(true);
        let mut child = cmd.spawn().map_err(|e| format!("spawn {}: {e}", self.spec.program.display()))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let mut lines = BufReader::new(stdout).lines();
        let ready = tokio::time::timeout(self.boot_timeout, async {
            while let Some(l) = lines.next_line().await.map_err(|e| e.to_string())? {
                if l.starts_with("ready") {
                    return Ok(());
                }
            }
            Err(String::from("agent exited before ready"))
        })
        .await;
        match ready {
            Ok(Ok(())) => {
                tokio::spawn(async move { while let Ok(Some(_)) = lines.next_line().await {} });
                Ok(child)
            }
            Ok(Err(e)) => {
                kill(child).await;
                Err(e)
            }
            Err(_) => {
                kill(child).await;
                Err(format!("no ready line within {:?}", self.boot_timeout))
            }
        }
    }

    /// Marks the target down if the agent died on its own.
    fn reap(&self) {
        let Ok(mut slot) = self.proc.try_lock() else { return };
        if let Some(c) = slot.as_mut() {
            if let Ok(Some(st)) = c.try_wait() {
                info!("agent exited: {st}");
                *slot = None;
                let mut i = self.info.lock().unwrap();
                i.state = TargetState::Down;
                i.up_since = None;
                i.pid = None;
            }
        }
    }
}

async fn kill(mut child: Child) {
    let _ = child.start_kill();
    match child.wait().await {
        Ok(st) => info!("agent {:?} stopped: {st}", child.id()),
        Err(e) => warn!("waiting for agent: {e}"),
    }
}

#[derive(Deserialize)]
struct BootRequest {
    app: String,
}

async fn status(State(s): State<Arc<Shared>>) -> Json<Status> {
    s.reap();
    Json(s.status())
}

async fn reset(State(s): State<Arc<Shared>>) -> (StatusCode, Json<Status>) {
    s.request_reset(None);
    (StatusCode::ACCEPTED, Json(s.status()))
}

async fn boot(State(s): State<Arc<Shared>>, Json(req): Json<BootRequest>) -> Result<(StatusCode, Json<Status>), (StatusCode, String)> {
    if !APPS.contains(&req.app.as_str()) {
        return Err((StatusCode::BAD_REQUEST, format!("unknown app {:?}", req.app)));
    }
    s.request_reset(Some(req.app));
    Ok((StatusCode::ACCEPTED, Json(s.status())))
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/reset", post(reset))
        .route("/boot", post(boot))
        .with_state(shared)
}

#[derive(Debug, Clone)]
pub struct WatchdogConfig {
    pub bind: SocketAddr,
    pub app: String,
    pub boot_timeout: Duration,
}

impl Default for WatchdogConfig {
    fn default() -> Self {
        WatchdogConfig { bind: ([127, 0, 0, 1], 0).into(), app: String::from(APPS[0]), boot_timeout: BOOT_TIMEOUT }
    }
}

/// Serves until `shutdown` resolves, then stops the agent.
pub async fn serve(
    listener: tokio::net::TcpListener,
    spec: LaunchSpec,
    cfg: WatchdogConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let shared = Arc::new(Shared {
        spec,
        boot_timeout: cfg.boot_timeout,
        info: Mutex::new(Info {
            state: TargetState::Down,
            app: cfg.app,
            up_since: None,
            generation: 0,
            launches: 0,
            pid: None,
            error: None,
        }),
        proc: tokio::sync::Mutex::new(None),
    });
    let r = axum::serve(listener, router(shared.clone())).with_graceful_shutdown(shutdown).await;
    if let Some(c) = shared.proc.lock().await.take() {
        kill(c).await;
    }
    r
}

/// A watchdog running on its own thread and runtime; dropping it shuts
/// the service down and kills the agent.
pub struct WatchdogHandle {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl WatchdogHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for WatchdogHandle {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn spawn(spec: LaunchSpec, cfg: WatchdogConfig) -> Result<WatchdogHandle, WatchdogError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(WatchdogError::BindFailure)?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(cfg.bind)).map_err(WatchdogError::BindFailure)?;
    let addr = listener.local_addr().map_err(WatchdogError::BindFailure)?;
    let (stop, rx) = oneshot::channel();
    let thread = std::thread::spawn(move || {
        if let Err(e) = rt.block_on(serve(listener, spec, cfg, async {
            let _ = rx.await;
        })) {
            warn!("watchdog stopped: {e}");
        }
    });
    Ok(WatchdogHandle { addr, stop: Some(stop), thread: Some(thread) })
}

/// Blocking REST client used by the controller.
#[derive(Debug, Clone)]
pub struct WatchdogClient {
    pub base: String,
    agent: ureq::Agent,
}

impl WatchdogClient {
    pub fn new(base: &str) -> WatchdogClient {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(5)))
            .http_status_as_error(false)
            .build()
            .into();
        WatchdogClient { base: base.trim_end_matches('/').to_string(), agent }
    }

    fn check(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>, want: u16) -> Result<ureq::http::Response<ureq::Body>, WatchdogError> {
        let mut r = resp.map_err(|e| WatchdogError::Unreachable(e.to_string()))?;
        if r.status().as_u16() != want {
            let body = r.body_mut().read_to_string().unwrap_or_default();
            return Err(WatchdogError::Rejected(r.status().as_u16(), body));
        }
        Ok(r)
    }

    pub fn status(&self) -> Result<Status, WatchdogError> {
        let mut r = Self::check(self.agent.get(format!("{}/status", self.base)).call(), 200)?;
        r.body_mut().read_json().map_err(|e| WatchdogError::Unreachable(e.to_string()))
    }

    pub fn reset(&self) -> Result<(), WatchdogError> {
        Self::check(self.agent.post(format!("{}/reset", self.base)).send_empty(), 202).map(|_| ())
    }

    pub fn boot(&self, app: &str) -> Result<(), WatchdogError> {
        Self::check(self.agent.post(format!("{}/boot", self.base)).send_json(serde_json::json!({ "app": app })), 202).map(|_| ())
    }

    /// Polls until the target leaves `Booting`.
    pub fn wait_settled(&self, limit: Duration) -> Result<Status, WatchdogError> {
        let start = Instant::now();
        loop {
            let s = self.status()?;
            if s.state != TargetState::Booting || start.elapsed() > limit {
                return Ok(s);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}
