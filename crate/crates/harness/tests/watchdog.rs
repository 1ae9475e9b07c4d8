use std::net::UdpSocket;
use std::path::PathBuf;
use std::time::Duration;

use ufuzz::watchdog::{spawn, LaunchSpec, TargetState, WatchdogClient, WatchdogConfig};

fn agent_spec() -> LaunchSpec {
    let port = UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    LaunchSpec {
        program: PathBuf::from(env!("CARGO_BIN_EXE_ufuzz")),
        args: vec!["agent".into(), "--bind".into(), port.to_string()],
        env: Vec::new(),
    }
}

fn alive(pid: u32) -> bool {
    // Zombies still have a /proc entry; only count runnable processes.
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(s) => !s.split(") ").nth(1).is_some_and(|r| r.starts_with('Z')),
        Err(_) => false,
    }
}

fn settle(c: &WatchdogClient) -> ufuzz::watchdog::Status {
    c.wait_settled(Duration::from_secs(20)).unwrap()
}

#[test]
fn fresh_service_is_down_and_reset_boots() {
    let wd = spawn(agent_spec(), WatchdogConfig::default()).unwrap();
    let c = WatchdogClient::new(&wd.url());
    let s = c.status().unwrap();
    assert_eq!(s.state, TargetState::Down);
    assert_eq!(s.uptime_ms, 0);
    c.reset().unwrap();
    let s = settle(&c);
    assert_eq!(s.state, TargetState::Up);
    assert_eq!(s.generation, 1);
    assert!(alive(s.pid.unwrap()));
}

#[test]
fn concurrent_resets_coalesce() {
    let wd = spawn(agent_spec(), WatchdogConfig::default()).unwrap();
    let c = WatchdogClient::new(&wd.url());
    let hs: Vec<_> = (0..8)
        .map(|_| {
            let c = c.clone();
            std::thread::spawn(move || c.reset().unwrap())
        })
        .collect();
    hs.into_iter().for_each(|h| h.join().unwrap());
    let s = settle(&c);
    assert_eq!(s.state, TargetState::Up);
    assert_eq!((s.generation, s.launches), (1, 1));
}

#[test]
fn boot_selects_app_and_rejects_unknown() {
    let wd = spawn(agent_spec(), WatchdogConfig::default()).unwrap();
    let c = WatchdogClient::new(&wd.url());
    c.boot("spec_fuzz").unwrap();
    let s = settle(&c);
    assert_eq!((s.state, s.app.as_str()), (TargetState::Up, "spec_fuzz"));
    assert!(c.boot("minesweeper").is_err());
}

#[test]
fn launch_failure_after_three_attempts() {
    let spec = LaunchSpec { program: PathBuf::from("/bin/sleep"), args: vec!["30".into()], env: Vec::new() };
    let cfg = WatchdogConfig { boot_timeout: Duration::from_millis(200), ..WatchdogConfig::default() };
    let wd = spawn(spec, cfg).unwrap();
    let c = WatchdogClient::new(&wd.url());
    c.reset().unwrap();
    let s = settle(&c);
    assert_eq!(s.state, TargetState::Down);
    assert_eq!(s.launches, 3);
    assert!(s.error.unwrap().contains("launch failed"));
}

#[test]
fn missing_program_is_a_launch_failure() {
    let spec = LaunchSpec { program: PathBuf::from("/nonexistent/agent"), args: Vec::new(), env: Vec::new() };
    let wd = spawn(spec, WatchdogConfig::default()).unwrap();
    let c = WatchdogClient::new(&wd.url());
    c.reset().unwrap();
    assert_eq!(settle(&c).state, TargetState::Down);
}

#[test]
fn hung_agent_is_replaced() {
    let wd = spawn(agent_spec(), WatchdogConfig::default()).unwrap();
    let c = WatchdogClient::new(&wd.url());
    c.reset().unwrap();
    let old = settle(&c).pid.unwrap();
    std::process::Command::new("kill").args(["-STOP", &old.to_string()]).status().unwrap();
    c.reset().unwrap();
    let s = settle(&c);
    assert_eq!(s.state, TargetState::Up);
    assert_ne!(s.pid.unwrap(), old);
    assert!(!alive(old));
}

#[test]
fn crashed_agent_reads_as_down() {
    let wd = spawn(agent_spec(), WatchdogConfig::default()).unwrap();
    let c = WatchdogClient::new(&wd.url());
    c.reset().unwrap();
    let pid = settle(&c).pid.unwrap();
    std::process::Command::new("kill").args(["-KILL", &pid.to_string()]).status().unwrap();
    std::thread::sleep(Duration::from_millis(200));
    assert_eq!(c.status().unwrap().state, TargetState::Down);
}

#[test]
fn no_orphans_after_reset_cycles() {
    let mut pids = Vec::new();
    {
        let wd = spawn(agent_spec(), WatchdogConfig::default()).unwrap();
        let c = WatchdogClient::new(&wd.url());
        for _ in 0..20 {
            c.reset().unwrap();
            let s = settle(&c);
            assert_eq!(s.state, TargetState::Up);
            pids.push(s.pid.unwrap());
        }
        for p in &pids[..pids.len() - 1] {
            assert!(!alive(*p), "agent {p} survived its reset");
        }
    }
    // Dropping the service stops the last agent too.
    assert!(!alive(*pids.last().unwrap()));
}
