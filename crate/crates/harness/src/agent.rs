//! UDP agent process: executes tasks serially on an in-process engine.
//!
//! The receive loop answers PING itself so liveness is visible while a
//! task runs; tasks go to a single worker thread.

use std::io::Write;
use std::net::{SocketAddr, UdpSocket};
use std::sync::mpsc;
use std::thread;

use log::{debug, info, warn};
use ufuzz_core::campaign::{AgentConfig, LocalAgent, Task};

use crate::wire::{decode, encode, Message};

/// Agent personalities a watchdog can boot.
pub const APPS: [&str; 2] = ["fuzzer_device", "spec_fuzz"];

#[derive(Debug, Clone)]
pub struct AgentOptions {
    pub bind: SocketAddr,
    /// Receives the boot HELLO.
    pub controller: Option<SocketAddr>,
    pub app: String,
    pub config: AgentConfig,
}

/// Binds, announces itself and serves until the socket fails.
pub fn run(opts: AgentOptions) -> std::io::Result<()> {
    let sock = UdpSocket::bind(opts.bind)?;
    let local = sock.local_addr()?;
    let agent = LocalAgent::new(opts.config.clone());
    let (tx, rx) = mpsc::channel::<(Task, SocketAddr)>();
    let out = sock.try_clone()?;
    thread::spawn(move || {
        for (task, peer) in rx {
            let reply = match agent.execute(&task) {
                Ok(r) => Message::Result(r),
                Err(e) => Message::Error { task: task.id, msg: e.to_string() },
            };
            send(&out, &reply, peer);
        }
    });

    println!("ready {local} {}", opts.app);
    std::io::stdout().flush()?;
    if let Some(c) = opts.controller {
        send(&sock, &Message::Hello { app: opts.app.clone() }, c);
    }
    info!("agent {} listening on {local}", opts.app);

    let mut buf = vec![0u8; 65_536];
    loop {
        let (n, peer) = sock.recv_from(&mut buf)?;
        match decode(&buf[..n]) {
            Ok(Message::Task(t)) => {
                debug!("task {} from {peer}", t.id);
                if tx.send((t, peer)).is_err() {
                    return Ok(());
                }
            }
            Ok(Message::Ping { nonce }) => send(&sock, &Message::Pong { nonce }, peer),
            Ok(Message::Hello { .. }) => send(&sock, &Message::Hello { app: opts.app.clone() }, peer),
            Ok(m) => warn!("unexpected message from {peer}: {m:?}"),
            Err(e) => {
                warn!("bad frame from {peer}: {e}");
                send(&sock, &Message::Error { task: u64::MAX, msg: e.to_string() }, peer);
            }
        }
    }
}

fn send(sock: &UdpSocket, m: &Message, to: SocketAddr) {
    match encode(m) {
        Ok(f) => {
            if let Err(e) = sock.send_to(&f, to) {
                warn!("send to {to} failed: {e}");
            }
        }
        Err(e) => warn!("cannot encode reply: {e}"),
    }
}
