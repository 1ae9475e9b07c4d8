//! UDP framing between controller and agent.
//!
//! Frame: `"UFZ1"`, u8 version, u8 type, u32 payload length, payload,
//! u32 CRC32C over header and payload. All integers little-endian.

use std::fmt;

use ufuzz_core::campaign::{CoverageEntry, Task, TaskResult, Variant};
use ufuzz_core::vm::{ArchState, ExitReason};

pub const MAGIC: &[u8; 4] = b"UFZ1";
pub const VERSION: u8 = 1;
const HEADER: usize = 10;
/// Largest frame that fits a UDP datagram.
pub const MAX_FRAME: usize = 65_507;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    /// Agent boot announcement, carrying its personality.
    Hello { app: String },
    Task(Task),
    Result(TaskResult),
    Ping { nonce: u64 },
    Pong { nonce: u64 },
    Error { task: u64, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireError {
    Truncated,
    BadMagic,
    VersionMismatch(u8),
    UnknownType(u8),
    BadChecksum,
    LengthMismatch,
    Malformed(&'static str),
    TooLarge(usize),
}

impl fmt::Display for WireError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireError::Truncated => f.write_str("truncated frame"),
            WireError::BadMagic => f.write_str("bad magic"),
            WireError::VersionMismatch(v) => write!(f, "protocol version {v}, expected {VERSION}"),
            WireError::UnknownType(t) => write!(f, "unknown message type {t}"),
            WireError::BadChecksum => f.write_str("checksum mismatch"),
            WireError::LengthMismatch => f.write_str("payload length mismatch"),
            WireError::Malformed(what) => write!(f, "malformed payload: {what}"),
            WireError::TooLarge(n) => write!(f, "frame of {n} bytes exceeds a datagram"),
        }
    }
}

impl std::error::Error for WireError {}

impl Message {
    fn kind(&self) -> u8 {
        match self {
            Message::Hello { .. } => 0,
            Message::Task(_) => 1,
            Message::Result(_) => 2,
            Message::Ping { .. } => 3,
            Message::Pong { .. } => 4,
            Message::Error { .. } => 5,
        }
    }
}

fn payload(m: &Message) -> Vec<u8> {
    let mut p = Vec::new();
    match m {
        Message::Hello { app } => p.extend_from_slice(app.as_bytes()),
        Message::Task(t) => {
            p.extend(t.id.to_le_bytes());
            p.push(t.variant as u8);
            p.extend((t.code.len() as u16).to_le_bytes());
            p.extend(&t.code);
            p.push(t.hooks.len() as u8);
            for (slot, src) in &t.hooks {
                p.push(*slot);
                p.extend(src.to_le_bytes());
            }
        }
        Message::Result(r) => {
            p.extend(r.id.to_le_bytes());
            let (code, detail) = r.exit.code();
            p.extend([code, detail]);
            for v in r.state.r {
                p.extend(v.to_le_bytes());
            }
            p.push(r.state.flags);
            p.extend(r.state.ip.to_le_bytes());
            p.extend(r.rw_digest.to_le_bytes());
            p.extend((r.coverage.len() as u16).to_le_bytes());
            for e in &r.coverage {
                p.extend(e.addr.to_le_bytes());
                p.extend(e.count.to_le_bytes());
                p.extend(e.last_ip.to_le_bytes());
            }
            p.extend(r.retired.to_le_bytes());
            p.extend(r.executed_bytes.to_le_bytes());
            p.extend(r.divergence.unwrap_or(u64::MAX).to_le_bytes());
        }
        Message::Ping { nonce } | Message::Pong { nonce } => p.extend(nonce.to_le_bytes()),
        Message::Error { task, msg } => {
            p.extend(task.to_le_bytes());
            p.extend_from_slice(msg.as_bytes());
        }
    }
    p
}

pub fn encode(m: &Message) -> Result<Vec<u8>, WireError> {
    let body = payload(m);
    let mut f = Vec::with_capacity(HEADER + body.len() + 4);
    f.extend_from_slice(MAGIC);
    f.push(VERSION);
    f.push(m.kind());
    f.extend((body.len() as u32).to_le_bytes());
    f.extend(body);
    let crc = crc32c::crc32c(&f);
    f.extend(crc.to_le_bytes());
    if f.len() > MAX_FRAME {
        return Err(WireError::TooLarge(f.len()));
    }
    Ok(f)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let s = self.buf.get(self.pos..self.pos + n).ok_or(WireError::Malformed("short payload"))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
    fn finish(&self) -> Result<(), WireError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(WireError::Malformed("trailing bytes"))
        }
    }
}

fn text(b: &[u8]) -> Result<String, WireError> {
    String::from_utf8(b.to_vec()).map_err(|_| WireError::Malformed("invalid utf-8"))
}

pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
    if frame.len() < HEADER + 4 {
        return Err(WireError::Truncated);
    }
    if &frame[..4] != MAGIC {
        return Err(WireError::BadMagic);
    }
    let len = u32::from_le_bytes(frame[6..10].try_into().unwrap()) as usize;
    if frame.len() != HEADER + len + 4 {
        return Err(WireError::LengthMismatch);
    }
    let (body, crc) = frame.split_at(HEADER + len);
    if crc32c::crc32c(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(WireError::BadChecksum);
    }
    if frame[4] != VERSION {
        return Err(WireError::VersionMismatch(frame[4]));
    }
    let mut r = Reader { buf: &body[HEADER..], pos: 0 };
    let m = match frame[5] {
        0 => Message::Hello { app: text(r.rest())? },
        1 => {
            let id = r.u64()?;
            let variant = Variant::from_u8(r.u8()?).ok_or(WireError::Malformed("variant"))?;
            let n = r.u16()? as usize;
            let code = r.take(n)?.to_vec();
            let h = r.u8()? as usize;
            let mut hooks = Vec::with_capacity(h);
            for _ in 0..h {
                hooks.push((r.u8()?, r.u16()?));
            }
            Message::Task(Task { id, variant, code, hooks })
        }
        2 => {
            let id = r.u64()?;
            let (code, detail) = (r.u8()?, r.u8()?);
            let exit = ExitReason::from_code(code, detail).ok_or(WireError::Malformed("exit reason"))?;
            let mut regs = [0u64; 8];
            for v in &mut regs {
                *v = r.u64()?;
            }
            let state = ArchState { r: regs, flags: r.u8()?, ip: r.u16()? };
            let rw_digest = r.u64()?;
            let n = r.u16()? as usize;
            let mut coverage = Vec::with_capacity(n);
            for _ in 0..n {
                coverage.push(CoverageEntry { addr: r.u16()?, count: r.u16()?, last_ip: r.u64()? });
            }
            let retired = r.u64()?;
            let executed_bytes = r.u64()?;
            let divergence = Some(r.u64()?).filter(|d| *d != u64::MAX);
            Message::Result(TaskResult { id, exit, state, rw_digest, coverage, retired, executed_bytes, divergence })
        }
        3 => Message::Ping { nonce: r.u64()? },
        4 => Message::Pong { nonce: r.u64()? },
        5 => Message::Error { task: r.u64()?, msg: text(r.rest())? },
        t => return Err(WireError::UnknownType(t)),
    };
    r.finish()?;
    Ok(m)
}
