//! Dual execution of a testcase and its serialized twin, and the
//! comparison that flags architectural divergence.

use alloc::vec::Vec;
use core::fmt;

use crate::serialize::{serialize, RelocationMap, SerializeError, SerializedProgram, UnmappedOffset};
use crate::ucode::UcodeImage;
use crate::engine::Engine;
use crate::gisa::CODE_REGION;
use crate::vm::{ExitReason, RunSummary, TraceStep, Vm, VmConfig};

/// What is compared between P and Q: registers, flags, the instruction
/// position in original coordinates, read-write memory and the exit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComparisonState {
    pub r: [u64; 8],
    pub flags: u8,
    pub ip: u16,
    pub rw_digest: u64,
    pub exit: ExitReason,
}

impl ComparisonState {
    pub fn of_original(s: &RunSummary) -> ComparisonState {
        ComparisonState { r: s.state.r, flags: s.state.flags, ip: s.state.ip, rw_digest: s.rw_digest, exit: s.exit }
    }

    /// Q's state with its ip pulled back through the relocation map. After
    /// a HLT the ip is one past the halting instruction on both sides.
    pub fn of_serialized(s: &RunSummary, map: &RelocationMap) -> Result<ComparisonState, UnmappedOffset> {
        let ip = match s.exit {
            ExitReason::Halt => (map.map_ip(s.state.ip.wrapping_sub(1) % CODE_REGION as u16)? + 1) % CODE_REGION as u16,
            _ => map.map_ip(s.state.ip)?,
        };
        Ok(ComparisonState { ip, ..ComparisonState::of_original(s) })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Equal,
    /// Budget exhaustion on either side is layout-sensitive; not compared.
    SkippedTimeout,
    Diverged { p: ComparisonState, q: Option<ComparisonState> },
}

/// Compares final states. An unmappable Q ip is itself a divergence.
pub fn early_bug_eval(p: &RunSummary, q: &RunSummary, map: &RelocationMap) -> Verdict {
    if p.exit == ExitReason::Timeout || q.exit == ExitReason::Timeout {
        return Verdict::SkippedTimeout;
    }
    let ps = ComparisonState::of_original(p);
    match ComparisonState::of_serialized(q, map) {
        Ok(qs) if qs == ps => Verdict::Equal,
        Ok(qs) => Verdict::Diverged { p: ps, q: Some(qs) },
        Err(_) => Verdict::Diverged { p: ps, q: None },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceError {
    TraceAlignmentLost { q_ip: u16 },
    NoDivergence,
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceError::TraceAlignmentLost { q_ip } => write!(f, "serialized trace left mapped code at {q_ip:#x}"),
            TraceError::NoDivergence => f.write_str("traces do not diverge"),
        }
    }
}

/// Serialized offsets that are FENCE padding rather than original instructions.
fn is_padding(code: &[u8], ip: u16) -> bool {
    code.get(ip as usize) == Some(&0x02)
}

/// Lock-step walk of both traces; returns the index of the first original
/// instruction whose post-state differs (or whose twin is missing).
pub fn trace_divergence(p: &[TraceStep], q: &[TraceStep], sp: &SerializedProgram) -> Result<u64, TraceError> {
    let mut qi = q.iter();
    for ps in p {
        let qs = loop {
            match qi.next() {
                None => return Ok(ps.index),
                Some(s) => match sp.map.map_ip(s.ip) {
                    Ok(_) => break s,
                    Err(_) if is_padding(&sp.code, s.ip) => continue,
                    Err(_) => return Err(TraceError::TraceAlignmentLost { q_ip: s.ip }),
                },
            }
        };
        let same = sp.map.map_ip(qs.ip) == Ok(ps.ip)
            && qs.state.r == ps.state.r
            && qs.state.flags == ps.state.flags
            && qs.rw_digest == ps.rw_digest;
        if !same {
            return Ok(ps.index);
        }
    }
    // P ended; any further mapped instruction in Q is a divergence.
    for s in qi {
        if sp.map.map_ip(s.ip).is_ok() {
            return Ok(p.len() as u64);
        }
    }
    Err(TraceError::NoDivergence)
}

/// Configuration of the serialized run: enough headroom for the added
/// FENCEs and the join HLT.
pub fn serialized_config(p: &VmConfig, code: Vec<u8>) -> VmConfig {
    VmConfig {
        code,
        max_macro_insns: p.max_macro_insns.saturating_mul(2).saturating_add(2),
        max_uops: p.max_uops.saturating_mul(4),
        rng_seed: p.rng_seed,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairOutcome {
    pub p: RunSummary,
    pub q: RunSummary,
    pub serialized: SerializedProgram,
    pub verdict: Verdict,
}

/// Runs P and Q on fresh copies of `engine` (same image, hooks and fault
/// model, reset state) and compares them.
pub fn run_pair(engine: &Engine, config: &VmConfig) -> Result<PairOutcome, SerializeError> {
    let serialized = serialize(&config.code)?;
    let qcfg = serialized_config(config, serialized.code.clone());
    let mut vp = Vm::with_engine(engine.clone(), config.clone()).map_err(|_| SerializeError::CapacityExceeded(config.code.len()))?;
    let p = vp.run();
    let mut vq = Vm::with_engine(engine.clone(), qcfg).map_err(|_| SerializeError::CapacityExceeded(serialized.code.len()))?;
    let q = vq.run();
    let verdict = early_bug_eval(&p, &q, &serialized.map);
    Ok(PairOutcome { p, q, serialized, verdict })
}

/// Replays both sides with per-instruction snapshots and localizes the
/// first divergent original instruction.
pub fn localize(engine: &Engine, config: &VmConfig, sp: &SerializedProgram) -> Result<u64, TraceError> {
    let mut vp = Vm::with_engine(engine.clone(), config.clone()).expect("validated config");
    let (pt, _) = vp.trace_run();
    let mut vq = Vm::with_engine(engine.clone(), serialized_config(config, sp.code.clone())).expect("serialized fits");
    let (qt, _) = vq.trace_run();
    trace_divergence(&pt, &qt, sp)
}

/// Plain correct-mode pair on `image`.
pub fn run_pair_on(image: &UcodeImage, config: &VmConfig) -> Result<PairOutcome, SerializeError> {
    run_pair(&Engine::new(image.clone()), config)
}
