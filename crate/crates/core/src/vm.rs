//! The hypervisor analog: runs GISA testcases on the µcode engine in an
//! isolated virtual CPU with typed memory regions and a timeout budget.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::engine::{Engine, EngineEvent, GuestBus, LockupClass, MacroCtx, MemFault, Outcome};
use crate::gisa::{self, CODE_REGION};
use crate::hash::fnv1a;
use crate::rng::stream_value;
use crate::ucode::uop::event;
use crate::ucode::{Reg, UcodeImage};

pub const MEM_SIZE: usize = 0x9000;
pub const RW_BASE: usize = 0x4000;
pub const RO_BASE: usize = 0x8000;
pub const INITIAL_SP: u64 = 0x7FF0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ArchState {
    pub r: [u64; 8],
    /// Bit 0 ZF, bit 1 CF.
    pub flags: u8,
    pub ip: u16,
}

impl ArchState {
    pub fn initial() -> ArchState {
        let mut r = [0; 8];
        r[7] = INITIAL_SP;
        ArchState { r, flags: 0, ip: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NondeterminismSource {
    Cpuinfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitReason {
    Halt,
    Timeout,
    UndefinedOpcode,
    MemoryViolation(MemFault),
    IoAccess(u8),
    NondeterminismIntercept(NondeterminismSource),
    EngineLockup(LockupClass),
}

impl ExitReason {
    /// Wire code and detail byte.
    pub fn code(&self) -> (u8, u8) {
        match *self {
            ExitReason::Halt => (0, 0),
            ExitReason::Timeout => (1, 0),
            ExitReason::UndefinedOpcode => (2, 0),
            ExitReason::MemoryViolation(k) => (
                3,
                match k {
                    MemFault::WriteToExecuteOnly => 0,
                    MemFault::OutOfRange => 1,
                    MemFault::ReadFromExecuteOnly => 2,
                    MemFault::WriteToReadOnly => 3,
                    MemFault::ReturnStackUnderflow => 4,
                    MemFault::ReturnStackOverflow => 5,
                },
            ),
            ExitReason::IoAccess(p) => (4, p),
            ExitReason::NondeterminismIntercept(NondeterminismSource::Cpuinfo) => (5, 0),
            ExitReason::EngineLockup(LockupClass::StableTimeout) => (6, 0),
            ExitReason::EngineLockup(LockupClass::Unstable) => (6, 1),
        }
    }

    pub fn from_code(code: u8, detail: u8) -> Option<ExitReason> {
        Some(match (code, detail) {
            (0, _) => ExitReason::Halt,
            (1, _) => ExitReason::Timeout,
            (2, _) => ExitReason::UndefinedOpcode,
            (3, d) => ExitReason::MemoryViolation(match d {
                0 => MemFault::WriteToExecuteOnly,
                1 => MemFault::OutOfRange,
                2 => MemFault::ReadFromExecuteOnly,
                3 => MemFault::WriteToReadOnly,
                4 => MemFault::ReturnStackUnderflow,
                5 => MemFault::ReturnStackOverflow,
                _ => return None,
            }),
            (4, p) => ExitReason::IoAccess(p),
            (5, 0) => ExitReason::NondeterminismIntercept(NondeterminismSource::Cpuinfo),
            (6, 0) => ExitReason::EngineLockup(LockupClass::StableTimeout),
            (6, 1) => ExitReason::EngineLockup(LockupClass::Unstable),
            _ => return None,
        })
    }
}

impl fmt::Display for ExitReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitReason::Halt => f.write_str("Halt"),
            ExitReason::Timeout => f.write_str("Timeout"),
            ExitReason::UndefinedOpcode => f.write_str("UndefinedOpcode"),
            ExitReason::MemoryViolation(k) => write!(f, "MemoryViolation({})", k.name()),
            ExitReason::IoAccess(p) => write!(f, "IoAccess({p:#x})"),
            ExitReason::NondeterminismIntercept(_) => f.write_str("NondeterminismIntercept(cpuinfo)"),
            ExitReason::EngineLockup(c) => write!(f, "EngineLockup({c:?})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmConfig {
    pub code: Vec<u8>,
    pub max_macro_insns: u64,
    pub max_uops: u64,
    pub rng_seed: u64,
}

impl VmConfig {
    pub fn new(code: Vec<u8>) -> VmConfig {
        VmConfig { code, max_macro_insns: 10_000, max_uops: 1_000_000, rng_seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmError {
    CodeTooLarge(usize),
}

impl fmt::Display for VmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VmError::CodeTooLarge(n) => write!(f, "code of {n} bytes exceeds the execute-only region"),
        }
    }
}

/// One retired macro instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceStep {
    pub index: u64,
    /// Offset the instruction was fetched from.
    pub ip: u16,
    pub len: u8,
    pub state: ArchState,
    pub rw_digest: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub state: ArchState,
    pub exit: ExitReason,
    pub retired: u64,
    pub rw_digest: u64,
    /// Distinct testcase bytes covered by retired instructions.
    pub executed_bytes: u64,
}

/// Deterministic filler for the read-only region (descriptor-table analog).
fn ro_byte(i: usize) -> u8 {
    (stream_value(0x5EED_0000_6D74, (i / 8) as u64) >> ((i % 8) * 8)) as u8
}

struct VmBus<'a> {
    mem: &'a mut [u8],
    seed: u64,
    rng_pos: &'a mut u64,
}

impl VmBus<'_> {
    fn range(addr: u64) -> Result<usize, MemFault> {
        if addr > (MEM_SIZE - 8) as u64 {
            return Err(MemFault::OutOfRange);
        }
        Ok(addr as usize)
    }
}

impl GuestBus for VmBus<'_> {
    fn load(&mut self, addr: u64, checked: bool) -> Result<u64, MemFault> {
        let a = Self::range(addr)?;
        if checked && a < RW_BASE {
            return Err(MemFault::ReadFromExecuteOnly);
        }
        Ok(u64::from_le_bytes(self.mem[a..a + 8].try_into().expect("8 bytes")))
    }

    fn store(&mut self, addr: u64, value: u64, checked: bool) -> Result<u64, MemFault> {
        let a = Self::range(addr)?;
        if checked {
            if a < RW_BASE {
                return Err(MemFault::WriteToExecuteOnly);
            }
            if a + 8 > RO_BASE {
                return Err(MemFault::WriteToReadOnly);
            }
        }
        let old = u64::from_le_bytes(self.mem[a..a + 8].try_into().expect("8 bytes"));
        self.mem[a..a + 8].copy_from_slice(&value.to_le_bytes());
        Ok(old)
    }

    fn restore(&mut self, addr: u64, old: u64) {
        let a = addr as usize;
        self.mem[a..a + 8].copy_from_slice(&old.to_le_bytes());
    }

    fn rng_next(&mut self) -> u64 {
        let v = stream_value(self.seed, *self.rng_pos);
        *self.rng_pos += 1;
        v
    }

    fn rng_position(&self) -> u64 {
        *self.rng_pos
    }

    fn set_rng_position(&mut self, pos: u64) {
        *self.rng_pos = pos;
    }

    fn next_macro(&mut self, ip: u64) -> Option<MacroCtx> {
        let ip = (ip as usize) % CODE_REGION;
        macro_ctx(&self.mem[..CODE_REGION], ip)
    }
}

fn macro_ctx(code: &[u8], ip: usize) -> Option<MacroCtx> {
    let (insn, len) = gisa::decode(code, ip).ok()?;
    let (opd, ops, imm) = insn.operands();
    Some(MacroCtx { ip: ip as u64, len: len as u8, opd, ops, imm, entry: insn.entry() })
}

/// A virtual CPU: µcode engine plus guest memory.
#[derive(Debug, Clone)]
pub struct Vm {
    pub engine: Engine,
    mem: Vec<u8>,
    config: VmConfig,
    rng_pos: u64,
}

impl Vm {
    pub fn new(image: UcodeImage, config: VmConfig) -> Result<Vm, VmError> {
        Vm::with_engine(Engine::new(image), config)
    }

    pub fn with_engine(engine: Engine, config: VmConfig) -> Result<Vm, VmError> {
        let mut vm = Vm { engine, mem: vec![0; MEM_SIZE], config: VmConfig::new(Vec::new()), rng_pos: 0 };
        vm.reset(config)?;
        Ok(vm)
    }

    /// Canonical initial state: zeroed read-write memory, fresh engine state,
    /// the code loaded at offset 0.
    pub fn reset(&mut self, config: VmConfig) -> Result<(), VmError> {
        if config.code.len() > CODE_REGION {
            return Err(VmError::CodeTooLarge(config.code.len()));
        }
        self.mem.iter_mut().for_each(|b| *b = 0);
        self.mem[..config.code.len()].copy_from_slice(&config.code);
        for i in RO_BASE..MEM_SIZE {
            self.mem[i] = ro_byte(i - RO_BASE);
        }
        self.engine.reset_state();
        self.engine.state.regs[Reg::gpr(7).0 as usize] = INITIAL_SP;
        self.rng_pos = 0;
        self.config = config;
        Ok(())
    }

    pub fn config(&self) -> &VmConfig {
        &self.config
    }

    pub fn arch_state(&self, ip: u16) -> ArchState {
        let mut r = [0u64; 8];
        r.copy_from_slice(&self.engine.state.regs[16..24]);
        ArchState { r, flags: (self.engine.state.regs[Reg::FLAGS.0 as usize] & 3) as u8, ip }
    }

    pub fn rw_digest(&self) -> u64 {
        fnv1a(&self.mem[RW_BASE..RO_BASE])
    }

    pub fn ro_digest(&self) -> u64 {
        fnv1a(&self.mem[RO_BASE..])
    }

    pub fn memory(&self) -> &[u8] {
        &self.mem
    }

    /// Runs the loaded testcase from the current state.
    pub fn run(&mut self) -> RunSummary {
        self.run_observed(&mut |_| {}, false)
    }

    /// Runs, reporting every retired instruction to `observe`. Per-step
    /// read-write digests are computed only when `digest_steps` is set.
    pub fn run_observed(&mut self, observe: &mut dyn FnMut(&TraceStep), digest_steps: bool) -> RunSummary {
        let code_len = self.config.code.len();
        let mut touched = vec![false; code_len];
        let mut ip: u16 = 0;
        let mut retired = 0u64;
        let mut uops_left = self.config.max_uops;
        let seed = self.config.rng_seed;
        let exit = loop {
            if retired >= self.config.max_macro_insns {
                break ExitReason::Timeout;
            }
            let ctx = macro_ctx(&self.mem[..CODE_REGION], ip as usize).expect("ip inside code region");
            let mut bus = VmBus { mem: &mut self.mem, seed, rng_pos: &mut self.rng_pos };
            let res = match self.engine.run_macro(ctx, &mut bus, uops_left) {
                Ok(r) => r,
                // Shipped and instrumented images only jump to valid
                // addresses; a broken image locks the engine.
                Err(_) => break ExitReason::EngineLockup(LockupClass::StableTimeout),
            };
            uops_left -= res.charged.min(uops_left);
            let retire = match res.outcome {
                Outcome::Uend => None,
                Outcome::BudgetExhausted => break ExitReason::Timeout,
                Outcome::Lockup(c) => break ExitReason::EngineLockup(c),
                Outcome::Event(EngineEvent::Fault(f)) => break ExitReason::MemoryViolation(f),
                Outcome::Event(EngineEvent::Signal { code, arg }) => match code {
                    event::HALT => Some(ExitReason::Halt),
                    event::IO => break ExitReason::IoAccess(arg as u8),
                    event::CPUINFO => break ExitReason::NondeterminismIntercept(NondeterminismSource::Cpuinfo),
                    _ => break ExitReason::UndefinedOpcode,
                },
            };
            for b in touched.iter_mut().skip(ip as usize).take(ctx.len as usize) {
                *b = true;
            }
            let nip = self.engine.state.regs[Reg::NIP.0 as usize];
            let next_ip = (nip % CODE_REGION as u64) as u16;
            let step = TraceStep {
                index: retired,
                ip,
                len: ctx.len,
                state: self.arch_state(next_ip),
                rw_digest: if digest_steps { self.rw_digest() } else { 0 },
            };
            retired += 1;
            ip = next_ip;
            observe(&step);
            if let Some(exit) = retire {
                break exit;
            }
        };
        RunSummary {
            state: self.arch_state(ip),
            exit,
            retired,
            rw_digest: self.rw_digest(),
            executed_bytes: touched.iter().filter(|b| **b).count() as u64,
        }
    }

    /// Snapshot after each retired instruction.
    pub fn trace_run(&mut self) -> (Vec<TraceStep>, RunSummary) {
        let mut steps = Vec::new();
        let summary = self.run_observed(&mut |s| steps.push(*s), true);
        (steps, summary)
    }
}

/// Convenience: fresh VM on `image`, run `config` once.
pub fn run_testcase(image: &UcodeImage, config: VmConfig) -> Result<RunSummary, VmError> {
    let mut vm = Vm::new(image.clone(), config)?;
    Ok(vm.run())
}
