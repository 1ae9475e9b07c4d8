//! Triad execution with hook redirection, CRBUS, staging buffer, coverage
//! RAM, and a speculative-window model with rollback and fault injection.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::hash::Fnv1a;
use crate::rng::{derive_rng, stream_value};
use crate::ucode::uop::{OperandB, IMM_VALUE_MASK};
use crate::ucode::{MicroOp, Opcode, Reg, UcodeAddress, UcodeImage, ADDR_SPACE, RAM_BASE};

pub const NUM_HOOKS: usize = 16;
pub const CRBUS_HOOK_DISABLE: u16 = 0x692;
pub const PORT_HOOK_BASE: u32 = 0xF00;
pub const PORT_PATCH_BASE: u32 = 0xE00;
pub const COV_RAM_SIZE: usize = 0x4000;
pub const RETURN_STACK_DEPTH: usize = 64;
pub const MS_ENTRY: &str = "MS_DECODE.MS_ENTRY";
/// Hard cap on all fetches, as a multiple of the ROM-fetch budget.
pub const FETCH_CAP_FACTOR: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct HookEntry {
    pub enabled: bool,
    pub src: u16,
    pub dst: u16,
}

impl HookEntry {
    /// Port encoding: bits 0-14 src, bits 16-30 dst, bit 32 enabled.
    pub fn pack(&self) -> u64 {
        self.src as u64 | (self.dst as u64) << 16 | (self.enabled as u64) << 32
    }

    pub fn unpack(v: u64) -> HookEntry {
        HookEntry {
            src: (v & 0x7FFF) as u16,
            dst: ((v >> 16) & 0x7FFF) as u16,
            enabled: v >> 32 & 1 != 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct HookTable {
    pub entries: [HookEntry; NUM_HOOKS],
}

impl HookTable {
    /// Redirection for a fetch. The odd partner of an enabled source follows
    /// its even source to `dst + 1`.
    pub fn lookup(&self, active: bool, addr: UcodeAddress) -> UcodeAddress {
        if !active {
            return addr;
        }
        let a = addr.value();
        for e in self.entries.iter().filter(|e| e.enabled) {
            if a == e.src {
                return UcodeAddress::new_unchecked(e.dst);
            }
            if a == e.src + 1 {
                return UcodeAddress::new_unchecked(e.dst + 1);
            }
        }
        addr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemFault {
    ReadFromExecuteOnly,
    WriteToExecuteOnly,
    WriteToReadOnly,
    OutOfRange,
    ReturnStackUnderflow,
    ReturnStackOverflow,
}

impl MemFault {
    pub fn name(&self) -> &'static str {
        match self {
            MemFault::ReadFromExecuteOnly => "read-from-execute-only",
            MemFault::WriteToExecuteOnly => "write-to-execute-only",
            MemFault::WriteToReadOnly => "write-to-read-only",
            MemFault::OutOfRange => "out-of-range",
            MemFault::ReturnStackUnderflow => "return-stack-underflow",
            MemFault::ReturnStackOverflow => "return-stack-overflow",
        }
    }
}

/// Decoded macro instruction context seen by its µcode routine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct MacroCtx {
    pub ip: u64,
    pub len: u8,
    /// Guest register index reached through `opd`.
    pub opd: u8,
    /// Guest register index reached through `ops`.
    pub ops: u8,
    pub imm: u64,
    pub entry: u16,
}

/// Guest-side services used by µops.
pub trait GuestBus {
    fn load(&mut self, addr: u64, checked: bool) -> Result<u64, MemFault>;
    /// Stores and returns the previous value.
    fn store(&mut self, addr: u64, value: u64, checked: bool) -> Result<u64, MemFault>;
    /// Undoes a store; only called with values previously returned by `store`.
    fn restore(&mut self, addr: u64, old: u64);
    fn rng_next(&mut self) -> u64;
    fn rng_position(&self) -> u64;
    fn set_rng_position(&mut self, pos: u64);
    /// Decodes the macro instruction at `ip` for speculative dispatch.
    fn next_macro(&mut self, ip: u64) -> Option<MacroCtx>;
}

/// Bus with no guest attached: loads return 0, stores vanish.
#[derive(Debug, Clone, Default)]
pub struct NullBus {
    pub seed: u64,
    pub pos: u64,
}

impl GuestBus for NullBus {
    fn load(&mut self, _addr: u64, _checked: bool) -> Result<u64, MemFault> {
        Ok(0)
    }
    fn store(&mut self, _addr: u64, _value: u64, _checked: bool) -> Result<u64, MemFault> {
        Ok(0)
    }
    fn restore(&mut self, _addr: u64, _old: u64) {}
    fn rng_next(&mut self) -> u64 {
        let v = stream_value(self.seed, self.pos);
        self.pos += 1;
        v
    }
    fn rng_position(&self) -> u64 {
        self.pos
    }
    fn set_rng_position(&mut self, pos: u64) {
        self.pos = pos;
    }
    fn next_macro(&mut self, _ip: u64) -> Option<MacroCtx> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LockupClass {
    StableTimeout,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lockup {
    None,
    StableTimeout,
    /// Fires with probability `num / den`.
    Unstable { num: u32, den: u32 },
}

/// µop predicate; every present field must match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct UopMatch {
    pub word: Option<u64>,
    pub opcode: Option<u16>,
    /// Effective CRBUS address of a CRBUS write.
    pub crbus_addr: Option<u16>,
}

impl UopMatch {
    pub fn word(w: MicroOp) -> UopMatch {
        UopMatch { word: Some(w.raw()), ..UopMatch::default() }
    }

    pub fn opcode(op: Opcode) -> UopMatch {
        UopMatch { opcode: Some(op as u16), ..UopMatch::default() }
    }

    pub fn crbus(addr: u16) -> UopMatch {
        UopMatch { crbus_addr: Some(addr), ..UopMatch::default() }
    }

    fn matches(&self, w: MicroOp, crbus_addr: Option<u16>) -> bool {
        self.word.is_none_or(|x| x == w.raw())
            && self.opcode.is_none_or(|x| x == w.opcode_bits())
            && self.crbus_addr.is_none_or(|x| crbus_addr == Some(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FaultRule {
    pub matcher: UopMatch,
    pub persists_through_rollback: bool,
    pub lockup: Lockup,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultModel {
    pub rules: Vec<FaultRule>,
    pub spec_window_uops: u32,
    pub spec_stops_at_ms_dispatch: bool,
    pub perf_counts_speculative: bool,
}

impl Default for FaultModel {
    fn default() -> Self {
        FaultModel {
            rules: Vec::new(),
            spec_window_uops: 8,
            spec_stops_at_ms_dispatch: false,
            perf_counts_speculative: false,
        }
    }
}

impl FaultModel {
    pub fn correct() -> FaultModel {
        FaultModel::default()
    }

    pub fn with_rule(mut self, rule: FaultRule) -> FaultModel {
        self.rules.push(rule);
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.spec_window_uops == 0 {
            return Err(EngineError::InvalidFaultModel);
        }
        for r in &self.rules {
            if let Lockup::Unstable { num, den } = r.lockup {
                if den == 0 || num > den {
                    return Err(EngineError::InvalidFaultModel);
                }
            }
        }
        Ok(())
    }

    fn rule_for(&self, w: MicroOp, crbus_addr: Option<u16>) -> Option<&FaultRule> {
        self.rules.iter().find(|r| r.matcher.matches(w, crbus_addr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineError {
    InvalidAddress(u32),
    UnknownPort(u32),
    PortRejected(u32),
    InvalidFaultModel,
}

impl fmt::Display for EngineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineError::InvalidAddress(a) => write!(f, "invalid µcode address {a:#x}"),
            EngineError::UnknownPort(p) => write!(f, "unknown control port {p:#x}"),
            EngineError::PortRejected(p) => write!(f, "control port {p:#x} rejected the value"),
            EngineError::InvalidFaultModel => f.write_str("invalid fault model"),
        }
    }
}

/// Signals raised by µcode towards the guest layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EngineEvent {
    Signal { code: u32, arg: u64 },
    Fault(MemFault),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Uend,
    Lockup(LockupClass),
    BudgetExhausted,
    Event(EngineEvent),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UcodeTrace {
    pub executed: Vec<(UcodeAddress, bool)>,
    pub rolled_back: Vec<UcodeAddress>,
}

impl UcodeTrace {
    pub fn count(&self, addr: UcodeAddress) -> usize {
        self.executed.iter().filter(|(a, s)| *a == addr && !*s).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunResult {
    pub outcome: Outcome,
    /// ROM fetches charged against the budget.
    pub charged: u64,
}

pub const NUM_SEGMENTS: usize = 10;
pub const NUM_SEG_FIELDS: usize = 4;

/// Architectural µcode engine state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineState {
    pub regs: [u64; 64],
    pub ctx: MacroCtx,
    pub staging: BTreeMap<u16, u64>,
    pub crbus: BTreeMap<u16, u64>,
    pub seg: [[u64; NUM_SEG_FIELDS]; NUM_SEGMENTS],
    pub perf: BTreeMap<&'static str, u64>,
    pub return_stack: Vec<u64>,
}

impl Default for EngineState {
    fn default() -> Self {
        EngineState {
            regs: [0; 64],
            ctx: MacroCtx::default(),
            staging: BTreeMap::new(),
            crbus: BTreeMap::new(),
            seg: [[0; NUM_SEG_FIELDS]; NUM_SEGMENTS],
            perf: BTreeMap::new(),
            return_stack: Vec::new(),
        }
    }
}

impl EngineState {
    pub fn hook_table_active(&self) -> bool {
        self.crbus.get(&CRBUS_HOOK_DISABLE).copied().unwrap_or(0) & 1 == 0
    }

    pub fn gdt_base(&self) -> u64 {
        self.seg[crate::ucode::uop::SEG_GDT as usize][crate::ucode::uop::FIELD_BASE as usize]
    }

    pub fn perf(&self, name: &str) -> u64 {
        self.perf.get(name).copied().unwrap_or(0)
    }

    pub fn read(&self, r: Reg) -> u64 {
        match r.0 {
            24 => self.ctx.ip,
            26 => self.regs[16 + (self.ctx.opd & 7) as usize],
            27 => self.regs[16 + (self.ctx.ops & 7) as usize],
            28 => self.ctx.imm,
            63 => 0,
            i => self.regs[i as usize],
        }
    }

    pub fn write(&mut self, r: Reg, v: u64) {
        match r.0 {
            24 | 28 | 63 => {}
            26 => self.regs[16 + (self.ctx.opd & 7) as usize] = v,
            27 => self.regs[16 + (self.ctx.ops & 7) as usize] = v,
            i => self.regs[i as usize] = v,
        }
    }

    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        for r in self.regs {
            h.write_u64(r);
        }
        let c = &self.ctx;
        for v in [c.ip, c.len as u64, c.opd as u64, c.ops as u64, c.imm, c.entry as u64] {
            h.write_u64(v);
        }
        for (tag, map) in [(1u64, &self.staging), (2, &self.crbus)] {
            h.write_u64(tag);
            for (k, v) in map {
                h.write_u64(*k as u64);
                h.write_u64(*v);
            }
        }
        for row in &self.seg {
            for v in row {
                h.write_u64(*v);
            }
        }
        for (k, v) in &self.perf {
            h.write(k.as_bytes());
            h.write_u64(*v);
        }
        h.write_u64(self.return_stack.len() as u64);
        for v in &self.return_stack {
            h.write_u64(*v);
        }
        h.finish()
    }
}

/// Undo log entry for speculative side effects.
#[derive(Debug, Clone)]
enum Undo {
    Staging(u16, Option<u64>),
    Crbus(u16, Option<u64>),
    Seg(usize, usize, u64),
    Perf(&'static str, Option<u64>),
    Cov(usize, u8),
    GuestStore(u64, u64),
    Rng(u64),
    RetStack(Vec<u64>),
}

enum Flow {
    Next,
    Jump(u16),
    /// Conditional branch resolved taken against the not-taken prediction.
    Mispredict(u16),
    Stop(EngineEvent),
}

/// Journal context while executing a µop.
struct Journal<'j> {
    log: Option<&'j mut Vec<Undo>>,
}

impl Journal<'_> {
    fn push(&mut self, u: impl FnOnce() -> Undo) {
        if let Some(log) = self.log.as_mut() {
            log.push(u());
        }
    }
}

#[derive(Debug, Clone)]
pub struct Engine {
    pub image: UcodeImage,
    pub hooks: HookTable,
    pub state: EngineState,
    pub cov: Vec<u8>,
    pub fault: FaultModel,
    pub trace_enabled: bool,
    pub trace: UcodeTrace,
    lockup_seed: u64,
    lockup_rng: ChaCha8Rng,
}

impl Engine {
    pub fn new(image: UcodeImage) -> Engine {
        Engine {
            image,
            hooks: HookTable::default(),
            state: EngineState::default(),
            cov: vec![0; COV_RAM_SIZE],
            fault: FaultModel::default(),
            trace_enabled: false,
            trace: UcodeTrace::default(),
            lockup_seed: 0,
            lockup_rng: derive_rng(0, 0),
        }
    }

    /// Reseeds the generator behind `Unstable` lockups for one trial.
    pub fn set_trial(&mut self, seed: u64, trial: u64) {
        self.lockup_seed = seed;
        self.lockup_rng = derive_rng(seed, trial);
    }

    /// Restores CRBUS, staging, segment cache, perf counters and registers.
    /// Hook registers and patch RAM belong to the control plane and stay.
    pub fn reset_state(&mut self) {
        self.state = EngineState::default();
        self.trace = UcodeTrace::default();
    }

    pub fn clear_coverage(&mut self) {
        self.cov.iter_mut().for_each(|b| *b = 0);
    }

    pub fn resolve(&self, addr: UcodeAddress) -> UcodeAddress {
        self.hooks.lookup(self.state.hook_table_active(), addr)
    }

    /// Debug-port write: CRBUS 0x692, hook registers, or patch-RAM words.
    pub fn write_control_port(&mut self, port: u32, value: u64) -> Result<(), EngineError> {
        if port == CRBUS_HOOK_DISABLE as u32 {
            self.state.crbus.insert(CRBUS_HOOK_DISABLE, value);
            return Ok(());
        }
        if (PORT_HOOK_BASE..PORT_HOOK_BASE + NUM_HOOKS as u32).contains(&port) {
            let i = (port - PORT_HOOK_BASE) as usize;
            let e = HookEntry::unpack(value);
            if value >> 33 != 0 || value & 0x8000_8000 != 0 {
                return Err(EngineError::PortRejected(port));
            }
            if e.enabled {
                let src = UcodeAddress::new(e.src as u32).map_err(|_| EngineError::PortRejected(port))?;
                let dst = UcodeAddress::new(e.dst as u32).map_err(|_| EngineError::PortRejected(port))?;
                if !src.is_hookable() || !dst.is_ram() || dst.slot() == 2 {
                    return Err(EngineError::PortRejected(port));
                }
            }
            self.hooks.entries[i] = e;
            return Ok(());
        }
        if (PORT_PATCH_BASE..PORT_PATCH_BASE + 256).contains(&port) {
            let lane = value >> 48;
            if lane > 3 {
                return Err(EngineError::PortRejected(port));
            }
            let addr = RAM_BASE + ((port - PORT_PATCH_BASE) as u16) * 4 + lane as u16;
            return self
                .image
                .set_word(addr, value & crate::ucode::uop::UOP_MASK)
                .map_err(|_| EngineError::PortRejected(port));
        }
        Err(EngineError::UnknownPort(port))
    }

    /// Port value writing `word` into lane `lane` of a patch-RAM triad.
    pub fn patch_word_value(lane: u16, word: u64) -> u64 {
        (lane as u64) << 48 | word
    }

    /// Digest of the control plane: hook registers, CRBUS and patch RAM.
    pub fn control_digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        for e in &self.hooks.entries {
            h.write_u64(e.pack());
        }
        for (k, v) in &self.state.crbus {
            h.write_u64(*k as u64);
            h.write_u64(*v);
        }
        for (base, t) in self.image.ram() {
            h.write_u64(*base as u64);
            for w in t.to_words() {
                h.write_u64(w);
            }
        }
        h.finish()
    }

    pub fn cov_read(&self, off: usize, len: usize) -> u64 {
        let mut v = 0u64;
        for i in 0..len {
            v |= (self.cov[(off + i) % COV_RAM_SIZE] as u64) << (8 * i);
        }
        v
    }

    fn cov_write(&mut self, off: usize, len: usize, v: u64, j: &mut Journal) {
        for i in 0..len {
            let a = (off + i) % COV_RAM_SIZE;
            let old = self.cov[a];
            j.push(|| Undo::Cov(a, old));
            self.cov[a] = (v >> (8 * i)) as u8;
        }
    }

    fn operand_b(&self, w: MicroOp) -> u64 {
        match w.operand_b() {
            OperandB::Imm(v) => v as u64,
            OperandB::Reg(r) => self.state.read(r),
        }
    }

    fn crbus_addr(&self, w: MicroOp) -> u16 {
        (self.operand_b(w) & 0xFFF) as u16
    }

    fn bump_perf(&mut self, name: &'static str, j: &mut Journal) {
        let old = self.state.perf.get(name).copied();
        j.push(|| Undo::Perf(name, old));
        *self.state.perf.entry(name).or_insert(0) += 1;
    }

    fn set_crbus(&mut self, addr: u16, v: u64, j: &mut Journal) {
        let old = self.state.crbus.insert(addr, v);
        j.push(|| Undo::Crbus(addr, old));
    }

    /// Executes one µop. `pc` is the logical (pre-redirection) address.
    fn exec(
        &mut self,
        w: MicroOp,
        pc: UcodeAddress,
        bus: &mut dyn GuestBus,
        j: &mut Journal,
        perf_journal: bool,
    ) -> Flow {
        let Some(op) = w.opcode() else { return Flow::Next };
        let dst = w.dst();
        let src = self.state.read(w.src());
        let b = self.operand_b(w);
        match op {
            Opcode::Nop | Opcode::NopB => {}
            Opcode::SigEvent => {
                return Flow::Stop(EngineEvent::Signal { code: w.imm() & IMM_VALUE_MASK, arg: src });
            }
            Opcode::RngGen => {
                let pos = bus.rng_position();
                j.push(|| Undo::Rng(pos));
                let v = bus.rng_next();
                self.state.write(dst, v);
            }
            Opcode::RsPush => {
                if self.state.return_stack.len() >= RETURN_STACK_DEPTH {
                    return Flow::Stop(EngineEvent::Fault(MemFault::ReturnStackOverflow));
                }
                let snap = &self.state.return_stack;
                j.push(|| Undo::RetStack(snap.clone()));
                self.state.return_stack.push(b);
            }
            Opcode::RsPop => {
                let snap = &self.state.return_stack;
                j.push(|| Undo::RetStack(snap.clone()));
                match self.state.return_stack.pop() {
                    Some(v) => self.state.write(dst, v),
                    None => return Flow::Stop(EngineEvent::Fault(MemFault::ReturnStackUnderflow)),
                }
            }
            Opcode::IncCov => {
                let off = b as usize;
                let v = self.cov_read(off, 2);
                self.cov_write(off, 2, (v + 1).min(0xFFFF), j);
            }
            Opcode::StCov => self.cov_write(b as usize, 8, src, j),
            Opcode::LdCov => {
                let v = self.cov_read(b as usize, 2);
                self.state.write(dst, v);
            }
            Opcode::ZeroExt => self.state.write(dst, b),
            Opcode::Add | Opcode::Sub | Opcode::Xor | Opcode::And | Opcode::Or => {
                let (r, carry) = match op {
                    Opcode::Add => src.overflowing_add(b),
                    Opcode::Sub => src.overflowing_sub(b),
                    Opcode::Xor => (src ^ b, false),
                    Opcode::And => (src & b, false),
                    _ => (src | b, false),
                };
                self.state.write(dst, r);
                if w.updates_flags() {
                    let f = self.state.regs[Reg::FLAGS.0 as usize] & !3;
                    self.state.regs[Reg::FLAGS.0 as usize] = f | (r == 0) as u64 | (carry as u64) << 1;
                }
            }
            Opcode::LdPphys | Opcode::LdLin => match bus.load(b, op == Opcode::LdLin) {
                Ok(v) => self.state.write(dst, v),
                Err(f) => return Flow::Stop(EngineEvent::Fault(f)),
            },
            Opcode::StPphys | Opcode::StLin => match bus.store(b, src, op == Opcode::StLin) {
                Ok(old) => j.push(|| Undo::GuestStore(b, old)),
                Err(f) => return Flow::Stop(EngineEvent::Fault(f)),
            },
            Opcode::LdStgBuf => {
                let v = self.state.staging.get(&(b as u16)).copied().unwrap_or(0);
                self.state.write(dst, v);
            }
            Opcode::StStgBuf => {
                let old = self.state.staging.insert(b as u16, src);
                j.push(|| Undo::Staging(b as u16, old));
            }
            Opcode::MoveToCreg | Opcode::MoveToCregAnd | Opcode::MoveToCregBtr | Opcode::MoveToCregBts => {
                let addr = (b & 0xFFF) as u16;
                let old = self.state.crbus.get(&addr).copied().unwrap_or(0);
                let bit = if w.crbus_aux() != 0 { w.crbus_aux() as u64 } else { src & 63 };
                let new = match op {
                    Opcode::MoveToCreg => src,
                    Opcode::MoveToCregAnd => old & src,
                    Opcode::MoveToCregBtr => old & !(1 << bit),
                    _ => old | 1 << bit,
                };
                self.set_crbus(addr, new, j);
                self.state.write(dst, old);
            }
            Opcode::MoveFromCreg => {
                let v = self.state.crbus.get(&((b & 0xFFF) as u16)).copied().unwrap_or(0);
                self.state.write(dst, v);
            }
            Opcode::UJmp | Opcode::UJmpReg => return Flow::Jump((b & 0xFFFF) as u16),
            Opcode::SaveUip => {
                let next = next_logical(pc);
                self.state.write(dst, next as u64);
            }
            Opcode::UJmpCcNotTakenCondNz => {
                if src != 0 {
                    return Flow::Mispredict((b & 0xFFFF) as u16);
                }
            }
            Opcode::Unk256 => {
                let mut pj = Journal { log: if perf_journal { j.log.as_deref_mut() } else { None } };
                self.bump_perf(MS_ENTRY, &mut pj);
            }
            Opcode::WrSegFld | Opcode::RdSegFld => {
                let seg = ((w.imm() >> 4) & 0xF) as usize;
                let field = (w.imm() & 0xF) as usize;
                if seg < NUM_SEGMENTS && field < NUM_SEG_FIELDS {
                    if op == Opcode::WrSegFld {
                        let old = self.state.seg[seg][field];
                        j.push(|| Undo::Seg(seg, field, old));
                        self.state.seg[seg][field] = src;
                    } else {
                        let v = self.state.seg[seg][field];
                        self.state.write(dst, v);
                    }
                }
            }
        }
        Flow::Next
    }

    fn check_addr(a: u16) -> Result<UcodeAddress, EngineError> {
        if a >= ADDR_SPACE || a & 3 == 3 {
            return Err(EngineError::InvalidAddress(a as u32));
        }
        Ok(UcodeAddress::new_unchecked(a))
    }

    /// Dispatches one macro instruction: loads its context, bumps the
    /// sequencer entry counter and runs its µcode routine.
    pub fn run_macro(&mut self, ctx: MacroCtx, bus: &mut dyn GuestBus, budget: u64) -> Result<RunResult, EngineError> {
        self.state.ctx = ctx;
        self.state.regs[Reg::NIP.0 as usize] = ctx.ip.wrapping_add(ctx.len as u64);
        *self.state.perf.entry(MS_ENTRY).or_insert(0) += 1;
        let entry = Self::check_addr(ctx.entry)?;
        self.run_from_entry(entry, bus, budget)
    }

    /// Runs µcode from `entry` until UEND, an event, a lockup, or the budget.
    /// Only fetches from ROM (by logical address) are charged to `budget`.
    pub fn run_from_entry(
        &mut self,
        entry: UcodeAddress,
        bus: &mut dyn GuestBus,
        budget: u64,
    ) -> Result<RunResult, EngineError> {
        let mut pc = Self::check_addr(entry.value())?;
        let mut charged = 0u64;
        let mut fetches = 0u64;
        let cap = budget.saturating_mul(FETCH_CAP_FACTOR).max(FETCH_CAP_FACTOR);
        let done = |outcome, charged| Ok(RunResult { outcome, charged });
        loop {
            if pc.is_rom() {
                if charged >= budget {
                    return done(Outcome::BudgetExhausted, charged);
                }
                charged += 1;
            }
            fetches += 1;
            if fetches > cap {
                return done(Outcome::BudgetExhausted, charged);
            }
            let eff = self.resolve(pc);
            let w = MicroOp::from_raw(self.image.word(eff.value()));
            if self.trace_enabled {
                self.trace.executed.push((eff, false));
            }
            let mut j = Journal { log: None };
            match self.exec(w, pc, bus, &mut j, false) {
                Flow::Next => {}
                Flow::Jump(t) => {
                    pc = Self::check_addr(t)?;
                    continue;
                }
                Flow::Mispredict(t) => {
                    let target = Self::check_addr(t)?;
                    if let Some(class) = self.speculate(pc, eff, bus) {
                        return done(Outcome::Lockup(class), charged);
                    }
                    pc = target;
                    continue;
                }
                Flow::Stop(ev) => return done(Outcome::Event(ev), charged),
            }
            if pc.slot() < 2 {
                pc = UcodeAddress::new_unchecked(pc.value() + 1);
                continue;
            }
            let seq = self.image.triad(eff.triad_base()).map(|t| t.seq).unwrap_or_default();
            if seq.uend {
                return done(Outcome::Uend, charged);
            }
            pc = match seq.goto_addr {
                Some(g) => g,
                None => Self::check_addr(pc.triad_base().wrapping_add(4))?,
            };
        }
    }

    /// Executes the not-taken path after a mispredicted branch at `branch_pc`
    /// and rolls it back. Returns a lockup class if a lockup rule fired.
    fn speculate(&mut self, branch_pc: UcodeAddress, branch_eff: UcodeAddress, bus: &mut dyn GuestBus) -> Option<LockupClass> {
        let saved_regs = self.state.regs;
        let saved_ctx = self.state.ctx;
        let mut log: Vec<Undo> = Vec::new();
        let mut result = None;
        let window = self.fault.spec_window_uops;
        let perf_journal = !self.fault.perf_counts_speculative;

        // The branch's own triad supplies the sequence word at slot 2.
        let mut pc = branch_pc;
        let mut eff_base = branch_eff.triad_base();
        let mut executed = 0u32;
        'window: loop {
            // Advance to the next µop on the predicted path.
            if pc.slot() < 2 {
                pc = UcodeAddress::new_unchecked(pc.value() + 1);
            } else {
                let seq = self.image.triad(eff_base).map(|t| t.seq).unwrap_or_default();
                if seq.is_fence() {
                    break;
                }
                if seq.uend {
                    if self.fault.spec_stops_at_ms_dispatch {
                        break;
                    }
                    let nip = self.state.regs[Reg::NIP.0 as usize];
                    let Some(ctx) = bus.next_macro(nip) else { break };
                    self.state.ctx = ctx;
                    self.state.regs[Reg::NIP.0 as usize] = ctx.ip.wrapping_add(ctx.len as u64);
                    let mut j = Journal { log: if perf_journal { Some(&mut log) } else { None } };
                    self.bump_perf(MS_ENTRY, &mut j);
                    match Self::check_addr(ctx.entry) {
                        Ok(a) => pc = a,
                        Err(_) => break,
                    }
                } else {
                    match seq.goto_addr {
                        Some(g) => pc = g,
                        None => match Self::check_addr(pc.triad_base().wrapping_add(4)) {
                            Ok(a) => pc = a,
                            Err(_) => break,
                        },
                    }
                }
            }
            loop {
                if executed >= window {
                    break 'window;
                }
                executed += 1;
                let eff = self.resolve(pc);
                eff_base = eff.triad_base();
                let w = MicroOp::from_raw(self.image.word(eff.value()));
                if self.trace_enabled {
                    self.trace.executed.push((eff, true));
                    self.trace.rolled_back.push(eff);
                }
                let crbus = w.opcode().filter(|o| o.is_crbus_write()).map(|_| self.crbus_addr(w));
                let rule = self.fault.rule_for(w, crbus).copied();
                let mut persist = false;
                if let Some(rule) = rule {
                    let fires = match rule.lockup {
                        Lockup::None => false,
                        Lockup::StableTimeout => true,
                        Lockup::Unstable { num, den } => self.lockup_rng.random_range(0..den) < num,
                    };
                    if fires {
                        result = Some(match rule.lockup {
                            Lockup::StableTimeout => LockupClass::StableTimeout,
                            _ => LockupClass::Unstable,
                        });
                        break 'window;
                    }
                    persist = rule.persists_through_rollback;
                }
                let mut j = Journal { log: if persist { None } else { Some(&mut log) } };
                let pj = perf_journal && !persist;
                match self.exec(w, pc, bus, &mut j, pj) {
                    Flow::Next | Flow::Mispredict(_) => break,
                    Flow::Jump(t) => match Self::check_addr(t) {
                        Ok(a) => pc = a,
                        Err(_) => break 'window,
                    },
                    Flow::Stop(_) => break 'window,
                }
            }
        }

        for u in log.into_iter().rev() {
            match u {
                Undo::Staging(a, old) => restore_map(&mut self.state.staging, a, old),
                Undo::Crbus(a, old) => restore_map(&mut self.state.crbus, a, old),
                Undo::Seg(s, f, old) => self.state.seg[s][f] = old,
                Undo::Perf(n, old) => match old {
                    Some(v) => {
                        self.state.perf.insert(n, v);
                    }
                    None => {
                        self.state.perf.remove(n);
                    }
                },
                Undo::Cov(a, old) => self.cov[a] = old,
                Undo::GuestStore(a, old) => bus.restore(a, old),
                Undo::Rng(pos) => bus.set_rng_position(pos),
                Undo::RetStack(s) => self.state.return_stack = s,
            }
        }
        self.state.regs = saved_regs;
        self.state.ctx = saved_ctx;
        result
    }
}

fn restore_map<K: Ord>(map: &mut BTreeMap<K, u64>, k: K, old: Option<u64>) {
    match old {
        Some(v) => {
            map.insert(k, v);
        }
        None => {
            map.remove(&k);
        }
    }
}

/// Logical address of the µop following `pc` in sequence (ignoring
/// sequence-word control flow).
pub fn next_logical(pc: UcodeAddress) -> u16 {
    if pc.slot() < 2 {
        pc.value() + 1
    } else {
        pc.triad_base() + 4
    }
}
