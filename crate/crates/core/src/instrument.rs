//! Coverage instrumentation through the hook table and patch RAM.
//!
//! Patch RAM layout (triad indices, address = 0x7C00 + 4 * index):
//!
//! | triads    | contents                                              |
//! |-----------|-------------------------------------------------------|
//! | 0..16     | per-slot entry triads `D_i`: `UJMP h_even`, `UJMP h_odd` |
//! | 16..48    | per-slot exit triads (even, odd), rewritten per plan  |
//! | 48..112   | per-slot trampolines, two triads per parity           |
//! | 112..116  | shared counter handler                                |
//!
//! A hooked ROM address `S` (even, slot 0 or 2) redirects to `D_i` and its
//! odd partner `S + 1` to `D_i + 1`. The trampoline saves the scratch
//! registers it clobbers in the staging buffer, the handler bumps a 16-bit
//! counter and records `rip`, and the exit triad restores `tmp14`, replays
//! the displaced µop and jumps back into ROM.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use crate::engine::{Engine, EngineError, HookEntry, NUM_HOOKS, PORT_HOOK_BASE, PORT_PATCH_BASE};
use crate::engine::next_logical;
use crate::ucode::asm::assemble_at;
use crate::ucode::uop::{OperandB, IMM_VALUE_MASK};
use crate::ucode::{MicroOp, Opcode, Reg, SequenceWord, Triad, UcodeAddress, UcodeImage, RAM_BASE};

/// Staging-buffer words reserved by the runtime.
pub const STG_SAVE_TMP10: u16 = 0xba00;
pub const STG_SAVE_TMP14: u16 = 0xbb00;
pub const STG_SAVE_TMP11: u16 = 0xbc00;
pub const RESERVED_STAGING: [u16; 3] = [STG_SAVE_TMP10, STG_SAVE_TMP14, STG_SAVE_TMP11];

/// Where counters and last-`rip` values live in coverage RAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoverageMapLayout {
    pub counter_base: u16,
    pub last_ip_base: u16,
}

pub const COVERAGE_LAYOUT: CoverageMapLayout = CoverageMapLayout { counter_base: 0x1000, last_ip_base: 0x1400 };

impl CoverageMapLayout {
    pub fn counter(&self, idx: usize) -> usize {
        self.counter_base as usize + 2 * idx
    }

    pub fn last_ip(&self, idx: usize) -> usize {
        self.last_ip_base as usize + 8 * idx
    }
}

const ENTRY_TRIAD: u16 = 0;
const EXIT_TRIAD: u16 = 16;
const TRAMPOLINE_TRIAD: u16 = 48;
const HANDLER_TRIAD: u16 = 112;
/// First patch-RAM triad not used by the runtime.
pub const RUNTIME_END_TRIAD: u16 = 116;

fn triad_addr(t: u16) -> u16 {
    RAM_BASE + 4 * t
}

pub fn entry_addr(slot: usize) -> u16 {
    triad_addr(ENTRY_TRIAD + slot as u16)
}

fn exit_addr(slot: usize, parity: usize) -> u16 {
    triad_addr(EXIT_TRIAD + 2 * slot as u16 + parity as u16)
}

fn trampoline_addr(slot: usize, parity: usize) -> u16 {
    triad_addr(TRAMPOLINE_TRIAD + 4 * slot as u16 + 2 * parity as u16)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Hook {
    pub slot: u8,
    pub src: UcodeAddress,
}

/// Assignment of ROM addresses to hook slots.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HookPlan {
    pub hooks: Vec<Hook>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstrError {
    TooManyHooks(usize),
    SlotOutOfRange(u8),
    DuplicateSlot(u8),
    DuplicateSource(UcodeAddress),
    UnhookableAddress(UcodeAddress),
    UnrelocatableOriginalUop(UcodeAddress),
    Engine(EngineError),
}

impl fmt::Display for InstrError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstrError::TooManyHooks(n) => write!(f, "{n} hooks requested, at most {NUM_HOOKS} available"),
            InstrError::SlotOutOfRange(s) => write!(f, "hook slot {s} out of range"),
            InstrError::DuplicateSlot(s) => write!(f, "hook slot {s} assigned twice"),
            InstrError::DuplicateSource(a) => write!(f, "address {a} hooked twice"),
            InstrError::UnhookableAddress(a) => write!(f, "address {a} cannot be hooked"),
            InstrError::UnrelocatableOriginalUop(a) => write!(f, "µop at {a} cannot be relocated"),
            InstrError::Engine(e) => write!(f, "{e}"),
        }
    }
}

impl From<EngineError> for InstrError {
    fn from(e: EngineError) -> Self {
        InstrError::Engine(e)
    }
}

impl HookPlan {
    /// Assigns slots 0.. in order.
    pub fn from_addresses(addrs: &[UcodeAddress]) -> Result<HookPlan, InstrError> {
        let plan = HookPlan {
            hooks: addrs.iter().enumerate().map(|(i, a)| Hook { slot: i.min(255) as u8, src: *a }).collect(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), InstrError> {
        if self.hooks.len() > NUM_HOOKS {
            return Err(InstrError::TooManyHooks(self.hooks.len()));
        }
        let mut slots = [false; NUM_HOOKS];
        for (i, h) in self.hooks.iter().enumerate() {
            if h.slot as usize >= NUM_HOOKS {
                return Err(InstrError::SlotOutOfRange(h.slot));
            }
            if core::mem::replace(&mut slots[h.slot as usize], true) {
                return Err(InstrError::DuplicateSlot(h.slot));
            }
            if !h.src.is_hookable() {
                return Err(InstrError::UnhookableAddress(h.src));
            }
            if self.hooks[..i].iter().any(|o| o.src == h.src) {
                return Err(InstrError::DuplicateSource(h.src));
            }
        }
        Ok(())
    }

    /// Addresses observed by this plan: each source and, for slot-0
    /// sources, its odd partner.
    pub fn observed(&self) -> Vec<UcodeAddress> {
        let mut v = Vec::new();
        for h in &self.hooks {
            v.push(h.src);
            if h.src.slot() == 0 {
                v.push(UcodeAddress::new_unchecked(h.src.value() + 1));
            }
        }
        v.sort();
        v
    }
}

/// Plan-dependent part of the patch: exit triads and hook registers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchProgram {
    pub triads: Vec<(u16, Triad)>,
    pub hooks: Vec<(usize, HookEntry)>,
}

fn asm_triads(src: &str, origin: u16) -> Vec<(u16, Triad)> {
    assemble_at(src, origin).expect("runtime assembles").triads
}

/// Static runtime triads: entry triads, trampolines and the shared handler.
pub fn runtime_triads() -> Vec<(u16, Triad)> {
    let mut out = Vec::new();
    let handler = triad_addr(HANDLER_TRIAD);
    for slot in 0..NUM_HOOKS {
        let (te, to) = (trampoline_addr(slot, 0), trampoline_addr(slot, 1));
        out.extend(asm_triads(&format!("UJMP({te:#x})\nUJMP({to:#x})\nNOP"), entry_addr(slot)));
        for parity in 0..2 {
            let idx = 2 * slot + parity;
            let src = format!(
                "STSTGBUF_DSZ64(tmp10, {STG_SAVE_TMP10:#x})\nSTSTGBUF_DSZ64(tmp14, {STG_SAVE_TMP14:#x})\n\
                 tmp10 := ZEROEXT_DSZ64({idx:#x})\ntmp14 := ZEROEXT_DSZ64({x:#x})\nUJMP({handler:#x})\nNOP",
                x = exit_addr(slot, parity)
            );
            out.extend(asm_triads(&src, trampoline_addr(slot, parity)));
        }
    }
    let src = format!(
        "STSTGBUF_DSZ64(tmp11, {STG_SAVE_TMP11:#x})\n\
         tmp11 := ADD_DSZ64(tmp10, tmp10)\n\
         tmp11 := ADD_DSZ64(tmp11, {cb:#x})\n\
         INCCOV_DSZ16(tmp11)\n\
         tmp11 := ADD_DSZ64(tmp10, tmp10)\n\
         tmp11 := ADD_DSZ64(tmp11, tmp11)\n\
         tmp11 := ADD_DSZ64(tmp11, tmp11)\n\
         tmp11 := ADD_DSZ64(tmp11, {lb:#x})\n\
         STCOV_DSZ64(rip, tmp11)\n\
         tmp11 := LDSTGBUF_DSZ64({STG_SAVE_TMP11:#x})\n\
         tmp10 := LDSTGBUF_DSZ64({STG_SAVE_TMP10:#x})\n\
         UJMPREG(tmp14)",
        cb = COVERAGE_LAYOUT.counter_base,
        lb = COVERAGE_LAYOUT.last_ip_base,
    );
    out.extend(asm_triads(&src, handler));
    out
}

/// Whether `w` can run from patch RAM without disturbing the runtime.
fn relocatable(w: MicroOp) -> bool {
    match w.opcode() {
        Some(Opcode::LdStgBuf) | Some(Opcode::StStgBuf) => match w.operand_b() {
            OperandB::Imm(a) => !RESERVED_STAGING.contains(&((a & IMM_VALUE_MASK) as u16)),
            OperandB::Reg(_) => false,
        },
        _ => true,
    }
}

/// Rewrites position-dependent µops for execution at another address.
fn relocate(w: MicroOp, logical: UcodeAddress) -> MicroOp {
    if w.opcode() == Some(Opcode::SaveUip) {
        MicroOp::build(Opcode::ZeroExt, w.dst(), Reg::ZERO, MicroOp::imm_b(next_logical(logical) as u32))
    } else {
        w
    }
}

fn restore_uop() -> MicroOp {
    MicroOp::build(Opcode::LdStgBuf, Reg::TMP14, Reg::ZERO, MicroOp::imm_b(STG_SAVE_TMP14 as u32))
}

fn jump_uop(to: u16) -> MicroOp {
    MicroOp::build(Opcode::UJmp, Reg::ZERO, Reg::ZERO, MicroOp::imm_b(to as u32))
}

/// Exit triad replaying the µop originally at `logical`.
fn exit_triad(image: &UcodeImage, logical: UcodeAddress) -> Result<Triad, InstrError> {
    let orig = MicroOp::from_raw(image.word(logical.value()));
    if !relocatable(orig) {
        return Err(InstrError::UnrelocatableOriginalUop(logical));
    }
    let orig = relocate(orig, logical);
    if logical.slot() < 2 {
        return Ok(Triad::new([restore_uop(), orig, jump_uop(logical.value() + 1)], SequenceWord::NONE));
    }
    // Slot 2 carries the original sequence word; fall-through becomes a goto.
    let mut seq = image.triad(logical.triad_base()).map(|t| t.seq).unwrap_or_default();
    if !seq.uend && seq.goto_addr.is_none() {
        seq.goto_addr = Some(UcodeAddress::new_unchecked(logical.triad_base() + 4));
    }
    Ok(Triad::new([restore_uop(), orig, MicroOp::NOP], seq))
}

/// Builds exit triads and hook registers for `plan` against the ROM in `image`.
pub fn synthesize_hook_patch(plan: &HookPlan, image: &UcodeImage) -> Result<PatchProgram, InstrError> {
    plan.validate()?;
    let mut triads = Vec::new();
    let mut hooks = Vec::new();
    for h in &plan.hooks {
        let slot = h.slot as usize;
        triads.push((exit_addr(slot, 0), exit_triad(image, h.src)?));
        let odd = if h.src.slot() == 0 {
            exit_triad(image, UcodeAddress::new_unchecked(h.src.value() + 1))?
        } else {
            // The odd partner of a slot-2 source is never fetched.
            Triad::new([restore_uop(), MicroOp::NOP, MicroOp::NOP], SequenceWord::uend())
        };
        triads.push((exit_addr(slot, 1), odd));
        hooks.push((slot, HookEntry { enabled: true, src: h.src.value(), dst: entry_addr(slot) }));
    }
    Ok(PatchProgram { triads, hooks })
}

pub(crate) fn patch_writes(base: u16, t: &Triad) -> impl Iterator<Item = (u32, u64)> {
    let port = PORT_PATCH_BASE + ((base - RAM_BASE) / 4) as u32;
    t.to_words().into_iter().enumerate().map(move |(lane, w)| (port, Engine::patch_word_value(lane as u16, w)))
}

fn apply(engine: &mut Engine, writes: &[(u32, u64)]) -> Result<usize, InstrError> {
    for (port, value) in writes {
        engine.write_control_port(*port, *value)?;
    }
    Ok(writes.len())
}

/// Writes the static runtime into patch RAM. Returns the number of port writes.
pub fn install_runtime(engine: &mut Engine) -> Result<usize, InstrError> {
    let writes: Vec<(u32, u64)> = runtime_triads().iter().flat_map(|(b, t)| patch_writes(*b, t)).collect();
    apply(engine, &writes)
}

/// Installs a plan: exit triads and hook registers for every planned slot,
/// plus disables for slots that were enabled but are no longer planned.
/// The plan is validated before any write, so a failure leaves the engine
/// unchanged. Returns the number of port writes.
pub fn install_plan(engine: &mut Engine, plan: &HookPlan) -> Result<usize, InstrError> {
    let prog = synthesize_hook_patch(plan, &engine.image)?;
    let mut writes: Vec<(u32, u64)> = Vec::new();
    for (b, t) in &prog.triads {
        writes.extend(patch_writes(*b, t));
    }
    for (slot, e) in &prog.hooks {
        writes.push((PORT_HOOK_BASE + *slot as u32, e.pack()));
    }
    for (i, e) in engine.hooks.entries.iter().enumerate() {
        if e.enabled && !prog.hooks.iter().any(|(s, _)| *s == i) {
            writes.push((PORT_HOOK_BASE + i as u32, HookEntry::default().pack()));
        }
    }
    apply(engine, &writes)
}

/// Disables every hook register.
pub fn uninstall(engine: &mut Engine) -> Result<usize, InstrError> {
    install_plan(engine, &HookPlan::default())
}

/// Per-address hit counts and last `rip` since the previous read.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoverageReport {
    pub counts: BTreeMap<UcodeAddress, u64>,
    pub last_ip: BTreeMap<UcodeAddress, u64>,
}

impl CoverageReport {
    pub fn covered(&self) -> impl Iterator<Item = UcodeAddress> + '_ {
        self.counts.iter().filter(|(_, c)| **c > 0).map(|(a, _)| *a)
    }

    pub fn count(&self, a: UcodeAddress) -> u64 {
        self.counts.get(&a).copied().unwrap_or(0)
    }
}

/// Reads and clears the counters of every planned address.
pub fn read_coverage(engine: &mut Engine, plan: &HookPlan) -> CoverageReport {
    let mut rep = CoverageReport::default();
    let l = COVERAGE_LAYOUT;
    for h in &plan.hooks {
        for parity in 0..2usize {
            if parity == 1 && h.src.slot() != 0 {
                continue;
            }
            let idx = 2 * h.slot as usize + parity;
            let addr = UcodeAddress::new_unchecked(h.src.value() + parity as u16);
            let c = engine.cov_read(l.counter(idx), 2);
            rep.counts.insert(addr, c);
            if c > 0 {
                rep.last_ip.insert(addr, engine.cov_read(l.last_ip(idx), 8));
            }
        }
    }
    let counters = l.counter(0)..l.counter(2 * NUM_HOOKS);
    let last = l.last_ip(0)..l.last_ip(2 * NUM_HOOKS);
    for i in counters.chain(last) {
        engine.cov[i] = 0;
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runtime_fits_before_end() {
        let t = runtime_triads();
        assert_eq!(t.len(), 16 + 64 + 4);
        assert!(t.iter().all(|(b, _)| *b < triad_addr(RUNTIME_END_TRIAD)));
        assert!(t.iter().all(|(b, _)| (*b < triad_addr(EXIT_TRIAD)) || *b >= triad_addr(TRAMPOLINE_TRIAD)));
    }

    #[test]
    fn plan_validation() {
        let a = UcodeAddress::new_unchecked(0x100);
        assert!(HookPlan::from_addresses(&[a, a]).is_err());
        assert_eq!(
            HookPlan::from_addresses(&[UcodeAddress::new_unchecked(0x101)]),
            Err(InstrError::UnhookableAddress(UcodeAddress::new_unchecked(0x101)))
        );
        let many: Vec<_> = (0..17u16).map(|i| UcodeAddress::new_unchecked(i * 4)).collect();
        assert_eq!(HookPlan::from_addresses(&many), Err(InstrError::TooManyHooks(17)));
    }
}
