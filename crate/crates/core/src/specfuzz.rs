//! Speculative-window fuzzing: a forced-misprediction template in patch RAM,
//! candidate injection, persisted-effect detection and lockup classification.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::engine::{Engine, EngineError, EngineState, FaultModel, FaultRule, Lockup, LockupClass, NullBus, Outcome, UopMatch};
use crate::hash::Fnv1a;
use crate::instrument::patch_writes;
use crate::ucode::asm::{assemble_at, disassemble_uop, parse_uop};
use crate::ucode::{MicroOp, Opcode, Reg, Triad, UcodeAddress};

pub const TEMPLATE_BASE: u16 = 0x7F00;
pub const WINDOW_SLOTS: usize = 4;
pub const DEFAULT_TRIALS: u32 = 16;
const TRIAL_BUDGET: u64 = 1000;

const PROLOGUE: &str = "\
tmp2 := ZEROEXT_DSZ64(0xabab)
tmp0 := ZEROEXT_DSZ64(0x1000)
tmp1 := LDPPHYS_DSZ64(tmp0)
tmp0 := SUB_DSZ64(tmp0, tmp1)
UJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp0, taken)
";

const EPILOGUE: &str = "\
rax := ZEROEXT_DSZ64(0xdead)
NOPB
NOP SEQW SYNCFULL
NOPB
taken:
UNK_256() SEQW LFNCEWAIT, UEND0
";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpecError {
    PayloadTooLarge(usize),
    Engine(EngineError),
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecError::PayloadTooLarge(n) => write!(f, "payload of {n} µops exceeds {WINDOW_SLOTS} window slots"),
            SpecError::Engine(e) => write!(f, "engine: {e:?}"),
        }
    }
}

impl From<EngineError> for SpecError {
    fn from(e: EngineError) -> Self {
        SpecError::Engine(e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecTemplate {
    pub payload: Vec<MicroOp>,
    pub source: String,
    pub triads: Vec<(u16, Triad)>,
    pub taken: UcodeAddress,
}

impl SpecTemplate {
    pub fn entry(&self) -> UcodeAddress {
        UcodeAddress::new_unchecked(TEMPLATE_BASE)
    }

    /// Writes the template into patch RAM through the control ports.
    pub fn install(&self, engine: &mut Engine) -> Result<usize, EngineError> {
        let mut n = 0;
        for (base, t) in &self.triads {
            for (port, v) in patch_writes(*base, t) {
                engine.write_control_port(port, v)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Listing text of the template with `payload` at the insertion point.
pub fn template_source(payload: &[MicroOp]) -> String {
    let mut s = String::from(PROLOGUE);
    for w in payload {
        s.push_str(&disassemble_uop(*w));
        s.push('\n');
    }
    s.push_str(EPILOGUE);
    s
}

pub fn build_template(payload: &[MicroOp]) -> Result<SpecTemplate, SpecError> {
    if payload.len() > WINDOW_SLOTS {
        return Err(SpecError::PayloadTooLarge(payload.len()));
    }
    let source = template_source(payload);
    let asm = assemble_at(&source, TEMPLATE_BASE).expect("template assembles");
    let taken = asm.label("taken").expect("template has a landing label");
    Ok(SpecTemplate { payload: payload.to_vec(), source, triads: asm.triads, taken })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    Register,
    Staging,
    Crbus,
    /// Address is `segment * 16 + field`.
    Segment,
    Perf(&'static str),
    ReturnStack,
    CoverageRam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Effect {
    pub component: Component,
    pub address: u64,
    pub old: u64,
    pub new: u64,
}

fn diff_maps<K: Ord + Copy>(
    a: &alloc::collections::BTreeMap<K, u64>,
    b: &alloc::collections::BTreeMap<K, u64>,
    mut emit: impl FnMut(K, u64, u64),
) {
    let keys: alloc::collections::BTreeSet<K> = a.keys().chain(b.keys()).copied().collect();
    for k in keys {
        let (x, y) = (a.get(&k).copied().unwrap_or(0), b.get(&k).copied().unwrap_or(0));
        if x != y {
            emit(k, x, y);
        }
    }
}

/// Every architectural difference between two engine snapshots.
pub fn diff_state(a: &EngineState, b: &EngineState, cov_a: &[u8], cov_b: &[u8]) -> Vec<Effect> {
    let mut out = Vec::new();
    for i in 0..64u8 {
        let (x, y) = (a.read(Reg(i)), b.read(Reg(i)));
        if x != y {
            out.push(Effect { component: Component::Register, address: i as u64, old: x, new: y });
        }
    }
    diff_maps(&a.staging, &b.staging, |k, x, y| out.push(Effect { component: Component::Staging, address: k as u64, old: x, new: y }));
    diff_maps(&a.crbus, &b.crbus, |k, x, y| out.push(Effect { component: Component::Crbus, address: k as u64, old: x, new: y }));
    diff_maps(&a.perf, &b.perf, |k, x, y| out.push(Effect { component: Component::Perf(k), address: 0, old: x, new: y }));
    for (s, (ra, rb)) in a.seg.iter().zip(&b.seg).enumerate() {
        for (f, (x, y)) in ra.iter().zip(rb).enumerate() {
            if x != y {
                out.push(Effect { component: Component::Segment, address: (s * 16 + f) as u64, old: *x, new: *y });
            }
        }
    }
    let depth = a.return_stack.len().max(b.return_stack.len());
    for i in 0..depth {
        let (x, y) = (a.return_stack.get(i).copied().unwrap_or(0), b.return_stack.get(i).copied().unwrap_or(0));
        if x != y || a.return_stack.len() != b.return_stack.len() {
            out.push(Effect { component: Component::ReturnStack, address: i as u64, old: x, new: y });
        }
    }
    for (i, (x, y)) in cov_a.iter().zip(cov_b).enumerate() {
        if x != y {
            out.push(Effect { component: Component::CoverageRam, address: i as u64, old: *x as u64, new: *y as u64 });
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecResult {
    pub candidate: MicroOp,
    /// State digest after the template ran with an empty window.
    pub baseline_digest: u64,
    /// State digest after the template ran with the candidate.
    pub post_digest: u64,
    pub effects: Vec<Effect>,
    pub lockup: Option<LockupClass>,
    pub lockups: u32,
    pub trials: u32,
}

/// Digest of the engine state plus coverage RAM.
pub fn snapshot_digest(e: &Engine) -> u64 {
    let mut h = Fnv1a::new();
    h.write_u64(e.state.digest());
    h.write(&e.cov);
    h.finish()
}

fn run_once(engine: &Engine, tpl: &SpecTemplate, fault: &FaultModel, seed: u64, trial: u64) -> Result<(Engine, Outcome), SpecError> {
    let mut e = engine.clone();
    e.fault = fault.clone();
    e.trace_enabled = false;
    tpl.install(&mut e)?;
    e.set_trial(seed, trial);
    let r = e.run_from_entry(tpl.entry(), &mut NullBus::default(), TRIAL_BUDGET)?;
    Ok((e, r.outcome))
}

/// Runs `candidate` in the speculative window `trials` times from the
/// state held by `engine`, which is left untouched. Effects are measured
/// against the same template with an empty window, since the template
/// itself has architectural side effects.
pub fn run_spec_trial(engine: &Engine, candidate: MicroOp, fault: &FaultModel, trials: u32, seed: u64) -> Result<SpecResult, SpecError> {
    fault.validate()?;
    let empty = build_template(&[])?;
    let tpl = build_template(&[candidate])?;
    let (base, _) = run_once(engine, &empty, fault, seed, u64::MAX)?;
    let mut lockups = 0;
    let mut effects = None;
    let mut post_digest = snapshot_digest(&base);
    for t in 0..trials {
        let (e, outcome) = run_once(engine, &tpl, fault, seed, t as u64)?;
        if matches!(outcome, Outcome::Lockup(_)) {
            lockups += 1;
        } else if effects.is_none() {
            post_digest = snapshot_digest(&e);
            effects = Some(diff_state(&base.state, &e.state, &base.cov, &e.cov));
        }
    }
    let lockup = match lockups {
        0 => None,
        n if n == trials => Some(LockupClass::StableTimeout),
        _ => Some(LockupClass::Unstable),
    };
    Ok(SpecResult {
        candidate,
        baseline_digest: snapshot_digest(&base),
        post_digest,
        effects: effects.unwrap_or_default(),
        lockup,
        lockups,
        trials,
    })
}

pub fn sweep_catalog(engine: &Engine, candidates: &[MicroOp], fault: &FaultModel, trials: u32, seed: u64) -> Result<Vec<SpecResult>, SpecError> {
    candidates.iter().map(|c| run_spec_trial(engine, *c, fault, trials, seed)).collect()
}

/// One representative µop per defined opcode, with operands that make
/// side effects visible (tmp2 holds a nonzero value in the template).
pub fn representative_candidates() -> Vec<MicroOp> {
    Opcode::ALL
        .iter()
        .map(|op| {
            let imm = match op {
                Opcode::MoveToCreg | Opcode::MoveToCregBts | Opcode::MoveToCregBtr | Opcode::MoveToCregAnd => 0x700,
                _ if op.is_jump() => TEMPLATE_BASE as u32 + 0x20,
                _ => 0x40,
            };
            MicroOp::build(*op, Reg(3), Reg(2), imm)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogRow {
    pub word: MicroOp,
    pub class: LockupClass,
    pub disassembly: String,
}

impl fmt::Display for CatalogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#014x};{};{}", self.word.raw(), class_name(self.class), self.disassembly)
    }
}

pub fn class_name(c: LockupClass) -> &'static str {
    match c {
        LockupClass::StableTimeout => "StableTimeout",
        LockupClass::Unstable => "Unstable",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for CatalogError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "catalog line {}: {}", self.line, self.msg)
    }
}

/// Bundled lockup catalog.
pub const BUNDLED_CATALOG: &str = include_str!("../data/lockup_catalog.csv");

/// Parses `<hex word>;<class>;<disassembly>` rows. The disassembly must
/// assemble to the same word.
pub fn parse_catalog(text: &str) -> Result<Vec<CatalogRow>, CatalogError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| CatalogError { line: i + 1, msg };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, ';');
        let (Some(h), Some(c), Some(d)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err("expected three fields".into()));
        };
        let raw = u64::from_str_radix(h.trim().trim_start_matches("0x"), 16).map_err(|e| err(e.to_string()))?;
        if raw >> 48 != 0 {
            return Err(err("word exceeds 48 bits".into()));
        }
        let class = match c.trim() {
            "StableTimeout" => LockupClass::StableTimeout,
            "Unstable" => LockupClass::Unstable,
            other => return Err(err(format!("unknown class `{other}`"))),
        };
        let d = d.trim();
        let decoded = match d.split_once(" @") {
            Some((_, r)) => u64::from_str_radix(r.trim().trim_start_matches("0x"), 16).map_err(|e| err(e.to_string()))?,
            None => parse_uop(d, &|_| None).map_err(|e| err(format!("{e:?}")))?.raw(),
        };
        if decoded != raw {
            return Err(err(format!("disassembly encodes {decoded:#x}, row says {raw:#x}")));
        }
        out.push(CatalogRow { word: MicroOp::from_raw(raw), class, disassembly: d.to_string() });
    }
    Ok(out)
}

pub fn format_catalog(rows: &[CatalogRow]) -> String {
    rows.iter().map(|r| format!("{r}\n")).collect()
}

/// Fault model whose rules reproduce the catalog's lockups.
pub fn catalog_fault_model(rows: &[CatalogRow]) -> FaultModel {
    rows.iter().fold(FaultModel::correct(), |m, r| {
        m.with_rule(FaultRule {
            matcher: UopMatch::word(r.word),
            persists_through_rollback: false,
            lockup: match r.class {
                LockupClass::StableTimeout => Lockup::StableTimeout,
                LockupClass::Unstable => Lockup::Unstable { num: 1, den: 2 },
            },
        })
    })
}

/// Rows for every result that locked up, in the catalog's column shape.
pub fn lockup_table(results: &[SpecResult]) -> Vec<CatalogRow> {
    results
        .iter()
        .filter_map(|r| {
            r.lockup.map(|class| CatalogRow { word: r.candidate, class, disassembly: disassemble_uop(r.candidate) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_limit() {
        assert!(build_template(&[MicroOp::NOP; 4]).is_ok());
        assert_eq!(build_template(&[MicroOp::NOP; 5]), Err(SpecError::PayloadTooLarge(5)));
    }

    #[test]
    fn bundled_catalog_parses() {
        let rows = parse_catalog(BUNDLED_CATALOG).unwrap();
        assert_eq!(rows.len(), 62);
        assert_eq!(parse_catalog(&format_catalog(&rows)).unwrap(), rows);
    }
}
