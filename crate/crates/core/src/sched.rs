//! Coverage round planning over the ROM control-flow graph.
//!
//! Only 32 addresses can be observed per round. Entry points are measured
//! first; after that, a block's count holds for all of its members, and only
//! the conditionally reachable successors of blocks that actually ran need
//! their own round.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::engine::NUM_HOOKS;
use crate::instrument::{CoverageReport, Hook, HookPlan};
use crate::ucode::uop::OperandB;
use crate::ucode::{MicroOp, Opcode, UcodeAddress, UcodeImage, ROM_END};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminator {
    Uend,
    StaticGoto(UcodeAddress),
    CondBranch { taken: UcodeAddress, fallthrough: Option<UcodeAddress> },
    RegJump,
    /// Last member may raise a guest fault; otherwise flow continues.
    MayFault(Option<UcodeAddress>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub head: UcodeAddress,
    pub members: Vec<UcodeAddress>,
    pub terminator: Terminator,
}

/// Flow out of a single µop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Next(Option<UcodeAddress>),
    Jump(Option<UcodeAddress>),
    Cond(Option<UcodeAddress>, Option<UcodeAddress>),
    Fault(Option<UcodeAddress>),
    Reg,
    Stop,
}

fn valid(a: u32) -> Option<UcodeAddress> {
    UcodeAddress::new(a).ok()
}

/// Address following `a` when no jump is taken; `None` at UEND.
fn seq_next(image: &UcodeImage, a: UcodeAddress) -> Option<UcodeAddress> {
    if a.slot() < 2 {
        return valid(a.value() as u32 + 1);
    }
    let seq = image.triad(a.triad_base()).map(|t| t.seq).unwrap_or_default();
    if seq.uend {
        None
    } else if let Some(g) = seq.goto_addr {
        Some(g)
    } else {
        valid(a.triad_base() as u32 + 4)
    }
}

fn step(image: &UcodeImage, a: UcodeAddress) -> Step {
    let w = MicroOp::from_raw(image.word(a.value()));
    let target = || match w.operand_b() {
        OperandB::Imm(v) => Some(valid(v & 0xFFFF)),
        OperandB::Reg(_) => None,
    };
    match w.opcode() {
        Some(Opcode::SigEvent) => Step::Stop,
        Some(Opcode::UJmp) | Some(Opcode::UJmpReg) => match target() {
            Some(t) => Step::Jump(t),
            None => Step::Reg,
        },
        Some(Opcode::UJmpCcNotTakenCondNz) => match target() {
            Some(t) => Step::Cond(t, seq_next(image, a)),
            None => Step::Reg,
        },
        Some(
            Opcode::LdPphys | Opcode::StPphys | Opcode::LdLin | Opcode::StLin | Opcode::RsPush | Opcode::RsPop,
        ) => Step::Fault(seq_next(image, a)),
        _ => Step::Next(seq_next(image, a)),
    }
}

fn rom(a: Option<UcodeAddress>) -> Option<UcodeAddress> {
    a.filter(|a| a.value() < ROM_END)
}

/// Control-flow graph of the ROM reachable from a set of entry points.
#[derive(Debug, Clone)]
pub struct Cfg {
    pub entries: Vec<UcodeAddress>,
    pub blocks: Vec<BasicBlock>,
    block_of: BTreeMap<UcodeAddress, usize>,
}

impl Cfg {
    pub fn build(image: &UcodeImage, entries: &[UcodeAddress]) -> Cfg {
        // Reachability and predecessor counts.
        let mut preds: BTreeMap<UcodeAddress, usize> = BTreeMap::new();
        let mut leaders: BTreeSet<UcodeAddress> = entries.iter().copied().filter(|a| a.is_rom()).collect();
        let mut work: Vec<UcodeAddress> = leaders.iter().copied().collect();
        let mut seen: BTreeSet<UcodeAddress> = leaders.clone();
        while let Some(a) = work.pop() {
            let mut edge = |t: Option<UcodeAddress>, leader: bool, work: &mut Vec<UcodeAddress>| {
                if let Some(t) = rom(t) {
                    *preds.entry(t).or_insert(0) += 1;
                    if leader {
                        leaders.insert(t);
                    }
                    if seen.insert(t) {
                        work.push(t);
                    }
                }
            };
            match step(image, a) {
                Step::Next(t) | Step::Jump(t) => edge(t, false, &mut work),
                Step::Cond(t, f) => {
                    edge(t, true, &mut work);
                    edge(f, true, &mut work);
                }
                Step::Fault(t) => edge(t, true, &mut work),
                Step::Reg | Step::Stop => {}
            }
        }
        leaders.extend(preds.iter().filter(|(_, n)| **n > 1).map(|(a, _)| *a));

        let mut blocks = Vec::new();
        let mut block_of = BTreeMap::new();
        for &head in &leaders {
            let mut members = Vec::new();
            let mut a = head;
            let terminator = loop {
                members.push(a);
                block_of.insert(a, blocks.len());
                let next = match step(image, a) {
                    Step::Next(t) | Step::Jump(t) => t,
                    Step::Cond(t, f) => match t {
                        Some(taken) => break Terminator::CondBranch { taken, fallthrough: f },
                        None => f,
                    },
                    Step::Fault(t) => break Terminator::MayFault(t),
                    Step::Reg => break Terminator::RegJump,
                    Step::Stop => break Terminator::Uend,
                };
                match next {
                    None => break Terminator::Uend,
                    Some(n) if leaders.contains(&n) || !n.is_rom() || members.contains(&n) => {
                        break Terminator::StaticGoto(n)
                    }
                    Some(n) => a = n,
                }
            };
            blocks.push(BasicBlock { head, members, terminator });
        }
        Cfg { entries: entries.to_vec(), blocks, block_of }
    }

    pub fn block_containing(&self, a: UcodeAddress) -> Option<&BasicBlock> {
        self.block_of.get(&a).map(|i| &self.blocks[*i])
    }

    pub fn block(&self, head: UcodeAddress) -> Option<&BasicBlock> {
        self.block_containing(head).filter(|b| b.head == head)
    }

    /// Φ: heads of blocks that may run after `b`.
    pub fn successors(&self, b: &BasicBlock) -> Vec<UcodeAddress> {
        let mut out: Vec<UcodeAddress> = match b.terminator {
            Terminator::Uend => Vec::new(),
            Terminator::StaticGoto(t) => rom(Some(t)).into_iter().collect(),
            Terminator::CondBranch { taken, fallthrough } => {
                rom(Some(taken)).into_iter().chain(rom(fallthrough)).collect()
            }
            Terminator::MayFault(t) => rom(t).into_iter().collect(),
            Terminator::RegJump => self.entries.clone(),
        };
        out.sort();
        out.dedup();
        out
    }

    pub fn reachable(&self) -> impl Iterator<Item = UcodeAddress> + '_ {
        self.block_of.keys().copied()
    }
}

/// Hook source that observes `a`: itself if even, else its even partner.
pub fn hook_source(a: UcodeAddress) -> UcodeAddress {
    UcodeAddress::new_unchecked(a.value() & !1)
}

/// Packs hook sources first-fit, 16 per plan, dropping duplicates.
pub fn pack_rounds(sources: impl IntoIterator<Item = UcodeAddress>) -> Vec<HookPlan> {
    let mut seen = BTreeSet::new();
    let uniq: Vec<UcodeAddress> = sources.into_iter().filter(|a| a.is_hookable() && seen.insert(*a)).collect();
    uniq.chunks(NUM_HOOKS)
        .map(|c| HookPlan {
            hooks: c.iter().enumerate().map(|(i, a)| Hook { slot: i as u8, src: *a }).collect(),
        })
        .collect()
}

/// Entry-point sweep: 16 entry heads per round.
pub fn plan_initial_rounds(entries: &[UcodeAddress]) -> Vec<HookPlan> {
    pack_rounds(entries.iter().copied())
}

/// Address-by-address sweep of `[0, end)`, 32 addresses per round.
pub fn plan_baseline(end: u16) -> Vec<HookPlan> {
    pack_rounds((0..end.min(ROM_END)).step_by(2).filter_map(|a| valid(a as u32)).filter(|a| a.is_hookable()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Measured,
    Propagated,
}

/// Per-address execution counts accumulated over one scheduling episode.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GlobalCoverage {
    pub counts: BTreeMap<UcodeAddress, (u64, Provenance)>,
    measured_blocks: BTreeSet<UcodeAddress>,
    queued: BTreeSet<UcodeAddress>,
}

impl GlobalCoverage {
    pub fn count(&self, a: UcodeAddress) -> u64 {
        self.counts.get(&a).map(|c| c.0).unwrap_or(0)
    }

    /// Addresses executed at least once.
    pub fn covered(&self) -> BTreeSet<UcodeAddress> {
        self.counts.iter().filter(|(_, c)| c.0 > 0).map(|(a, _)| *a).collect()
    }

    pub fn is_measured(&self, head: UcodeAddress) -> bool {
        self.measured_blocks.contains(&head)
    }
}

/// Folds one round's report into `global` and returns the follow-up plans.
pub fn propagate_and_schedule(cfg: &Cfg, report: &CoverageReport, global: &mut GlobalCoverage) -> Vec<HookPlan> {
    let mut touched = Vec::new();
    for (&a, &count) in &report.counts {
        let Some(b) = cfg.block_containing(a) else {
            global.counts.insert(a, (count, Provenance::Measured));
            continue;
        };
        for &m in &b.members {
            let prov = if m == a { Provenance::Measured } else { Provenance::Propagated };
            let e = global.counts.entry(m).or_insert((count, prov));
            if prov == Provenance::Measured {
                *e = (count, prov);
            }
        }
        if global.measured_blocks.insert(b.head) {
            touched.push(b.head);
        }
    }
    let mut next = Vec::new();
    for head in touched {
        let b = cfg.block(head).expect("head of a block");
        if global.count(head) == 0 {
            continue;
        }
        for s in cfg.successors(b) {
            if !global.measured_blocks.contains(&s) && global.queued.insert(s) {
                next.push(hook_source(s));
            }
        }
    }
    pack_rounds(next)
}

/// Runs a whole episode: the entry sweep, then follow-up rounds until no
/// unmeasured successor of a covered block remains. `measure` executes the
/// testcase under a plan and returns its coverage.
pub fn run_episode(
    cfg: &Cfg,
    mut measure: impl FnMut(&HookPlan) -> CoverageReport,
) -> (GlobalCoverage, usize) {
    let mut global = GlobalCoverage::default();
    let mut pending: Vec<HookPlan> = plan_initial_rounds(&cfg.entries);
    for e in &cfg.entries {
        global.queued.insert(*e);
    }
    let mut rounds = 0;
    while !pending.is_empty() {
        let mut next = Vec::new();
        for plan in &pending {
            rounds += 1;
            let rep = measure(plan);
            next.extend(propagate_and_schedule(cfg, &rep, &mut global));
        }
        pending = pack_rounds(next.into_iter().flat_map(|p| p.hooks.into_iter().map(|h| h.src)));
    }
    (global, rounds)
}
