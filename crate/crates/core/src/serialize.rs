//! Serialized twin of a testcase: a FENCE after every instruction.
//!
//! Fragment 0 is the linear decode of the whole testcase. A branch whose
//! target is not an instruction start of its own fragment (or of any
//! fragment built so far) gets a new fragment unrolled from that byte
//! offset. Fragments are laid out back to back, each followed by a HLT so
//! sequential flow never runs from one into the next. Relative operands are
//! recomputed for the new layout; rel8 branches that no longer reach are
//! relaxed to their rel16 forms.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::gisa::{branch_target, decode, encode, BranchKind, Insn, CODE_REGION};
use crate::vm::MEM_SIZE;

/// Largest testcase accepted, leaving room for the expansion.
pub const MAX_INPUT: usize = CODE_REGION / 4;
pub const MAX_FRAGMENTS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SerializeError {
    CapacityExceeded(usize),
    UnmappableTarget { offset: u16 },
}

impl fmt::Display for SerializeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SerializeError::CapacityExceeded(n) => write!(f, "serialized program needs {n} bytes"),
            SerializeError::UnmappableTarget { offset } => {
                write!(f, "operand of instruction at {offset:#x} cannot be relocated")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnmappedOffset(pub u16);

impl fmt::Display for UnmappedOffset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "serialized offset {:#x} is not an instruction of the original", self.0)
    }
}

/// (fragment, original offset) ↔ serialized offset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelocationMap {
    fwd: BTreeMap<(u8, u16), u16>,
    rev: BTreeMap<u16, (u8, u16)>,
}

impl RelocationMap {
    fn insert(&mut self, frag: u8, orig: u16, ser: u16) {
        self.fwd.insert((frag, orig), ser);
        self.rev.insert(ser, (frag, orig));
    }

    pub fn get(&self, frag: u8, orig: u16) -> Option<u16> {
        self.fwd.get(&(frag, orig)).copied()
    }

    pub fn entry(&self, ser: u16) -> Option<(u8, u16)> {
        self.rev.get(&ser).copied()
    }

    /// Original offset of the instruction at serialized offset `ip`.
    pub fn map_ip(&self, ip: u16) -> Result<u16, UnmappedOffset> {
        self.entry(ip).map(|(_, o)| o).ok_or(UnmappedOffset(ip))
    }

    /// All entries as (fragment, original, serialized) triples.
    pub fn triples(&self) -> impl Iterator<Item = (u8, u16, u16)> + '_ {
        self.fwd.iter().map(|((f, o), s)| (*f, *o, *s))
    }

    pub fn from_triples(t: impl IntoIterator<Item = (u8, u16, u16)>) -> RelocationMap {
        let mut m = RelocationMap::default();
        for (f, o, s) in t {
            m.insert(f, o, s);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.fwd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fwd.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FragmentInfo {
    pub start: u16,
    pub origin: u16,
    /// Serialized offset of the joining HLT.
    pub join: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedProgram {
    pub code: Vec<u8>,
    pub map: RelocationMap,
    pub fragments: Vec<FragmentInfo>,
}

impl SerializedProgram {
    pub fn fragment_of(&self, ip: u16) -> Option<usize> {
        self.fragments.iter().rposition(|f| f.start <= ip).filter(|&i| ip <= self.fragments[i].join)
    }
}

/// A decoded fragment: instruction offsets and where it ends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub origin: u16,
    pub insns: Vec<(u16, Insn, usize)>,
    pub end: u16,
}

impl Fragment {
    fn aligned(&self, off: u16) -> bool {
        self.insns.binary_search_by_key(&off, |(o, _, _)| *o).is_ok()
    }
}

/// Decodes from `origin` until HLT, UD, or the end of the code region.
pub fn unroll_misaligned(p: &[u8], origin: u16) -> Fragment {
    let mut insns = Vec::new();
    let mut off = origin as usize;
    while off < CODE_REGION {
        let (insn, len) = decode(p, off).expect("offset inside the code region");
        insns.push((off as u16, insn, len));
        off += len;
        if matches!(insn, Insn::Hlt | Insn::Ud { .. }) {
            break;
        }
    }
    Fragment { origin, insns, end: off.min(CODE_REGION) as u16 }
}

/// Linear decode of the whole testcase.
fn linear(p: &[u8]) -> Fragment {
    let mut insns = Vec::new();
    let mut off = 0usize;
    while off < p.len() {
        let (insn, len) = decode(p, off).expect("offset inside the code region");
        insns.push((off as u16, insn, len));
        off += len;
    }
    Fragment { origin: 0, insns, end: off as u16 }
}

#[derive(Debug, Clone, Copy)]
enum Item {
    Plain(Insn),
    Branch { kind: BranchKind, target: (u8, u16), long: bool },
    LoadRip { rd: u8, abs: i64, orig: u16 },
    Join,
}

fn branch_insn(kind: BranchKind, long: bool, rel: i32) -> Insn {
    match (kind, long) {
        (BranchKind::Jmp, false) => Insn::Jmp { rel: rel as i8 },
        (BranchKind::Jz, false) => Insn::Jz { rel: rel as i8 },
        (BranchKind::Jnz, false) => Insn::Jnz { rel: rel as i8 },
        (BranchKind::Call, false) => Insn::Call { rel: rel as i8 },
        (BranchKind::Jmp, true) => Insn::JmpL { rel: rel as i16 },
        (BranchKind::Jz, true) => Insn::JzL { rel: rel as i16 },
        (BranchKind::Jnz, true) => Insn::JnzL { rel: rel as i16 },
        (BranchKind::Call, true) => Insn::CallL { rel: rel as i16 },
    }
}

fn item_len(it: &Item) -> usize {
    match it {
        Item::Plain(i) => {
            let mut v = Vec::new();
            encode(i, &mut v);
            v.len()
        }
        Item::Branch { long, .. } => 2 + *long as usize,
        Item::LoadRip { .. } => 4,
        Item::Join => 1,
    }
}

/// LOADRIP displacement at `ser` that faults or loads exactly like `abs`.
fn loadrip_rel(abs: i64, ser: usize, orig: u16) -> Result<i16, SerializeError> {
    let next = ser as i64 + 4;
    let last = (MEM_SIZE - 8) as i64;
    if (0..CODE_REGION as i64).contains(&abs) {
        // Any execute-only address faults the same way.
        return Ok(-next as i16);
    }
    if !(0..=last).contains(&abs) {
        return Ok(i16::MIN);
    }
    i16::try_from(abs - next).map_err(|_| SerializeError::UnmappableTarget { offset: orig })
}

/// Builds the serialized twin of `p`.
pub fn serialize(p: &[u8]) -> Result<SerializedProgram, SerializeError> {
    if p.len() > MAX_INPUT {
        return Err(SerializeError::CapacityExceeded(p.len()));
    }
    let mut frags = alloc::vec![linear(p)];
    // Discover fragments; resolve every branch to (fragment, offset).
    let mut targets: BTreeMap<(usize, u16), (u8, u16)> = BTreeMap::new();
    let mut f = 0;
    while f < frags.len() {
        for i in 0..frags[f].insns.len() {
            let (off, insn, len) = frags[f].insns[i];
            let Some((_, rel)) = insn.branch() else { continue };
            let t = branch_target(off as usize, len, rel) as u16;
            let dest = if frags[f].aligned(t) {
                f
            } else if let Some(g) = frags.iter().position(|g| g.aligned(t)) {
                g
            } else {
                if frags.len() == MAX_FRAGMENTS {
                    return Err(SerializeError::CapacityExceeded(CODE_REGION + 1));
                }
                frags.push(unroll_misaligned(p, t));
                frags.len() - 1
            };
            targets.insert((f, off), (dest as u8, t));
        }
        f += 1;
    }

    // Item stream with a FENCE after every instruction and a HLT per fragment.
    let mut items: Vec<(Option<(u8, u16)>, Item)> = Vec::new();
    for (fi, frag) in frags.iter().enumerate() {
        for &(off, insn, len) in &frag.insns {
            let it = match insn {
                _ if insn.branch().is_some() => {
                    let (kind, _) = insn.branch().expect("branch");
                    let long = matches!(insn, Insn::JmpL { .. } | Insn::JzL { .. } | Insn::JnzL { .. } | Insn::CallL { .. });
                    Item::Branch { kind, target: targets[&(fi, off)], long }
                }
                Insn::LoadRip { rd, rel } => Item::LoadRip { rd, abs: off as i64 + len as i64 + rel as i64, orig: off },
                _ => Item::Plain(insn),
            };
            items.push((Some((fi as u8, off)), it));
            items.push((None, Item::Plain(Insn::Fence)));
        }
        items.push((Some((fi as u8, frag.end)), Item::Join));
    }

    // Relax short branches until every displacement fits.
    let mut addrs = Vec::with_capacity(items.len());
    let mut map;
    loop {
        addrs.clear();
        map = RelocationMap::default();
        let mut a = 0usize;
        for (key, it) in &items {
            addrs.push(a);
            if let Some((fi, off)) = key {
                // The join HLT does not shadow a real instruction at the
                // same offset.
                if map.get(*fi, *off).is_none() {
                    map.insert(*fi, *off, a as u16);
                }
            }
            a += item_len(it);
        }
        if a > CODE_REGION {
            return Err(SerializeError::CapacityExceeded(a));
        }
        let mut changed = false;
        for (i, (_, it)) in items.iter_mut().enumerate() {
            if let Item::Branch { target, long: long @ false, .. } = it {
                let t = map.get(target.0, target.1).expect("target mapped") as i32;
                if i8::try_from(t - (addrs[i] as i32 + 2)).is_err() {
                    *long = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut code = Vec::new();
    for (i, (_, it)) in items.iter().enumerate() {
        let a = addrs[i];
        let insn = match *it {
            Item::Plain(insn) => insn,
            Item::Branch { kind, target, long } => {
                let t = map.get(target.0, target.1).expect("target mapped") as i32;
                branch_insn(kind, long, t - (a as i32 + 2 + long as i32))
            }
            Item::LoadRip { rd, abs, orig } => Insn::LoadRip { rd, rel: loadrip_rel(abs, a, orig)? },
            Item::Join => Insn::Hlt,
        };
        encode(&insn, &mut code);
    }
    let mut fragments = Vec::new();
    let mut cursor = 0;
    for frag in &frags {
        let join_idx = items[cursor..].iter().position(|(_, it)| matches!(it, Item::Join)).expect("join") + cursor;
        fragments.push(FragmentInfo { start: addrs[cursor] as u16, origin: frag.origin, join: addrs[join_idx] as u16 });
        cursor = join_idx + 1;
    }
    Ok(SerializedProgram { code, map, fragments })
}
