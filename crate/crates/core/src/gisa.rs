//! Guest ISA: variable-length byte encoding and decoder.
//!
//! | byte | form | len |
//! |------|------|-----|
//! | 00 HLT, 01 NOP, 02 FENCE, 34 RET | - | 1 |
//! | 10 MOVI r, imm32 | r, imm32 LE | 6 |
//! | 11 ADD / 12 SUB / 13 XOR rd, rs | rd, rs | 3 |
//! | 20 LOAD rd, [rs+disp8] | rd, rs, disp8 | 4 |
//! | 21 STORE [rs+disp8], rv | rv, rs, disp8 | 4 |
//! | 22 LOADRIP rd, rel16 | rd, rel16 | 4 |
//! | 30 JMP / 31 JZ / 32 JNZ / 33 CALL rel8 | rel8 | 2 |
//! | 35 JMPL / 36 JZL / 37 JNZL / 38 CALLL rel16 | rel16 | 3 |
//! | 40 CRND / 41 CREP / 42 CSEG r | r | 2 |
//! | 43 CCR r, imm8 | r, imm8 | 3 |
//! | 50 IOW imm8 | imm8 | 2 |
//! | 0F 01 CPUINFO | - | 2 |
//!
//! Register bytes use their low three bits. Relative branches and LOADRIP
//! are relative to the end of the instruction. Bytes past the end of the
//! buffer read as zero. Anything else decodes as a one-byte UD.

use core::fmt;

pub const CODE_REGION: usize = 0x4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Insn {
    Hlt,
    Nop,
    Fence,
    Movi { r: u8, imm: u32 },
    Add { rd: u8, rs: u8 },
    Sub { rd: u8, rs: u8 },
    Xor { rd: u8, rs: u8 },
    Load { rd: u8, rs: u8, disp: i8 },
    Store { rv: u8, rs: u8, disp: i8 },
    LoadRip { rd: u8, rel: i16 },
    Jmp { rel: i8 },
    Jz { rel: i8 },
    Jnz { rel: i8 },
    Call { rel: i8 },
    Ret,
    JmpL { rel: i16 },
    JzL { rel: i16 },
    JnzL { rel: i16 },
    CallL { rel: i16 },
    Crnd { r: u8 },
    Crep { r: u8 },
    Cseg { r: u8 },
    Ccr { r: u8, imm: u8 },
    Iow { port: u8 },
    Cpuinfo,
    /// Undefined encoding; `entry` is the µcode entry it dispatches to.
    Ud { entry: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    OffsetOutOfRange(usize),
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::OffsetOutOfRange(o) => write!(f, "offset {o:#x} outside the code region"),
        }
    }
}

/// Branch flavour of an instruction with a relative target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Jmp,
    Jz,
    Jnz,
    Call,
}

fn byte(code: &[u8], i: usize) -> u8 {
    code.get(i).copied().unwrap_or(0)
}

/// Decodes one instruction at `offset`.
pub fn decode(code: &[u8], offset: usize) -> Result<(Insn, usize), DecodeError> {
    if offset >= CODE_REGION.max(code.len()) {
        return Err(DecodeError::OffsetOutOfRange(offset));
    }
    let b = |k: usize| byte(code, offset + k);
    let r = |k: usize| b(k) & 7;
    let rel16 = || i16::from_le_bytes([b(1), b(2)]);
    let op = b(0);
    let insn = match op {
        0x00 => (Insn::Hlt, 1),
        0x01 => (Insn::Nop, 1),
        0x02 => (Insn::Fence, 1),
        0x10 => (Insn::Movi { r: r(1), imm: u32::from_le_bytes([b(2), b(3), b(4), b(5)]) }, 6),
        0x11 => (Insn::Add { rd: r(1), rs: r(2) }, 3),
        0x12 => (Insn::Sub { rd: r(1), rs: r(2) }, 3),
        0x13 => (Insn::Xor { rd: r(1), rs: r(2) }, 3),
        0x20 => (Insn::Load { rd: r(1), rs: r(2), disp: b(3) as i8 }, 4),
        0x21 => (Insn::Store { rv: r(1), rs: r(2), disp: b(3) as i8 }, 4),
        0x22 => (Insn::LoadRip { rd: r(1), rel: i16::from_le_bytes([b(2), b(3)]) }, 4),
        0x30 => (Insn::Jmp { rel: b(1) as i8 }, 2),
        0x31 => (Insn::Jz { rel: b(1) as i8 }, 2),
        0x32 => (Insn::Jnz { rel: b(1) as i8 }, 2),
        0x33 => (Insn::Call { rel: b(1) as i8 }, 2),
        0x34 => (Insn::Ret, 1),
        0x35 => (Insn::JmpL { rel: rel16() }, 3),
        0x36 => (Insn::JzL { rel: rel16() }, 3),
        0x37 => (Insn::JnzL { rel: rel16() }, 3),
        0x38 => (Insn::CallL { rel: rel16() }, 3),
        0x40 => (Insn::Crnd { r: r(1) }, 2),
        0x41 => (Insn::Crep { r: r(1) }, 2),
        0x42 => (Insn::Cseg { r: r(1) }, 2),
        0x43 => (Insn::Ccr { r: r(1), imm: b(2) }, 3),
        0x50 => (Insn::Iow { port: b(1) }, 2),
        0x0F if b(1) == 0x01 => (Insn::Cpuinfo, 2),
        0x0F => (Insn::Ud { entry: 0x800 + b(1) as u16 * 8 }, 1),
        _ => (Insn::Ud { entry: op as u16 * 8 }, 1),
    };
    Ok(insn)
}

impl Insn {
    /// µcode entry address of the routine implementing this instruction.
    pub fn entry(&self) -> u16 {
        let op: u16 = match self {
            Insn::Hlt => 0x00,
            Insn::Nop => 0x01,
            Insn::Fence => 0x02,
            Insn::Movi { .. } => 0x10,
            Insn::Add { .. } => 0x11,
            Insn::Sub { .. } => 0x12,
            Insn::Xor { .. } => 0x13,
            Insn::Load { .. } => 0x20,
            Insn::Store { .. } => 0x21,
            Insn::LoadRip { .. } => 0x22,
            Insn::Jmp { .. } => 0x30,
            Insn::Jz { .. } => 0x31,
            Insn::Jnz { .. } => 0x32,
            Insn::Call { .. } => 0x33,
            Insn::Ret => 0x34,
            Insn::JmpL { .. } => 0x35,
            Insn::JzL { .. } => 0x36,
            Insn::JnzL { .. } => 0x37,
            Insn::CallL { .. } => 0x38,
            Insn::Crnd { .. } => 0x40,
            Insn::Crep { .. } => 0x41,
            Insn::Cseg { .. } => 0x42,
            Insn::Ccr { .. } => 0x43,
            Insn::Iow { .. } => 0x50,
            Insn::Cpuinfo => return 0x808,
            Insn::Ud { entry } => return *entry,
        };
        op * 8
    }

    /// Operand context: (opd register, ops register, immediate).
    pub fn operands(&self) -> (u8, u8, u64) {
        let sx8 = |v: i8| v as i64 as u64;
        let sx16 = |v: i16| v as i64 as u64;
        match *self {
            Insn::Movi { r, imm } => (r, 0, imm as u64),
            Insn::Add { rd, rs } | Insn::Sub { rd, rs } | Insn::Xor { rd, rs } => (rd, rs, 0),
            Insn::Load { rd, rs, disp } => (rd, rs, sx8(disp)),
            Insn::Store { rv, rs, disp } => (rv, rs, sx8(disp)),
            Insn::LoadRip { rd, rel } => (rd, 0, sx16(rel)),
            Insn::Jmp { rel } | Insn::Jz { rel } | Insn::Jnz { rel } | Insn::Call { rel } => (0, 0, sx8(rel)),
            Insn::JmpL { rel } | Insn::JzL { rel } | Insn::JnzL { rel } | Insn::CallL { rel } => (0, 0, sx16(rel)),
            Insn::Crnd { r } | Insn::Crep { r } | Insn::Cseg { r } => (r, 0, 0),
            Insn::Ccr { r, imm } => (r, 0, imm as u64),
            Insn::Iow { port } => (0, 0, port as u64),
            _ => (0, 0, 0),
        }
    }

    /// Relative control transfer, if any: kind and displacement.
    pub fn branch(&self) -> Option<(BranchKind, i32)> {
        Some(match *self {
            Insn::Jmp { rel } => (BranchKind::Jmp, rel as i32),
            Insn::Jz { rel } => (BranchKind::Jz, rel as i32),
            Insn::Jnz { rel } => (BranchKind::Jnz, rel as i32),
            Insn::Call { rel } => (BranchKind::Call, rel as i32),
            Insn::JmpL { rel } => (BranchKind::Jmp, rel as i32),
            Insn::JzL { rel } => (BranchKind::Jz, rel as i32),
            Insn::JnzL { rel } => (BranchKind::Jnz, rel as i32),
            Insn::CallL { rel } => (BranchKind::Call, rel as i32),
            _ => return None,
        })
    }

    /// Ends a linear decode (no fall-through into the next byte).
    pub fn is_terminator(&self) -> bool {
        matches!(self, Insn::Hlt | Insn::Ud { .. })
    }
}

/// Branch target of a relative transfer at `offset` with length `len`,
/// modulo the code region.
pub fn branch_target(offset: usize, len: usize, rel: i32) -> usize {
    (offset as i64 + len as i64 + rel as i64).rem_euclid(CODE_REGION as i64) as usize
}

/// Encodes an instruction. Inverse of [`decode`] for every defined form.
pub fn encode(insn: &Insn, out: &mut alloc::vec::Vec<u8>) {
    let rel16 = |out: &mut alloc::vec::Vec<u8>, op: u8, rel: i16| {
        out.push(op);
        out.extend_from_slice(&rel.to_le_bytes());
    };
    match *insn {
        Insn::Hlt => out.push(0x00),
        Insn::Nop => out.push(0x01),
        Insn::Fence => out.push(0x02),
        Insn::Movi { r, imm } => {
            out.extend_from_slice(&[0x10, r]);
            out.extend_from_slice(&imm.to_le_bytes());
        }
        Insn::Add { rd, rs } => out.extend_from_slice(&[0x11, rd, rs]),
        Insn::Sub { rd, rs } => out.extend_from_slice(&[0x12, rd, rs]),
        Insn::Xor { rd, rs } => out.extend_from_slice(&[0x13, rd, rs]),
        Insn::Load { rd, rs, disp } => out.extend_from_slice(&[0x20, rd, rs, disp as u8]),
        Insn::Store { rv, rs, disp } => out.extend_from_slice(&[0x21, rv, rs, disp as u8]),
        Insn::LoadRip { rd, rel } => {
            out.extend_from_slice(&[0x22, rd]);
            out.extend_from_slice(&rel.to_le_bytes());
        }
        Insn::Jmp { rel } => out.extend_from_slice(&[0x30, rel as u8]),
        Insn::Jz { rel } => out.extend_from_slice(&[0x31, rel as u8]),
        Insn::Jnz { rel } => out.extend_from_slice(&[0x32, rel as u8]),
        Insn::Call { rel } => out.extend_from_slice(&[0x33, rel as u8]),
        Insn::Ret => out.push(0x34),
        Insn::JmpL { rel } => rel16(out, 0x35, rel),
        Insn::JzL { rel } => rel16(out, 0x36, rel),
        Insn::JnzL { rel } => rel16(out, 0x37, rel),
        Insn::CallL { rel } => rel16(out, 0x38, rel),
        Insn::Crnd { r } => out.extend_from_slice(&[0x40, r]),
        Insn::Crep { r } => out.extend_from_slice(&[0x41, r]),
        Insn::Cseg { r } => out.extend_from_slice(&[0x42, r]),
        Insn::Ccr { r, imm } => out.extend_from_slice(&[0x43, r, imm]),
        Insn::Iow { port } => out.extend_from_slice(&[0x50, port]),
        Insn::Cpuinfo => out.extend_from_slice(&[0x0F, 0x01]),
        Insn::Ud { entry } => {
            if entry >= 0x800 {
                out.extend_from_slice(&[0x0F, ((entry - 0x800) / 8) as u8]);
            } else {
                out.push((entry / 8) as u8);
            }
        }
    }
}

/// One-byte opcodes with a defined instruction (the 0x0F page excluded).
pub const DEFINED_OPCODES: [u8; 25] = [
    0x00, 0x01, 0x02, 0x10, 0x11, 0x12, 0x13, 0x20, 0x21, 0x22, 0x30, 0x31, 0x32, 0x33, 0x34, 0x35, 0x36, 0x37,
    0x38, 0x40, 0x41, 0x42, 0x43, 0x50, 0x0F,
];
