//! 48-bit µop words.
//!
//! Layout: `opcode[47:36] | dst[35:30] | src[29:24] | imm[23:0]`.
//!
//! Inside `imm` most µops carry an "operand B" that is either an immediate or
//! a register: bit 23 selects register mode (index in `imm[5:0]`), bit 22 is
//! the update-flags modifier and `imm[21:0]` holds the immediate value.
//! CRBUS µops use `imm[11:0]` as the CRBUS address and `imm[17:12]` as an
//! auxiliary bit index / mask.

use core::fmt;

pub const UOP_MASK: u64 = (1 << 48) - 1;

pub const IMM_REG_FLAG: u32 = 1 << 23;
pub const IMM_FLAGS_MOD: u32 = 1 << 22;
pub const IMM_VALUE_MASK: u32 = (1 << 22) - 1;

/// A µ-register index (6 bits).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(pub u8);

impl Reg {
    pub const TMP10: Reg = Reg(10);
    pub const TMP11: Reg = Reg(11);
    pub const TMP14: Reg = Reg(14);
    /// Guest register r0 (`rax` in listings).
    pub const R0: Reg = Reg(16);
    pub const R7: Reg = Reg(23);
    /// Current macro-instruction ip.
    pub const RIP: Reg = Reg(24);
    /// Next macro-instruction ip; written by control-flow routines.
    pub const NIP: Reg = Reg(25);
    /// Guest register selected by the first decoded operand.
    pub const OPD: Reg = Reg(26);
    /// Guest register selected by the second decoded operand.
    pub const OPS: Reg = Reg(27);
    /// Decoded (sign-extended) immediate of the macro instruction.
    pub const IMM: Reg = Reg(28);
    /// Guest flags: bit 0 = ZF, bit 1 = CF.
    pub const FLAGS: Reg = Reg(29);
    /// Reads as zero, writes are discarded.
    pub const ZERO: Reg = Reg(63);

    pub const fn tmp(i: u8) -> Reg {
        Reg(i)
    }

    pub const fn gpr(i: u8) -> Reg {
        Reg(16 + i)
    }

    pub fn name(self) -> RegName {
        RegName(self.0)
    }

    pub fn parse(s: &str) -> Option<Reg> {
        let fixed = match s {
            "rax" => Some(16),
            "rip" => Some(24),
            "nip" => Some(25),
            "opd" => Some(26),
            "ops" => Some(27),
            "imm" => Some(28),
            "flags" => Some(29),
            "zero" | "" => Some(63),
            _ => None,
        };
        if let Some(i) = fixed {
            return Some(Reg(i));
        }
        let num = |prefix: &str, base: u8, count: u8| -> Option<Reg> {
            let n: u8 = s.strip_prefix(prefix)?.parse().ok()?;
            (n < count).then_some(Reg(base + n))
        };
        num("tmpv", 30, 4)
            .or_else(|| num("tmp", 0, 16))
            .or_else(|| num("r", 16, 8))
            .or_else(|| num("ureg", 0, 64))
    }
}

pub struct RegName(u8);

impl fmt::Display for RegName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0..=15 => write!(f, "tmp{}", self.0),
            16..=23 => write!(f, "r{}", self.0 - 16),
            24 => f.write_str("rip"),
            25 => f.write_str("nip"),
            26 => f.write_str("opd"),
            27 => f.write_str("ops"),
            28 => f.write_str("imm"),
            29 => f.write_str("flags"),
            30..=33 => write!(f, "tmpv{}", self.0 - 30),
            63 => f.write_str("zero"),
            n => write!(f, "ureg{}", n),
        }
    }
}

/// Operand shape of a mnemonic, drives both the assembler and the
/// disassembler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Form {
    /// No operands: `NOP`.
    Bare,
    /// `dst := OP(B)`.
    DstB,
    /// `dst := OP(src, B)` with optional `!flags`.
    Alu,
    /// `OP(src, B)`: value in src, address/target in B.
    SrcB,
    /// `[dst :=] OP(src, [aux,] addr)` CRBUS write.
    CrWrite,
    /// `dst := OP()`.
    DstOnly,
    /// `OP(B)`.
    BOnly,
    /// `OP(src, target)` conditional branch.
    Branch,
    /// `WRSEGFLD(src, SEG, FIELD)`.
    SegWrite,
    /// `dst := RDSEGFLD(SEG, FIELD)`.
    SegRead,
    /// `SIGEVENT(src, code)`.
    Event,
}

macro_rules! opcodes {
    ($( $name:ident = $val:literal, $text:literal, $form:ident; )*) => {
        /// Defined opcodes of the simulated engine.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        #[repr(u16)]
        pub enum Opcode { $( $name = $val, )* }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[ $( Opcode::$name, )* ];

            pub fn from_u16(v: u16) -> Option<Opcode> {
                match v { $( $val => Some(Opcode::$name), )* _ => None }
            }

            pub fn mnemonic(self) -> &'static str {
                match self { $( Opcode::$name => $text, )* }
            }

            pub fn form(self) -> Form {
                match self { $( Opcode::$name => Form::$form, )* }
            }

            pub fn from_mnemonic(s: &str) -> Option<Opcode> {
                match s { $( $text => Some(Opcode::$name), )* _ => None }
            }
        }
    };
}

opcodes! {
    Nop = 0x001, "NOP", Bare;
    NopB = 0x002, "NOPB", Bare;
    SigEvent = 0x003, "SIGEVENT", Event;
    RngGen = 0x004, "RNGGEN_DSZ64", DstOnly;
    RsPush = 0x005, "RSPUSH", BOnly;
    RsPop = 0x006, "RSPOP", DstOnly;
    IncCov = 0x007, "INCCOV_DSZ16", BOnly;
    StCov = 0x008, "STCOV_DSZ64", SrcB;
    LdCov = 0x009, "LDCOV_DSZ16", DstB;
    ZeroExt = 0x0AB, "ZEROEXT_DSZ64", DstB;
    Add = 0x0B0, "ADD_DSZ64", Alu;
    Sub = 0x0B1, "SUB_DSZ64", Alu;
    Xor = 0x0B2, "XOR_DSZ64", Alu;
    And = 0x0B3, "AND_DSZ64", Alu;
    Or = 0x0B4, "OR_DSZ64", Alu;
    LdPphys = 0x0C0, "LDPPHYS_DSZ64", DstB;
    StPphys = 0x0C1, "STPPHYS_DSZ64", SrcB;
    LdLin = 0x0C2, "LDLIN_DSZ64", DstB;
    StLin = 0x0C3, "STLIN_DSZ64", SrcB;
    LdStgBuf = 0x0C8, "LDSTGBUF_DSZ64", DstB;
    StStgBuf = 0x0C9, "STSTGBUF_DSZ64", SrcB;
    MoveToCreg = 0x0D0, "MOVETOCREG_DSZ64", CrWrite;
    MoveFromCreg = 0x0D1, "MOVEFROMCREG_DSZ64", DstB;
    MoveToCregAnd = 0x0D2, "MOVETOCREG_AND_DSZ64", CrWrite;
    MoveToCregBtr = 0x0D3, "MOVETOCREG_BTR_DSZ64", CrWrite;
    MoveToCregBts = 0x0D4, "MOVETOCREG_BTS_DSZ64", CrWrite;
    UJmp = 0x140, "UJMP", BOnly;
    UJmpReg = 0x141, "UJMPREG", BOnly;
    SaveUip = 0x142, "SAVEUIP", DstOnly;
    UJmpCcNotTakenCondNz = 0x151, "UJMPCC_DIRECT_NOTTAKEN_CONDNZ", Branch;
    Unk256 = 0x256, "UNK_256", Bare;
    WrSegFld = 0xC6B, "WRSEGFLD", SegWrite;
    RdSegFld = 0xC6C, "RDSEGFLD", SegRead;
}

impl Opcode {
    pub fn is_crbus_write(self) -> bool {
        matches!(
            self,
            Opcode::MoveToCreg | Opcode::MoveToCregAnd | Opcode::MoveToCregBtr | Opcode::MoveToCregBts
        )
    }

    /// Whether the µop transfers control (ends a basic block).
    pub fn is_jump(self) -> bool {
        matches!(self, Opcode::UJmp | Opcode::UJmpReg | Opcode::UJmpCcNotTakenCondNz)
    }
}

/// Operand B of a µop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperandB {
    Imm(u32),
    Reg(Reg),
}

/// Error for out-of-range fields given to [`MicroOp::encode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldOverflow {
    Opcode(u16),
    Dst(u8),
    Src(u8),
    Imm(u32),
}

impl fmt::Display for FieldOverflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldOverflow::Opcode(v) => write!(f, "opcode {v:#x} exceeds 12 bits"),
            FieldOverflow::Dst(v) => write!(f, "dst {v} exceeds 6 bits"),
            FieldOverflow::Src(v) => write!(f, "src {v} exceeds 6 bits"),
            FieldOverflow::Imm(v) => write!(f, "imm {v:#x} exceeds 24 bits"),
        }
    }
}

/// A raw 48-bit µop word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MicroOp(u64);

impl MicroOp {
    pub const NOP: MicroOp = MicroOp(0x001 << 36);

    pub fn encode(opcode: u16, dst: u8, src: u8, imm: u32) -> Result<MicroOp, FieldOverflow> {
        if opcode >= 1 << 12 {
            return Err(FieldOverflow::Opcode(opcode));
        }
        if dst >= 1 << 6 {
            return Err(FieldOverflow::Dst(dst));
        }
        if src >= 1 << 6 {
            return Err(FieldOverflow::Src(src));
        }
        if imm >= 1 << 24 {
            return Err(FieldOverflow::Imm(imm));
        }
        Ok(MicroOp(
            (opcode as u64) << 36 | (dst as u64) << 30 | (src as u64) << 24 | imm as u64,
        ))
    }

    /// Wraps a raw word, truncating to 48 bits.
    pub const fn from_raw(raw: u64) -> MicroOp {
        MicroOp(raw & UOP_MASK)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub const fn opcode_bits(self) -> u16 {
        (self.0 >> 36) as u16
    }

    pub fn opcode(self) -> Option<Opcode> {
        Opcode::from_u16(self.opcode_bits())
    }

    pub const fn dst(self) -> Reg {
        Reg(((self.0 >> 30) & 0x3F) as u8)
    }

    pub const fn src(self) -> Reg {
        Reg(((self.0 >> 24) & 0x3F) as u8)
    }

    pub const fn imm(self) -> u32 {
        (self.0 & 0xFF_FFFF) as u32
    }

    pub fn operand_b(self) -> OperandB {
        let imm = self.imm();
        if imm & IMM_REG_FLAG != 0 {
            OperandB::Reg(Reg((imm & 0x3F) as u8))
        } else {
            OperandB::Imm(imm & IMM_VALUE_MASK)
        }
    }

    pub fn updates_flags(self) -> bool {
        self.imm() & IMM_FLAGS_MOD != 0
    }

    pub fn crbus_aux(self) -> u8 {
        ((self.imm() >> 12) & 0x3F) as u8
    }

    pub fn crbus_imm_addr(self) -> u16 {
        (self.imm() & 0xFFF) as u16
    }

    /// Convenience constructor used by code generators; panics on overflow,
    /// which is a programming error for the fixed fields used internally.
    pub fn build(op: Opcode, dst: Reg, src: Reg, imm: u32) -> MicroOp {
        MicroOp::encode(op as u16, dst.0, src.0, imm).expect("µop fields in range")
    }

    pub fn imm_b(value: u32) -> u32 {
        value & IMM_VALUE_MASK
    }

    pub fn reg_b(r: Reg) -> u32 {
        IMM_REG_FLAG | r.0 as u32
    }
}

/// Segment selectors known to the segment-cache analog.
pub const SEGMENTS: [&str; 10] = ["ES", "CS", "SS", "DS", "FS", "GS", "GDT", "IDT", "LDT", "TR"];
/// Fields of a segment-cache entry.
pub const SEG_FIELDS: [&str; 4] = ["BASE", "LIMIT", "SEL", "ATTR"];

pub const SEG_GDT: u8 = 6;
pub const FIELD_BASE: u8 = 0;

pub fn seg_imm(seg: u8, field: u8) -> u32 {
    (seg as u32) << 4 | field as u32
}

/// Guest-visible events raised by `SIGEVENT`.
pub mod event {
    pub const HALT: u32 = 1;
    pub const UD: u32 = 2;
    pub const IO: u32 = 3;
    pub const CPUINFO: u32 = 4;
}
