//! The shipped ROM: µcode routines implementing the guest ISA.
//!
//! Every one of the 512 entry points (one-byte opcode × 8, and 0x800 + second
//! byte × 8 for the 0x0F page) holds a routine; undefined encodings signal UD.
//! `opd`/`ops` reach the guest registers named by the instruction, `imm` holds
//! its sign- or zero-extended immediate and `nip` the fall-through ip.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::ucode::asm::assemble;
use crate::ucode::{UcodeAddress, UcodeImage};

pub const BODY_BASE: u16 = 0x1000;

/// Routines that occupy an entry, keyed by entry address.
fn routines() -> Vec<(u16, String)> {
    let end = "SEQW UEND0";
    let alu = |op: &str| format!("opd := {op}_DSZ64(opd, ops) !flags\nNOP\nNOP {end}");
    let jmp = format!("nip := ADD_DSZ64(nip, imm)\nNOP\nNOP {end}");
    let jz = |e: u16| {
        format!(
            "tmp1 := AND_DSZ64(flags, 1)\nUJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp1, {t:#x})\nNOP {end}\n\
             nip := ADD_DSZ64(nip, imm)\nNOP\nNOP {end}",
            t = e + 4
        )
    };
    let jnz = |e: u16| {
        format!(
            "tmp1 := AND_DSZ64(flags, 1)\nUJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp1, {t:#x})\nnip := ADD_DSZ64(nip, imm) {end}\n\
             NOP\nNOP\nNOP {end}",
            t = e + 4
        )
    };
    let call = format!("RSPUSH_DSZ64(nip)\nr7 := SUB_DSZ64(r7, 8)\nnip := ADD_DSZ64(nip, imm) {end}");
    let mut v: Vec<(u8, String)> = alloc::vec![
        (0x00, format!("SIGEVENT(zero, 0x1)\nNOP\nNOP {end}")),
        (0x01, format!("NOP\nNOP\nNOP {end}")),
        (0x02, "NOP\nNOP\nNOP SEQW LFNCEWAIT, UEND0".into()),
        (0x10, format!("opd := ZEROEXT_DSZ64(imm)\nNOP\nNOP {end}")),
        (0x11, alu("ADD")),
        (0x12, alu("SUB")),
        (0x13, alu("XOR")),
        (0x20, format!("tmp0 := ADD_DSZ64(ops, imm)\nopd := LDLIN_DSZ64(tmp0)\nNOP {end}")),
        (0x21, format!("tmp0 := ADD_DSZ64(ops, imm)\nSTLIN_DSZ64(opd, tmp0)\nNOP {end}")),
        (0x22, format!("tmp0 := ADD_DSZ64(nip, imm)\nopd := LDLIN_DSZ64(tmp0)\nNOP {end}")),
        (0x30, jmp.clone()),
        (0x31, jz(0x31 * 8)),
        (0x32, jnz(0x32 * 8)),
        (0x33, call.clone()),
        (0x34, format!("tmp0 := RSPOP_DSZ64()\nr7 := ADD_DSZ64(r7, 8)\nnip := ZEROEXT_DSZ64(tmp0) {end}")),
        (0x35, jmp),
        (0x36, jz(0x36 * 8)),
        (0x37, jnz(0x37 * 8)),
        (0x38, call),
        // Draw a random value; CF is set iff it is nonzero.
        (
            0x40,
            format!(
                "tmp0 := RNGGEN_DSZ64()\nopd := ZEROEXT_DSZ64(tmp0)\nUJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp0, crnd_set)\n\
                 flags := AND_DSZ64(flags, 1)\nNOP\nNOP {end}"
            ),
        ),
        // Loop decrementing the register; the body triad runs once per count.
        (
            0x41,
            format!(
                "tmp0 := ZEROEXT_DSZ64(opd)\nUJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp0, {l:#x})\nNOP {end}\n\
                 opd := SUB_DSZ64(opd, 1)\ntmp0 := ZEROEXT_DSZ64(opd)\nUJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp0, {l:#x}) {end}",
                l = 0x41 * 8 + 4
            ),
        ),
        // Swap the register with the GDT base in the segment cache.
        (
            0x42,
            format!(
                "tmp7 := ZEROEXT_DSZ64(opd)\ntmp3 := RDSEGFLD(GDT, BASE)\nWRSEGFLD(tmp7, GDT, BASE)\n\
                 opd := ZEROEXT_DSZ64(tmp3)\nNOP\nNOP {end}"
            ),
        ),
        // Swap the register with CRBUS[0x680 + imm8].
        (
            0x43,
            format!(
                "tmp1 := ADD_DSZ64(imm, 0x680)\ntmp3 := MOVEFROMCREG_DSZ64(tmp1)\nMOVETOCREG_DSZ64(opd, tmp1)\n\
                 opd := ZEROEXT_DSZ64(tmp3)\nNOP\nNOP {end}"
            ),
        ),
        (0x50, format!("SIGEVENT(imm, 0x3)\nNOP\nNOP {end}")),
    ];
    v.sort_by_key(|(op, _)| *op);
    let mut out: Vec<(u16, String)> = v.into_iter().map(|(op, s)| (op as u16 * 8, s)).collect();
    out.push((0x808, format!("SIGEVENT(zero, 0x4)\nNOP\nNOP {end}")));
    out
}

/// Listing text of the full ROM.
pub fn rom_source() -> String {
    let defined = routines();
    let mut src = String::new();
    for entry in (0..0x1000u16).step_by(8) {
        src.push_str(&format!(".org {entry:#06x}\n"));
        match defined.iter().find(|(e, _)| *e == entry) {
            Some((_, body)) => src.push_str(body),
            None => src.push_str("SIGEVENT(zero, 0x2)\nNOP\nNOP SEQW UEND0"),
        }
        src.push('\n');
    }
    src.push_str(&format!(".org {BODY_BASE:#06x}\ncrnd_set:\nflags := OR_DSZ64(flags, 2)\nNOP\nNOP SEQW UEND0\n"));
    src
}

/// Assembles the shipped ROM image.
pub fn build_rom() -> UcodeImage {
    assemble(&rom_source()).expect("shipped ROM assembles").to_image().expect("ROM fits")
}

/// The 512 macro-instruction entry points.
pub fn entry_points() -> Vec<UcodeAddress> {
    (0..0x1000u16).step_by(8).map(UcodeAddress::new_unchecked).collect()
}

/// Head of the CREP loop body (executed once per iteration).
pub const CREP_LOOP_HEAD: u16 = 0x41 * 8 + 4;
