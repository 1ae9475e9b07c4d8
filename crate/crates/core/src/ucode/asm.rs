//! Textual µcode listings.
//!
//! Grammar, one µop per line:
//!
//! ```text
//! [label:] [reg :=] MNEMONIC[(args)] [!flags] [SEQW item{, item}] [@0xRAW]
//! .org 0xADDR
//! ; comment
//! ```
//!
//! SEQW items are `UEND0`, `LFNCEWAIT`, `SYNCFULL` and `GOTO target`. A SEQW
//! clause closes the current triad; a label or `.org` starts a new one, padding
//! the open triad with NOPs. `@0xRAW` forces the stored word and is emitted by
//! the disassembler for words the textual form cannot express.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::{self, Write};

use super::uop::{Form, MicroOp, Opcode, OperandB, Reg, IMM_FLAGS_MOD, IMM_REG_FLAG, IMM_VALUE_MASK, SEGMENTS, SEG_FIELDS};
use super::{SequenceWord, Sync, Triad, UcodeAddress, UcodeImage, ADDR_SPACE};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AsmError {
    ParseError { line: usize, msg: String },
    UnknownMnemonic { line: usize, name: String },
    UnresolvedLabel { line: usize, name: String },
}

impl fmt::Display for AsmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AsmError::ParseError { line, msg } => write!(f, "line {line}: {msg}"),
            AsmError::UnknownMnemonic { line, name } => write!(f, "line {line}: unknown mnemonic `{name}`"),
            AsmError::UnresolvedLabel { line, name } => write!(f, "line {line}: unresolved label `{name}`"),
        }
    }
}

/// Result of assembling a listing: triads keyed by base address plus the
/// label table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Assembled {
    pub triads: Vec<(u16, Triad)>,
    pub labels: BTreeMap<String, u16>,
}

impl Assembled {
    pub fn label(&self, name: &str) -> Option<UcodeAddress> {
        self.labels.get(name).map(|a| UcodeAddress::new_unchecked(*a))
    }

    pub fn load_into(&self, image: &mut UcodeImage) -> Result<(), super::image::ImageError> {
        for (base, t) in &self.triads {
            image.insert(*base, *t)?;
        }
        Ok(())
    }

    pub fn to_image(&self) -> Result<UcodeImage, super::image::ImageError> {
        let mut img = UcodeImage::new();
        self.load_into(&mut img)?;
        Ok(img)
    }
}

pub fn assemble(source: &str) -> Result<Assembled, AsmError> {
    assemble_at(source, 0)
}

struct Stmt<'a> {
    line: usize,
    addr: u16,
    text: &'a str,
    raw: Option<u64>,
}

struct SeqStmt<'a> {
    line: usize,
    base: u16,
    items: &'a str,
}

/// Assembles with the first triad at `origin` (overridden by `.org`).
pub fn assemble_at(source: &str, origin: u16) -> Result<Assembled, AsmError> {
    let perr = |line: usize, msg: &str| AsmError::ParseError { line, msg: msg.to_string() };
    if origin & 3 != 0 {
        return Err(perr(0, "origin must be triad aligned"));
    }
    let mut labels: BTreeMap<String, u16> = BTreeMap::new();
    let mut stmts: Vec<Stmt> = Vec::new();
    let mut seqs: Vec<SeqStmt> = Vec::new();
    let mut bases: Vec<u16> = Vec::new();
    // Next triad base and number of µops already placed in it.
    let mut base = origin;
    let mut fill = 0u16;

    let close = |base: &mut u16, fill: &mut u16, bases: &mut Vec<u16>| {
        if *fill > 0 {
            bases.push(*base);
            *base = base.wrapping_add(4);
            *fill = 0;
        }
    };

    for (idx, raw_line) in source.lines().enumerate() {
        let line = idx + 1;
        let mut text = raw_line.split(';').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        if let Some(rest) = text.strip_prefix(".org") {
            let v = parse_number(rest.trim()).ok_or_else(|| perr(line, "bad .org operand"))?;
            if v & 3 != 0 || v >= ADDR_SPACE as u64 {
                return Err(perr(line, ".org must be a triad-aligned µcode address"));
            }
            close(&mut base, &mut fill, &mut bases);
            base = v as u16;
            continue;
        }
        if let Some((label, rest)) = split_label(text) {
            close(&mut base, &mut fill, &mut bases);
            if labels.insert(label.to_string(), base).is_some() {
                return Err(perr(line, "duplicate label"));
            }
            text = rest.trim();
            if text.is_empty() {
                continue;
            }
        }
        let (text, raw) = match text.split_once('@') {
            Some((t, r)) => {
                let v = parse_number(r.trim()).ok_or_else(|| perr(line, "bad raw word"))?;
                if v >> 48 != 0 {
                    return Err(perr(line, "raw word exceeds 48 bits"));
                }
                (t.trim(), Some(v))
            }
            None => (text, None),
        };
        let (uop_text, seq_text) = match find_keyword(text, "SEQW") {
            Some(pos) => (text[..pos].trim(), Some(text[pos + 4..].trim())),
            None => (text, None),
        };
        if base as u32 + fill as u32 >= ADDR_SPACE as u32 {
            return Err(perr(line, "listing runs past the end of the address space"));
        }
        stmts.push(Stmt { line, addr: base + fill, text: uop_text, raw });
        fill += 1;
        if let Some(items) = seq_text {
            seqs.push(SeqStmt { line, base, items });
            close(&mut base, &mut fill, &mut bases);
        } else if fill == 3 {
            close(&mut base, &mut fill, &mut bases);
        }
    }
    close(&mut base, &mut fill, &mut bases);

    let mut triads: BTreeMap<u16, Triad> = BTreeMap::new();
    for b in &bases {
        if triads.insert(*b, Triad::default()).is_some() {
            return Err(perr(0, &format!("triad {b:#06x} defined twice")));
        }
    }
    let resolve = |name: &str| labels.get(name).copied();
    for s in &stmts {
        let word = match s.raw {
            Some(r) => MicroOp::from_raw(r),
            None => parse_uop(s.text, &resolve).map_err(|e| e.at(s.line))?,
        };
        let t = triads.get_mut(&(s.addr & !3)).expect("placed triad");
        t.ops[(s.addr & 3) as usize] = word;
    }
    for s in &seqs {
        let seq = parse_seqw(s.items, &resolve).map_err(|e| e.at(s.line))?;
        triads.get_mut(&s.base).expect("placed triad").seq = seq;
    }
    Ok(Assembled { triads: triads.into_iter().collect(), labels })
}

fn split_label(text: &str) -> Option<(&str, &str)> {
    let pos = text.find(':')?;
    if text[pos + 1..].starts_with('=') {
        return None;
    }
    let label = text[..pos].trim();
    let ok = !label.is_empty()
        && label.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '<' | '>'));
    ok.then(|| (label, &text[pos + 1..]))
}

fn find_keyword(text: &str, kw: &str) -> Option<usize> {
    let mut start = 0;
    while let Some(p) = text[start..].find(kw) {
        let pos = start + p;
        let before_ok = pos == 0 || text.as_bytes()[pos - 1].is_ascii_whitespace();
        let after = pos + kw.len();
        let after_ok = after == text.len() || text.as_bytes()[after].is_ascii_whitespace();
        if before_ok && after_ok {
            return Some(pos);
        }
        start = pos + kw.len();
    }
    None
}

pub(crate) fn parse_number(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(&h.replace('_', ""), 16).ok()
    } else {
        s.parse().ok()
    }
}

/// Parse error without a line number; attached by the caller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UopParseError {
    Syntax(String),
    UnknownMnemonic(String),
    UnresolvedLabel(String),
}

impl UopParseError {
    fn at(self, line: usize) -> AsmError {
        match self {
            UopParseError::Syntax(msg) => AsmError::ParseError { line, msg },
            UopParseError::UnknownMnemonic(name) => AsmError::UnknownMnemonic { line, name },
            UopParseError::UnresolvedLabel(name) => AsmError::UnresolvedLabel { line, name },
        }
    }
}

fn syntax(msg: &str) -> UopParseError {
    UopParseError::Syntax(msg.to_string())
}

/// Looks up a mnemonic, also accepting listing spellings with other
/// data/address size suffixes (`LDPPHYS_DSZ32_ASZ16_SC1` → `LDPPHYS_DSZ64`).
pub fn lookup_mnemonic(name: &str) -> Option<Opcode> {
    let upper = name.to_ascii_uppercase();
    if let Some(op) = Opcode::from_mnemonic(&upper) {
        return Some(op);
    }
    let stem = |s: &str| -> String { s.split("_DSZ").next().unwrap_or(s).to_string() };
    let want = stem(&upper);
    Opcode::ALL.iter().copied().find(|op| stem(op.mnemonic()) == want)
}

fn parse_operand_b(tok: &str, resolve: &dyn Fn(&str) -> Option<u16>) -> Result<u32, UopParseError> {
    let tok = tok.trim();
    if let Some(r) = Reg::parse(tok) {
        if !tok.is_empty() {
            return Ok(MicroOp::reg_b(r));
        }
    }
    let v = value_of(tok, resolve)?;
    if v > IMM_VALUE_MASK as u64 {
        return Err(syntax("immediate exceeds 22 bits"));
    }
    Ok(v as u32)
}

fn value_of(tok: &str, resolve: &dyn Fn(&str) -> Option<u16>) -> Result<u64, UopParseError> {
    let tok = tok.trim();
    if tok.is_empty() {
        return Err(syntax("missing operand"));
    }
    if tok.as_bytes()[0].is_ascii_digit() {
        return parse_number(tok).ok_or_else(|| syntax("bad number"));
    }
    resolve(tok).map(u64::from).ok_or_else(|| UopParseError::UnresolvedLabel(tok.to_string()))
}

fn parse_reg(tok: &str) -> Result<Reg, UopParseError> {
    Reg::parse(tok.trim()).ok_or_else(|| syntax(&format!("bad register `{}`", tok.trim())))
}

fn parse_named(tok: &str, names: &[&str], limit: u64) -> Result<u8, UopParseError> {
    let tok = tok.trim();
    if let Some(i) = names.iter().position(|n| n.eq_ignore_ascii_case(tok)) {
        return Ok(i as u8);
    }
    match parse_number(tok) {
        Some(v) if v < limit => Ok(v as u8),
        _ => Err(syntax(&format!("bad selector `{tok}`"))),
    }
}

/// Parses a single µop statement (no label, SEQW or raw suffix).
pub fn parse_uop(text: &str, resolve: &dyn Fn(&str) -> Option<u16>) -> Result<MicroOp, UopParseError> {
    let mut text = text.trim();
    let mut flags = false;
    if let Some(pos) = text.find('!') {
        let modifier = text[pos + 1..].trim();
        if modifier != "flags" {
            return Err(syntax(&format!("unknown modifier `!{modifier}`")));
        }
        flags = true;
        text = text[..pos].trim();
    }
    let (dst, body) = match text.split_once(":=") {
        Some((d, b)) => (Some(parse_reg(d)?), b.trim()),
        None => (None, text),
    };
    let (name, args) = match body.find('(') {
        Some(open) => {
            let close = body.rfind(')').ok_or_else(|| syntax("missing `)`"))?;
            if close < open || !body[close + 1..].trim().is_empty() {
                return Err(syntax("malformed argument list"));
            }
            (body[..open].trim(), Some(&body[open + 1..close]))
        }
        None => (body, None),
    };
    let args: Vec<&str> = match args {
        Some(a) if a.trim().is_empty() => Vec::new(),
        Some(a) => a.split(',').map(str::trim).collect(),
        None => Vec::new(),
    };
    let (opcode_bits, form) = match lookup_mnemonic(name) {
        Some(op) => (op as u16, op.form()),
        None => {
            let upper = name.to_ascii_uppercase();
            let num = upper
                .strip_prefix("UNK_")
                .and_then(|h| u16::from_str_radix(h, 16).ok())
                .filter(|v| *v < 0x1000);
            match num {
                Some(v) => (v, Form::Bare),
                None => return Err(UopParseError::UnknownMnemonic(name.to_string())),
            }
        }
    };
    let want = |n: usize| -> Result<(), UopParseError> {
        if args.len() == n {
            Ok(())
        } else {
            Err(syntax(&format!("`{name}` takes {n} operand(s)")))
        }
    };
    let has_dst = matches!(form, Form::DstB | Form::Alu | Form::DstOnly | Form::SegRead | Form::CrWrite);
    let dst = match dst {
        Some(d) => d,
        None if has_dst => Reg::ZERO,
        None => Reg(0),
    };
    let (src, mut imm) = match form {
        Form::Bare => {
            want(0)?;
            (Reg(0), 0)
        }
        Form::DstB | Form::BOnly => {
            want(1)?;
            (Reg(0), parse_operand_b(args[0], resolve)?)
        }
        Form::Alu | Form::SrcB | Form::Branch => {
            want(2)?;
            (parse_reg(args[0])?, parse_operand_b(args[1], resolve)?)
        }
        Form::DstOnly => {
            want(0)?;
            (Reg(0), 0)
        }
        Form::CrWrite => {
            if args.len() != 2 && args.len() != 3 {
                return Err(syntax(&format!("`{name}` takes 2 or 3 operands")));
            }
            let src = parse_reg(args[0])?;
            let aux = if args.len() == 3 { value_of(args[1], resolve)? } else { 0 };
            if aux > 0x3F {
                return Err(syntax("aux operand exceeds 6 bits"));
            }
            let addr_tok = args[args.len() - 1];
            let b = match Reg::parse(addr_tok) {
                Some(r) if !addr_tok.is_empty() => MicroOp::reg_b(r),
                _ => {
                    let v = value_of(addr_tok, resolve)?;
                    if v > 0xFFF {
                        return Err(syntax("CRBUS address exceeds 12 bits"));
                    }
                    v as u32
                }
            };
            (src, (aux as u32) << 12 | b)
        }
        Form::SegWrite => {
            want(3)?;
            let seg = parse_named(args[1], &SEGMENTS, 16)?;
            let field = parse_named(args[2], &SEG_FIELDS, 16)?;
            (parse_reg(args[0])?, super::uop::seg_imm(seg, field))
        }
        Form::SegRead => {
            want(2)?;
            let seg = parse_named(args[0], &SEGMENTS, 16)?;
            let field = parse_named(args[1], &SEG_FIELDS, 16)?;
            (Reg(0), super::uop::seg_imm(seg, field))
        }
        Form::Event => {
            want(2)?;
            let code = value_of(args[1], resolve)?;
            if code > IMM_VALUE_MASK as u64 {
                return Err(syntax("event code exceeds 22 bits"));
            }
            (parse_reg(args[0])?, code as u32)
        }
    };
    if flags {
        imm |= IMM_FLAGS_MOD;
    }
    MicroOp::encode(opcode_bits, dst.0, src.0, imm).map_err(|e| syntax(&e.to_string()))
}

fn parse_seqw(items: &str, resolve: &dyn Fn(&str) -> Option<u16>) -> Result<SequenceWord, UopParseError> {
    let mut seq = SequenceWord::NONE;
    for item in items.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let upper = item.to_ascii_uppercase();
        if upper == "UEND0" || upper == "UEND" {
            seq.uend = true;
        } else if upper == "LFNCEWAIT" {
            seq.sync = Sync::LfenceWait;
        } else if upper == "SYNCFULL" {
            seq.sync = Sync::SyncFull;
        } else if upper.starts_with("GOTO ") {
            let v = value_of(&item[5..], resolve)?;
            let a = UcodeAddress::new(v as u32).map_err(|e| syntax(&e.to_string()))?;
            if a.slot() != 0 {
                return Err(syntax("GOTO target must be slot 0"));
            }
            seq.goto_addr = Some(a);
        } else {
            return Err(syntax(&format!("unknown SEQW item `{item}`")));
        }
    }
    Ok(seq)
}

fn fmt_b(out: &mut String, b: OperandB) {
    match b {
        OperandB::Reg(r) => {
            let _ = write!(out, "{}", r.name());
        }
        OperandB::Imm(v) => {
            let _ = write!(out, "{v:#x}");
        }
    }
}

fn fmt_named(out: &mut String, v: u8, names: &[&str]) {
    match names.get(v as usize) {
        Some(n) => out.push_str(n),
        None => {
            let _ = write!(out, "{v}");
        }
    }
}

/// Best-effort text of a µop, without the `@raw` escape.
pub fn format_uop(w: MicroOp) -> String {
    let mut out = String::new();
    let (name, form) = match w.opcode() {
        Some(op) => (String::from(op.mnemonic()), op.form()),
        None => (format!("UNK_{:03X}", w.opcode_bits()), Form::Bare),
    };
    let has_dst = matches!(form, Form::DstB | Form::Alu | Form::DstOnly | Form::SegRead | Form::CrWrite);
    if has_dst && w.dst() != Reg::ZERO {
        let _ = write!(out, "{} := ", w.dst().name());
    }
    out.push_str(&name);
    let seg = (w.imm() >> 4 & 0xF) as u8;
    let field = (w.imm() & 0xF) as u8;
    match form {
        Form::Bare => {}
        Form::DstOnly => out.push_str("()"),
        Form::DstB | Form::BOnly => {
            out.push('(');
            fmt_b(&mut out, w.operand_b());
            out.push(')');
        }
        Form::Alu | Form::SrcB | Form::Branch => {
            let _ = write!(out, "({}, ", w.src().name());
            fmt_b(&mut out, w.operand_b());
            out.push(')');
        }
        Form::CrWrite => {
            let _ = write!(out, "({}, ", w.src().name());
            if w.crbus_aux() != 0 {
                let _ = write!(out, "{:#x}, ", w.crbus_aux());
            }
            if w.imm() & IMM_REG_FLAG != 0 {
                let _ = write!(out, "{}", Reg((w.imm() & 0x3F) as u8).name());
            } else {
                let _ = write!(out, "{:#05x}", w.crbus_imm_addr());
            }
            out.push(')');
        }
        Form::SegWrite => {
            let _ = write!(out, "({}, ", w.src().name());
            fmt_named(&mut out, seg, &SEGMENTS);
            out.push_str(", ");
            fmt_named(&mut out, field, &SEG_FIELDS);
            out.push(')');
        }
        Form::SegRead => {
            out.push('(');
            fmt_named(&mut out, seg, &SEGMENTS);
            out.push_str(", ");
            fmt_named(&mut out, field, &SEG_FIELDS);
            out.push(')');
        }
        Form::Event => {
            let _ = write!(out, "({}, {:#x})", w.src().name(), w.imm() & IMM_VALUE_MASK);
        }
    }
    if w.updates_flags() {
        out.push_str(" !flags");
    }
    out
}

/// Text of a µop that assembles back to exactly `w`.
pub fn disassemble_uop(w: MicroOp) -> String {
    let text = format_uop(w);
    let no_labels = |_: &str| None;
    match parse_uop(&text, &no_labels) {
        Ok(back) if back == w => text,
        _ => format!("{text} @{:#014x}", w.raw()),
    }
}

fn format_seqw(seq: &SequenceWord) -> String {
    let mut items: Vec<String> = Vec::new();
    match seq.sync {
        Sync::None => {}
        Sync::LfenceWait => items.push("LFNCEWAIT".into()),
        Sync::SyncFull => items.push("SYNCFULL".into()),
    }
    if let Some(a) = seq.goto_addr {
        items.push(format!("GOTO {:#06x}", a.value()));
    }
    if seq.uend {
        items.push("UEND0".into());
    }
    items.join(", ")
}

/// Listing of every stored triad whose base lies in `[start, end)`.
pub fn disassemble(image: &UcodeImage, start: u16, end: u16) -> String {
    let mut out = String::new();
    for (base, t) in image.iter().filter(|(b, _)| *b >= start && *b < end) {
        let _ = writeln!(out, ".org {base:#06x}");
        for (i, op) in t.ops.iter().enumerate() {
            let text = disassemble_uop(*op);
            let seq = format_seqw(&t.seq);
            if i == 2 && !seq.is_empty() {
                match text.split_once(" @") {
                    Some((t, raw)) => {
                        let _ = writeln!(out, "{t} SEQW {seq} @{raw}");
                    }
                    None => {
                        let _ = writeln!(out, "{text} SEQW {seq}");
                    }
                }
            } else {
                let _ = writeln!(out, "{text}");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const LISTING1: &str = "
entry:
tmp2 := ZEROEXT_DSZ64(0xabab)
tmp0 := ZEROEXT_DSZ64(0x1000)
tmp1 := LDPPHYS_DSZ32_ASZ16_SC1(tmp0)
tmp0 := SUB_DSZ64(tmp0, tmp1)
; speculative branch, misprediction forced
UJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp0, taken)
rax := ZEROEXT_DSZ64(0xdead)
NOPB
NOP SEQW SYNCFULL
NOPB
taken:
unk_256() SEQW LFNCEWAIT, UEND0
";

    #[test]
    fn single_triad() {
        let a = assemble("NOP\nNOP\nNOP SEQW UEND0").unwrap();
        assert_eq!(a.triads.len(), 1);
        assert!(a.triads[0].1.seq.uend);
    }

    #[test]
    fn listing_one_shape() {
        let a = assemble(LISTING1).unwrap();
        assert_eq!(a.triads.len(), 5);
        let first = a.triads[0].1.ops[0];
        assert_eq!(first, MicroOp::encode(0x0AB, 2, 0, 0xABAB).unwrap());
        assert_eq!(a.labels["taken"], 16);
        let branch = a.triads[1].1.ops[1];
        assert_eq!(branch.opcode(), Some(Opcode::UJmpCcNotTakenCondNz));
        assert_eq!(branch.operand_b(), OperandB::Imm(16));
        assert_eq!(a.triads[2].1.seq.sync, Sync::SyncFull);
        let last = a.triads[4].1;
        assert_eq!(last.ops[0].opcode(), Some(Opcode::Unk256));
        assert!(last.seq.uend);
        assert_eq!(last.seq.sync, Sync::LfenceWait);
    }

    #[test]
    fn forward_label() {
        let a = assemble("UJMP(end)\nNOP\nNOP\nend: NOP SEQW UEND0").unwrap();
        assert_eq!(a.triads[0].1.ops[0].operand_b(), OperandB::Imm(4));
    }

    #[test]
    fn errors_carry_lines() {
        assert_eq!(
            assemble("NOP\nFROB(tmp0)").unwrap_err(),
            AsmError::UnknownMnemonic { line: 2, name: "FROB".into() }
        );
        assert_eq!(
            assemble("UJMP(nowhere)").unwrap_err(),
            AsmError::UnresolvedLabel { line: 1, name: "nowhere".into() }
        );
        assert!(matches!(assemble("tmp0 := ADD_DSZ64(tmp0"), Err(AsmError::ParseError { line: 1, .. })));
    }

    #[test]
    fn nop_triad_listing() {
        let a = assemble("NOP\nNOP\nNOP").unwrap();
        let text = disassemble(&a.to_image().unwrap(), 0, 4);
        assert_eq!(text, ".org 0x0000\nNOP\nNOP\nNOP\n");
    }

    #[test]
    fn crbus_write_text() {
        let w = MicroOp::build(Opcode::MoveToCreg, Reg::ZERO, Reg(2), 0x701);
        assert_eq!(disassemble_uop(w), "MOVETOCREG_DSZ64(tmp2, 0x701)");
    }

    #[test]
    fn listing_fixpoint() {
        let img = assemble(LISTING1).unwrap().to_image().unwrap();
        let text = disassemble(&img, 0, 0x8000);
        let again = assemble(&text).unwrap().to_image().unwrap();
        assert_eq!(again, img);
    }

    fn triad_strategy() -> impl proptest::strategy::Strategy<Value = Triad> {
        use proptest::prelude::*;
        let word = prop_oneof![
            (0u64..(1 << 48)),
            (proptest::sample::select(Opcode::ALL), 0u8..64, 0u8..64, 0u32..(1 << 24)).prop_map(
                |(op, d, s, i)| MicroOp::encode(op as u16, d, s, i).unwrap().raw()
            ),
            (proptest::sample::select(Opcode::ALL), 0u8..64, 0u8..64, 0u32..0x1000).prop_map(
                |(op, d, s, i)| MicroOp::encode(op as u16, d, s, i).unwrap().raw()
            ),
        ];
        (
            [word.clone(), word.clone(), word],
            any::<bool>(),
            0u8..3,
            proptest::option::of(0u16..0x2000),
        )
            .prop_map(|(w, uend, sync, goto)| Triad {
                ops: w.map(MicroOp::from_raw),
                seq: SequenceWord {
                    uend,
                    sync: [Sync::None, Sync::LfenceWait, Sync::SyncFull][sync as usize],
                    goto_addr: goto.map(|g| UcodeAddress::new_unchecked(g * 4)),
                },
            })
    }

    proptest::proptest! {
        #[test]
        fn random_image_fixpoint(triads in proptest::collection::btree_map(0u16..0x2000, triad_strategy(), 1..24)) {
            let mut img = UcodeImage::new();
            for (slot, t) in &triads {
                img.insert(slot * 4, *t).unwrap();
            }
            let text = disassemble(&img, 0, 0x8000);
            let again = assemble(&text).unwrap().to_image().unwrap();
            proptest::prop_assert_eq!(again, img);
        }
    }
}
