use proptest::prelude::*;
use ufuzz_core::engine::*;
use ufuzz_core::ucode::asm::assemble_at;
use ufuzz_core::ucode::{MicroOp, Opcode, Reg, UcodeAddress, UcodeImage};

fn addr(a: u16) -> UcodeAddress {
    UcodeAddress::new(a as u32).unwrap()
}

fn engine_with(src: &str, at: u16) -> Engine {
    let a = assemble_at(src, at).unwrap();
    Engine::new(a.to_image().unwrap())
}

#[test]
fn hook_lookup_examples() {
    let mut t = HookTable::default();
    t.entries[0] = HookEntry { enabled: true, src: 0x0100, dst: 0x7C00 };
    assert_eq!(t.lookup(true, addr(0x0100)), addr(0x7C00));
    assert_eq!(t.lookup(true, addr(0x0101)), addr(0x7C01));
    assert_eq!(t.lookup(true, addr(0x0102)), addr(0x0102));
    assert_eq!(t.lookup(false, addr(0x0100)), addr(0x0100));
}

#[test]
fn single_triad_runs_to_uend() {
    let mut e = engine_with("NOP\nNOP\nNOP SEQW UEND0", 0x100);
    e.trace_enabled = true;
    let r = e.run_from_entry(addr(0x100), &mut NullBus::default(), 100).unwrap();
    assert_eq!(r.outcome, Outcome::Uend);
    assert_eq!(e.trace.executed.len(), 3);
}

#[test]
fn slot_three_is_invalid() {
    let mut e = engine_with("UJMP(0x103)\nNOP\nNOP SEQW UEND0", 0x100);
    let err = e.run_from_entry(addr(0x100), &mut NullBus::default(), 100).unwrap_err();
    assert_eq!(err, EngineError::InvalidAddress(0x103));
}

#[test]
fn budget_counts_rom_fetches() {
    let mut e = engine_with("l: NOP\nNOP\nNOP SEQW GOTO l", 0x100);
    let r = e.run_from_entry(addr(0x100), &mut NullBus::default(), 50).unwrap();
    assert_eq!(r.outcome, Outcome::BudgetExhausted);
    assert_eq!(r.charged, 50);
}

const LISTING1: &str = "
tmp2 := ZEROEXT_DSZ64(0xabab)
tmp0 := ZEROEXT_DSZ64(0x1000)
tmp1 := LDPPHYS_DSZ64(tmp0)
tmp0 := SUB_DSZ64(tmp0, tmp1)
UJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp0, taken)
PAYLOAD
rax := ZEROEXT_DSZ64(0xdead)
NOPB
NOP SEQW SYNCFULL
NOPB
taken:
UNK_256() SEQW LFNCEWAIT, UEND0
";

fn listing(payload: &str) -> Engine {
    engine_with(&LISTING1.replace("PAYLOAD", payload), 0x7F00)
}

#[test]
fn listing_rolls_back_rax() {
    let mut e = listing("NOP");
    e.trace_enabled = true;
    let r = e.run_from_entry(addr(0x7F00), &mut NullBus::default(), 100).unwrap();
    assert_eq!(r.outcome, Outcome::Uend);
    assert_eq!(e.state.read(Reg::R0), 0);
    assert!(e.trace.executed.iter().any(|(_, s)| *s), "window executed speculatively");
    // Nothing after the SYNCFULL triad runs speculatively.
    let fence_triad = 0x7F08;
    let spec: Vec<u16> = e.trace.executed.iter().filter(|(_, s)| *s).map(|(a, _)| a.value()).collect();
    assert!(spec.iter().all(|a| *a <= fence_triad + 2), "{spec:x?}");
}

#[test]
fn stable_timeout_rule_locks() {
    let w = MicroOp::build(Opcode::MoveToCreg, Reg::ZERO, Reg(2), 0x701);
    let mut e = listing("MOVETOCREG_DSZ64(tmp2, 0x701)");
    e.fault = FaultModel::correct().with_rule(FaultRule {
        matcher: UopMatch::word(w),
        persists_through_rollback: false,
        lockup: Lockup::StableTimeout,
    });
    let r = e.run_from_entry(addr(0x7F00), &mut NullBus::default(), 100).unwrap();
    assert_eq!(r.outcome, Outcome::Lockup(LockupClass::StableTimeout));
}

#[test]
fn crbus_persistence_disables_hooks() {
    let mut e = listing("rax := ZEROEXT_DSZ64(1)\nMOVETOCREG_DSZ64(rax, 0x692)");
    e.fault = FaultModel::correct().with_rule(FaultRule {
        matcher: UopMatch::crbus(0x692),
        persists_through_rollback: true,
        lockup: Lockup::None,
    });
    assert!(e.state.hook_table_active());
    e.run_from_entry(addr(0x7F00), &mut NullBus::default(), 100).unwrap();
    assert!(!e.state.hook_table_active());
    assert_eq!(e.state.read(Reg::R0), 0, "register effects still roll back");
}

#[test]
fn segment_write_persists() {
    let mut e = listing("tmp7 := ZEROEXT_DSZ64(0x4242)\nWRSEGFLD(tmp7, GDT, BASE)");
    e.fault = FaultModel::correct().with_rule(FaultRule {
        matcher: UopMatch::opcode(Opcode::WrSegFld),
        persists_through_rollback: true,
        lockup: Lockup::None,
    });
    e.run_from_entry(addr(0x7F00), &mut NullBus::default(), 100).unwrap();
    assert_eq!(e.state.gdt_base(), 0x4242);
    assert_eq!(e.state.read(Reg(7)), 0);
}

#[test]
fn speculative_write_rolls_back_without_rule() {
    let mut e = listing("tmp1 := ZEROEXT_DSZ64(5)");
    e.state.write(Reg(1), 77);
    e.run_from_entry(addr(0x7F00), &mut NullBus::default(), 100).unwrap();
    // The template itself reloads tmp1 architecturally from the null bus.
    assert_eq!(e.state.read(Reg(1)), 0);
    let mut e = engine_with("tmp0 := ZEROEXT_DSZ64(1)\nUJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp0, t)\ntmp1 := ZEROEXT_DSZ64(5) SEQW UEND0\nt: NOP SEQW UEND0", 0x200);
    e.state.write(Reg(1), 77);
    e.run_from_entry(addr(0x200), &mut NullBus::default(), 100).unwrap();
    assert_eq!(e.state.read(Reg(1)), 77);
}

#[test]
fn perf_counter_channel() {
    for counts in [false, true] {
        let mut e = listing("UNK_256()");
        e.fault.perf_counts_speculative = counts;
        e.run_from_entry(addr(0x7F00), &mut NullBus::default(), 100).unwrap();
        // The landing triad's UNK_256 always counts once.
        assert_eq!(e.state.perf(MS_ENTRY), 1 + counts as u64);
    }
}

#[test]
fn control_ports() {
    let mut e = Engine::new(UcodeImage::new());
    e.write_control_port(0x692, 1).unwrap();
    assert!(!e.state.hook_table_active());
    let h = HookEntry { enabled: true, src: 0x100, dst: 0x7C00 };
    e.write_control_port(PORT_HOOK_BASE + 3, h.pack()).unwrap();
    assert_eq!(e.hooks.entries[3], h);
    let bad = HookEntry { enabled: true, src: 0x101, dst: 0x7C00 };
    assert_eq!(e.write_control_port(PORT_HOOK_BASE, bad.pack()), Err(EngineError::PortRejected(0xF00)));
    e.write_control_port(PORT_PATCH_BASE + 1, Engine::patch_word_value(0, MicroOp::NOP.raw())).unwrap();
    assert_eq!(e.image.word(0x7C04), MicroOp::NOP.raw());
    assert_eq!(e.write_control_port(0x123, 0), Err(EngineError::UnknownPort(0x123)));
}

#[test]
fn unstable_frequency() {
    let w = MicroOp::build(Opcode::MoveToCreg, Reg(0), Reg(0), 0x701);
    let mut hits = 0;
    let n = 10_000;
    let base = listing("tmp0 := MOVETOCREG_DSZ64(tmp0, 0x701)");
    for trial in 0..n {
        let mut e = base.clone();
        e.fault = FaultModel::correct().with_rule(FaultRule {
            matcher: UopMatch::word(w),
            persists_through_rollback: false,
            lockup: Lockup::Unstable { num: 1, den: 2 },
        });
        e.set_trial(7, trial);
        let r = e.run_from_entry(addr(0x7F00), &mut NullBus::default(), 100).unwrap();
        if r.outcome == Outcome::Lockup(LockupClass::Unstable) {
            hits += 1;
        }
    }
    let p = hits as f64 / n as f64;
    assert!((p - 0.5).abs() < 0.05, "{p}");
}

/// Random window µops that never jump or signal.
fn window_uop() -> impl Strategy<Value = String> {
    let reg = prop_oneof![Just("tmp3"), Just("tmp4"), Just("r1"), Just("r2"), Just("flags"), Just("tmp9")];
    let imm = 0u32..0x3FFFFF;
    prop_oneof![
        (reg.clone(), imm.clone()).prop_map(|(r, i)| format!("{r} := ZEROEXT_DSZ64({i:#x})")),
        (reg.clone(), reg.clone(), imm.clone()).prop_map(|(d, s, i)| format!("{d} := ADD_DSZ64({s}, {i:#x}) !flags")),
        (reg.clone(), 0u32..0x1000).prop_map(|(r, a)| format!("MOVETOCREG_DSZ64({r}, {a:#x})")),
        (reg.clone(), 0u32..0x1000).prop_map(|(r, a)| format!("tmp5 := MOVETOCREG_BTS_DSZ64({r}, 0x3, {a:#x})")),
        (reg.clone(), 0u32..0xFFFF).prop_map(|(r, a)| format!("STSTGBUF_DSZ64({r}, {a:#x})")),
        (reg.clone(), 0u32..0x3FF0).prop_map(|(r, a)| format!("STCOV_DSZ64({r}, {a:#x})")),
        (0u32..0x3FF0).prop_map(|a| format!("INCCOV_DSZ16({a:#x})")),
        reg.clone().prop_map(|r| format!("WRSEGFLD({r}, GDT, BASE)")),
        reg.clone().prop_map(|r| format!("RSPUSH_DSZ64({r})")),
        reg.clone().prop_map(|r| format!("{r} := RNGGEN_DSZ64()")),
        Just("UNK_256()".to_string()),
        (reg.clone(), 0u32..0x8000).prop_map(|(r, a)| format!("STPPHYS_DSZ64({r}, {a:#x})")),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]
    #[test]
    fn rollback_complete(window in proptest::collection::vec(window_uop(), 1..9), perf in any::<bool>()) {
        let src = format!(
            "tmp0 := ZEROEXT_DSZ64(1)\nUJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp0, done)\n{}\ndone: NOP SEQW UEND0",
            window.join("\n")
        );
        let mut e = engine_with(&src, 0x7C00);
        e.fault.perf_counts_speculative = perf;
        let mut bus = NullBus::default();
        // Snapshot the state right before the branch resolves.
        e.run_from_entry(addr(0x7C00), &mut bus, 0).unwrap();
        let mut reference = engine_with("tmp0 := ZEROEXT_DSZ64(1)\nNOP SEQW UEND0", 0x7C00);
        reference.run_from_entry(addr(0x7C00), &mut NullBus::default(), 0).unwrap();
        let mut got = e.state.clone();
        let mut want = reference.state.clone();
        if perf {
            got.perf.clear();
            want.perf.clear();
        }
        prop_assert_eq!(got, want);
        prop_assert!(e.cov.iter().all(|b| *b == 0));
        prop_assert_eq!(bus.pos, 0);
    }
}
