use proptest::prelude::*;
use ufuzz_core::engine::*;
use ufuzz_core::rom::build_rom;
use ufuzz_core::specfuzz::*;
use ufuzz_core::ucode::asm::assemble_at;
use ufuzz_core::ucode::{MicroOp, Opcode, Reg, UcodeAddress};

const LISTING: &str = "
tmp2 := ZEROEXT_DSZ64(0xabab)
tmp0 := ZEROEXT_DSZ64(0x1000)
tmp1 := LDPPHYS_DSZ32_ASZ16_SC1(tmp0)
tmp0 := SUB_DSZ64(tmp0, tmp1)
UJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp0, taken)
NOP
rax := ZEROEXT_DSZ64(0xdead)
NOPB
NOP SEQW SYNCFULL
NOPB
taken:
UNK_256() SEQW LFNCEWAIT, UEND0
";

fn engine() -> Engine {
    Engine::new(build_rom())
}

fn uop(text: &str) -> MicroOp {
    ufuzz_core::ucode::asm::parse_uop(text, &|_| None).unwrap()
}

#[test]
fn nop_payload_has_listing_shape() {
    let t = build_template(&[MicroOp::NOP]).unwrap();
    let want = assemble_at(LISTING, TEMPLATE_BASE).unwrap();
    assert_eq!(t.triads, want.triads);
    assert_eq!(t.taken, want.label("taken").unwrap());
}

#[test]
fn empty_template_runs_to_uend() {
    let t = build_template(&[]).unwrap();
    let mut e = engine();
    t.install(&mut e).unwrap();
    let r = e.run_from_entry(t.entry(), &mut NullBus::default(), 100).unwrap();
    assert_eq!(r.outcome, Outcome::Uend);
}

#[test]
fn nop_has_no_effect() {
    let r = run_spec_trial(&engine(), MicroOp::NOP, &FaultModel::correct(), DEFAULT_TRIALS, 1).unwrap();
    assert!(r.effects.is_empty());
    assert_eq!(r.lockup, None);
    assert_eq!(r.baseline_digest, r.post_digest);
}

#[test]
fn crbus_write_persists_into_hook_enable() {
    let mut e = engine();
    e.state.write(Reg::R0, 1);
    let cand = uop("MOVETOCREG_DSZ64(rax, 0x692)");
    let fault = FaultModel::correct().with_rule(FaultRule {
        matcher: UopMatch::crbus(CRBUS_HOOK_DISABLE),
        persists_through_rollback: true,
        lockup: Lockup::None,
    });
    let r = run_spec_trial(&e, cand, &fault, DEFAULT_TRIALS, 1).unwrap();
    assert_eq!(r.effects, vec![Effect { component: Component::Crbus, address: 0x692, old: 0, new: 1 }]);
    assert_ne!(r.baseline_digest, r.post_digest);
    // Same candidate without the rule rolls back.
    let r = run_spec_trial(&e, cand, &FaultModel::correct(), 4, 1).unwrap();
    assert!(r.effects.is_empty());
}

#[test]
fn catalog_rule_locks_every_trial() {
    let cand = uop("MOVETOCREG_DSZ64(tmp2, 0x701)");
    let rows = parse_catalog(BUNDLED_CATALOG).unwrap();
    let r = run_spec_trial(&engine(), cand, &catalog_fault_model(&rows), DEFAULT_TRIALS, 3).unwrap();
    assert_eq!(r.lockup, Some(LockupClass::StableTimeout));
    assert_eq!(r.lockups, DEFAULT_TRIALS);
}

#[test]
fn catalog_sweep_reproduces_classes() {
    let rows = parse_catalog(BUNDLED_CATALOG).unwrap();
    let fault = catalog_fault_model(&rows);
    let words: Vec<_> = rows.iter().map(|r| r.word).collect();
    let results = sweep_catalog(&engine(), &words, &fault, DEFAULT_TRIALS, 11).unwrap();
    let table = lockup_table(&results);
    assert_eq!(table.len(), rows.len());
    for (got, want) in table.iter().zip(&rows) {
        assert_eq!((got.word, got.class), (want.word, want.class), "{}", want.disassembly);
    }
    assert_eq!(results, sweep_catalog(&engine(), &words, &fault, DEFAULT_TRIALS, 11).unwrap());
    assert!(sweep_catalog(&engine(), &[], &fault, DEFAULT_TRIALS, 11).unwrap().is_empty());
}

#[test]
fn sound_in_correct_mode() {
    let results = sweep_catalog(&engine(), &representative_candidates(), &FaultModel::correct(), 4, 0).unwrap();
    for r in &results {
        assert!(r.effects.is_empty(), "{:?}: {:?}", r.candidate, r.effects);
        assert_eq!(r.lockup, None);
    }
    // Catalog words without their rules are harmless too.
    let rows = parse_catalog(BUNDLED_CATALOG).unwrap();
    let words: Vec<_> = rows.iter().map(|r| r.word).collect();
    assert!(lockup_table(&sweep_catalog(&engine(), &words, &FaultModel::correct(), 2, 0).unwrap()).is_empty());
}

#[test]
fn perf_channel_moves_only_ms_entry() {
    let mut fault = FaultModel::correct();
    fault.perf_counts_speculative = true;
    let r = run_spec_trial(&engine(), uop("UNK_256()"), &fault, 4, 0).unwrap();
    assert_eq!(r.effects, vec![Effect { component: Component::Perf(MS_ENTRY), address: 0, old: 1, new: 2 }]);
    fault.perf_counts_speculative = false;
    assert!(run_spec_trial(&engine(), uop("UNK_256()"), &fault, 4, 0).unwrap().effects.is_empty());
}

#[test]
fn catalog_rejects_bad_rows() {
    assert!(parse_catalog("0x1;Sometimes;NOP").is_err());
    assert!(parse_catalog("0x1;Unstable").is_err());
    // Word and disassembly disagree.
    assert!(parse_catalog("0x0d0000000001;Unstable;NOP").is_err());
    assert!(parse_catalog("").unwrap().is_empty());
}

/// Side-effecting candidates whose write is observable from the template's
/// pre-state (tmp2 = 0xabab).
fn effectful() -> impl Strategy<Value = MicroOp> {
    prop_oneof![
        (0x100u32..0x800).prop_map(|a| MicroOp::build(Opcode::MoveToCreg, Reg::ZERO, Reg(2), a)),
        (0u32..32, 0x100u32..0x800).prop_map(|(b, a)| uop(&format!("MOVETOCREG_BTS_DSZ64(tmp2, {b:#x}, {a:#x})"))),
        (0u32..0xba00).prop_map(|a| uop(&format!("STSTGBUF_DSZ64(tmp2, {a:#x})"))),
        (0u32..0x3FF0).prop_map(|a| uop(&format!("STCOV_DSZ64(tmp2, {a:#x})"))),
        (0u32..0x3FF0).prop_map(|a| uop(&format!("INCCOV_DSZ16({a:#x})"))),
        Just(uop("WRSEGFLD(tmp2, GDT, BASE)")),
        Just(uop("RSPUSH(tmp2)")),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn persisting_rules_are_detected(cand in effectful(), by_word in any::<bool>()) {
        let matcher = if by_word { UopMatch::word(cand) } else { UopMatch { opcode: Some(cand.opcode_bits()), ..Default::default() } };
        let fault = FaultModel::correct().with_rule(FaultRule { matcher, persists_through_rollback: true, lockup: Lockup::None });
        let r = run_spec_trial(&engine(), cand, &fault, 2, 0).unwrap();
        prop_assert!(!r.effects.is_empty(), "{:?}", cand);
        prop_assert_ne!(r.baseline_digest, r.post_digest);
        let r = run_spec_trial(&engine(), cand, &FaultModel::correct(), 2, 0).unwrap();
        prop_assert!(r.effects.is_empty());
    }
}

#[test]
fn entry_is_template_base() {
    assert_eq!(build_template(&[]).unwrap().entry(), UcodeAddress::new(0x7F00).unwrap());
}
