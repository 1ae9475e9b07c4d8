use proptest::prelude::*;
use ufuzz_core::engine::Engine;
use ufuzz_core::instrument::*;
use ufuzz_core::rom::{build_rom, CREP_LOOP_HEAD};
use ufuzz_core::ucode::{hookable_addresses, UcodeAddress};
use ufuzz_core::vm::*;

fn addr(a: u16) -> UcodeAddress {
    UcodeAddress::new(a as u32).unwrap()
}

fn instrumented(plan: &HookPlan) -> Engine {
    let mut e = Engine::new(build_rom());
    install_runtime(&mut e).unwrap();
    install_plan(&mut e, plan).unwrap();
    e
}

/// Reference counter: how often each planned address is fetched, from an
/// uninstrumented traced run.
fn reference_counts(code: &[u8], plan: &HookPlan, seed: u64) -> Vec<(UcodeAddress, u64)> {
    let mut cfg = VmConfig::new(code.to_vec());
    cfg.rng_seed = seed;
    cfg.max_macro_insns = 300;
    let mut vm = Vm::new(build_rom(), cfg).unwrap();
    vm.engine.trace_enabled = true;
    vm.run();
    plan.observed().into_iter().map(|a| (a, vm.engine.trace.count(a) as u64)).collect()
}

#[test]
fn crep_loop_head_counts_iterations() {
    let plan = HookPlan::from_addresses(&[addr(CREP_LOOP_HEAD)]).unwrap();
    for n in [0u8, 1, 5, 37] {
        let code = vec![0x10, 0x03, n, 0, 0, 0, 0x41, 0x03, 0x00];
        let mut vm = Vm::with_engine(instrumented(&plan), VmConfig::new(code)).unwrap();
        let s = vm.run();
        assert_eq!(s.exit, ExitReason::Halt);
        let rep = read_coverage(&mut vm.engine, &plan);
        assert_eq!(rep.count(addr(CREP_LOOP_HEAD)), n as u64, "n={n}");
        if n > 0 {
            // rip of the CREP instruction.
            assert_eq!(rep.last_ip[&addr(CREP_LOOP_HEAD)], 6);
        }
        // Reading clears.
        assert!(read_coverage(&mut vm.engine, &plan).covered().next().is_none());
    }
}

#[test]
fn full_plan_costs_nine_writes_per_hook() {
    let addrs: Vec<_> = hookable_addresses().skip(40).take(16).collect();
    let plan = HookPlan::from_addresses(&addrs).unwrap();
    let mut e = Engine::new(build_rom());
    install_runtime(&mut e).unwrap();
    assert_eq!(install_plan(&mut e, &plan).unwrap(), 144);
    let d = e.control_digest();
    assert_eq!(install_plan(&mut e, &plan).unwrap(), 144);
    assert_eq!(e.control_digest(), d, "installing twice is idempotent");

    let one = HookPlan::from_addresses(&addrs[..1]).unwrap();
    let mut fresh = Engine::new(build_rom());
    install_runtime(&mut fresh).unwrap();
    assert_eq!(install_plan(&mut fresh, &one).unwrap(), 9);
    // Shrinking from 16 to 1 also disables the 15 stale registers.
    assert_eq!(install_plan(&mut e, &one).unwrap(), 9 + 15);
    assert_eq!(e.hooks.entries.iter().filter(|h| h.enabled).count(), 1);
}

#[test]
fn rejected_plan_leaves_engine_untouched() {
    let mut e = Engine::new(build_rom());
    install_runtime(&mut e).unwrap();
    let d = e.control_digest();
    let bad = HookPlan { hooks: vec![Hook { slot: 0, src: addr(0x100) }, Hook { slot: 1, src: addr(0x100) }] };
    assert!(install_plan(&mut e, &bad).is_err());
    assert_eq!(e.control_digest(), d);
}

#[test]
fn empty_run_reports_zero() {
    let addrs: Vec<_> = [0x88u16, 0x90, 0x98].iter().map(|a| addr(*a)).collect();
    let plan = HookPlan::from_addresses(&addrs).unwrap();
    let mut e = instrumented(&plan);
    let rep = read_coverage(&mut e, &plan);
    assert_eq!(rep.counts.len(), 6);
    assert!(rep.counts.values().all(|c| *c == 0));
}

/// Hook candidates inside the routines exercised by the random programs.
fn plan_strategy() -> impl Strategy<Value = HookPlan> {
    let used: Vec<UcodeAddress> = [0x00u16, 0x08, 0x10, 0x80, 0x88, 0x90, 0x98, 0x100, 0x108, 0x110, 0x180, 0x188, 0x190, 0x198, 0x1A0]
        .iter()
        .flat_map(|e| [*e, e + 2, e + 4, e + 6])
        .chain([CREP_LOOP_HEAD, CREP_LOOP_HEAD + 2, 0x200, 0x202, 0x210, 0x212, 0x218, 0x280, 0x1000, 0x1002])
        .map(addr)
        .collect();
    proptest::sample::subsequence(used, 1..=16).prop_shuffle().prop_map(|v| HookPlan::from_addresses(&v).unwrap())
}

fn program() -> impl Strategy<Value = Vec<u8>> {
    let insn = prop_oneof![
        (0u8..8, any::<u8>()).prop_map(|(r, i)| vec![0x10, r, i, 0, 0, 0]),
        (0x11u8..=0x13, 0u8..8, 0u8..8).prop_map(|(o, a, b)| vec![o, a, b]),
        (0u8..8, 0u8..4).prop_map(|(r, n)| vec![0x10, r, n, 0, 0, 0, 0x41, r]),
        (0u8..8).prop_map(|r| vec![0x40, r]),
        (0u8..8).prop_map(|r| vec![0x42, r]),
        (0u8..8, 0u8..4).prop_map(|(r, i)| vec![0x43, r, i]),
        (0x31u8..=0x32, 0u8..4).prop_map(|(o, d)| vec![o, d]),
        Just(vec![0x01]),
        Just(vec![0x02]),
    ];
    proptest::collection::vec(insn, 1..20).prop_map(|v| {
        let mut c: Vec<u8> = v.concat();
        c.extend([0x00; 4]);
        c
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn instrumentation_is_transparent_and_counts_exactly(code in program(), plan in plan_strategy(), seed in any::<u64>()) {
        let mut cfg = VmConfig::new(code.clone());
        cfg.rng_seed = seed;
        cfg.max_macro_insns = 300;
        let plain = run_testcase(&build_rom(), cfg.clone()).unwrap();
        let mut vm = Vm::with_engine(instrumented(&plan), cfg).unwrap();
        let hooked = vm.run();
        prop_assert_eq!(&plain, &hooked);
        let rep = read_coverage(&mut vm.engine, &plan);
        for (a, want) in reference_counts(&code, &plan, seed) {
            prop_assert_eq!(rep.count(a), want.min(0xFFFF), "{}", a);
        }
    }
}

#[test]
fn nop_entry_counts_once() {
    let plan = HookPlan::from_addresses(&[addr(0x08)]).unwrap();
    let mut vm = Vm::with_engine(instrumented(&plan), VmConfig::new(vec![0x01, 0x00])).unwrap();
    assert_eq!(vm.run().exit, ExitReason::Halt);
    let rep = read_coverage(&mut vm.engine, &plan);
    assert_eq!(rep.count(addr(0x08)), 1);
    assert_eq!(rep.count(addr(0x09)), 1);
}

#[test]
fn odd_partner_attribution() {
    // Entering at S+1 directly bumps only the odd counter.
    let src = "NOP\nNOP\nNOP SEQW UEND0\n.org 0x40\nUJMP(0x101)\nNOP\nNOP SEQW UEND0";
    let mut img = ufuzz_core::ucode::asm::assemble_at(src, 0x100).unwrap().to_image().unwrap();
    img.clear_ram();
    let plan = HookPlan::from_addresses(&[addr(0x100)]).unwrap();
    let mut e = Engine::new(img);
    install_runtime(&mut e).unwrap();
    install_plan(&mut e, &plan).unwrap();
    let r = e.run_from_entry(addr(0x40), &mut ufuzz_core::engine::NullBus::default(), 100).unwrap();
    assert_eq!(r.outcome, ufuzz_core::engine::Outcome::Uend);
    let rep = read_coverage(&mut e, &plan);
    assert_eq!(rep.count(addr(0x100)), 0);
    assert_eq!(rep.count(addr(0x101)), 1);
}

#[test]
fn hooked_jump_follows_its_target() {
    let src = "UJMP(0x108)\nNOP\nNOP SEQW UEND0\n.org 0x104\ntmp1 := ZEROEXT_DSZ64(9)\nNOP\nNOP SEQW UEND0\n\
               .org 0x108\ntmp2 := ZEROEXT_DSZ64(7)\nNOP\nNOP SEQW UEND0";
    let img = ufuzz_core::ucode::asm::assemble_at(src, 0x100).unwrap().to_image().unwrap();
    let plan = HookPlan::from_addresses(&[addr(0x100)]).unwrap();
    let mut e = Engine::new(img);
    install_runtime(&mut e).unwrap();
    install_plan(&mut e, &plan).unwrap();
    e.run_from_entry(addr(0x100), &mut ufuzz_core::engine::NullBus::default(), 100).unwrap();
    assert_eq!(e.state.read(ufuzz_core::ucode::Reg(2)), 7);
    assert_eq!(e.state.read(ufuzz_core::ucode::Reg(1)), 0);
    assert_eq!(read_coverage(&mut e, &plan).count(addr(0x100)), 1);
}
