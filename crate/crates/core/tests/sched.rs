use std::collections::BTreeSet;

use proptest::prelude::*;
use ufuzz_core::engine::{Engine, NullBus};
use ufuzz_core::instrument::*;
use ufuzz_core::rom::{build_rom, entry_points};
use ufuzz_core::sched::*;
use ufuzz_core::ucode::asm::assemble_at;
use ufuzz_core::ucode::{hookable_addresses, Reg, UcodeAddress, UcodeImage};

const TRIADS: u16 = 14;
const ENTRIES: [u16; 4] = [0, 8, 16, 24];

#[derive(Debug, Clone)]
enum U {
    Nop,
    Set(u8, u32),
    Xor(u8, u8),
    Cond(u8, u16),
    Jmp(u16),
    RegJmp,
    Signal,
}

#[derive(Debug, Clone)]
enum Seq {
    None,
    Uend,
    Goto(u16),
}

/// Forward-only random ROM: targets always lie in a later triad, so every
/// run terminates.
fn rom_strategy() -> impl Strategy<Value = Vec<([U; 3], Seq)>> {
    let uop = prop_oneof![
        3 => Just(U::Nop),
        2 => (0u8..4, 0u32..3).prop_map(|(r, v)| U::Set(r, v)),
        1 => (0u8..4, 0u8..4).prop_map(|(a, b)| U::Xor(a, b)),
        3 => (0u8..4, 1u16..6).prop_map(|(r, d)| U::Cond(r, d)),
        1 => (1u16..4).prop_map(U::Jmp),
        1 => Just(U::RegJmp),
        1 => Just(U::Signal),
    ];
    let seq = prop_oneof![2 => Just(Seq::None), 2 => Just(Seq::Uend), 1 => (1u16..5).prop_map(Seq::Goto)];
    proptest::collection::vec(([uop.clone(), uop.clone(), uop], seq), TRIADS as usize)
}

/// Slots left holding UJMPREG once each one has claimed its load slot.
fn regjmp_slots(t: u16, ops: &[U; 3]) -> [bool; 3] {
    let mut out = [false; 3];
    for i in 0..3 {
        if matches!(ops[i], U::RegJmp) {
            let ok = i > 0 && ENTRIES.iter().any(|x| *x > t * 4 + 3);
            out[i] = ok;
            if ok {
                out[i - 1] = false;
            }
        }
    }
    out
}

fn render(spec: &[([U; 3], Seq)]) -> UcodeImage {
    let regjmp: Vec<[bool; 3]> = spec.iter().enumerate().map(|(t, (ops, _))| regjmp_slots(t as u16, ops)).collect();
    let mut src = String::new();
    for (t, (ops, seq)) in spec.iter().enumerate() {
        let t = t as u16;
        // Landing on a UJMPREG would skip its tmp9 load; land on the load.
        let fwd = |d: u16, k: u16| {
            let tt = (t + d).min(TRIADS - 1);
            let k = k % 3;
            let k = if regjmp[tt as usize][k as usize] { k - 1 } else { k };
            if tt == t { None } else { Some(tt * 4 + k) }
        };
        let mut lines: Vec<String> = ops
            .iter()
            .enumerate()
            .map(|(i, u)| match u {
                U::Nop => "NOP".to_string(),
                U::Set(r, v) => format!("tmp{r} := ZEROEXT_DSZ64({v})"),
                U::Xor(a, b) => format!("tmp{a} := XOR_DSZ64(tmp{a}, tmp{b})"),
                U::Cond(r, d) => fwd(*d, i as u16)
                    .map_or("NOP".into(), |x| format!("UJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp{r}, {x:#x})")),
                U::Jmp(d) => fwd(*d, i as u16).map_or("NOP".into(), |x| format!("UJMP({x:#x})")),
                U::RegJmp => "UJMPREG(tmp9)".into(),
                U::Signal => "SIGEVENT(zero, 0x1)".into(),
            })
            .collect();
        // Indirect jumps load a later entry point into tmp9 one slot earlier.
        for i in 0..3 {
            if lines[i] == "UJMPREG(tmp9)" {
                match (i, ENTRIES.iter().find(|x| **x > t * 4 + 3)) {
                    (1 | 2, Some(x)) => lines[i - 1] = format!("tmp9 := ZEROEXT_DSZ64({x:#x})"),
                    _ => lines[i] = "NOP".into(),
                }
            }
        }
        let suffix = match seq {
            _ if t == TRIADS - 1 => " SEQW UEND0".to_string(),
            Seq::None => String::new(),
            Seq::Uend => " SEQW UEND0".into(),
            Seq::Goto(d) => format!(" SEQW GOTO {:#x}", fwd(*d, 0).unwrap()),
        };
        src.push_str(&format!(".org {:#x}\n{}\n{}\n{}{suffix}\n", t * 4, lines[0], lines[1], lines[2]));
    }
    assemble_at(&src, 0).unwrap_or_else(|e| panic!("{e:?}\n{src}")).to_image().unwrap()
}

fn a(v: u16) -> UcodeAddress {
    UcodeAddress::new_unchecked(v)
}

/// A testcase: which entries run, in order, with which initial temporaries.
type Case = (Vec<usize>, [u64; 4]);

fn run_case(e: &mut Engine, case: &Case) {
    e.reset_state();
    for (i, v) in case.1.iter().enumerate() {
        e.state.write(Reg::tmp(i as u8), *v);
    }
    for &k in &case.0 {
        e.run_from_entry(a(ENTRIES[k]), &mut NullBus::default(), 1000).unwrap();
    }
}

fn trace_counts(img: &UcodeImage, case: &Case) -> Engine {
    let mut e = Engine::new(img.clone());
    e.trace_enabled = true;
    run_case(&mut e, case);
    e
}

fn measure(img: &UcodeImage, case: &Case, plan: &HookPlan) -> CoverageReport {
    let mut e = Engine::new(img.clone());
    install_runtime(&mut e).unwrap();
    install_plan(&mut e, plan).unwrap();
    run_case(&mut e, case);
    read_coverage(&mut e, plan)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn episode_matches_brute_force(
        spec in rom_strategy(),
        case in (proptest::collection::vec(0usize..4, 1..4), proptest::array::uniform4(0u64..3)),
    ) {
        let img = render(&spec);
        let entries: Vec<_> = ENTRIES.iter().map(|x| a(*x)).collect();
        let cfg = Cfg::build(&img, &entries);

        // Partition: every reachable address in exactly one block.
        let mut seen = BTreeSet::new();
        for b in &cfg.blocks {
            prop_assert_eq!(b.members[0], b.head);
            for m in &b.members {
                prop_assert!(seen.insert(*m), "{} in two blocks", m);
            }
        }

        let (global, _) = run_episode(&cfg, |p| measure(&img, &case, p));

        // Per-address trace oracle.
        let traced = trace_counts(&img, &case);
        for m in &seen {
            prop_assert_eq!(global.count(*m), traced.trace.count(*m) as u64, "addr {}", m);
        }

        // Exhaustive single-hook oracle over the small ROM.
        let mut brute = BTreeSet::new();
        for h in hookable_addresses().take_while(|x| x.value() < TRIADS * 4) {
            let plan = HookPlan::from_addresses(&[h]).unwrap();
            brute.extend(measure(&img, &case, &plan).covered());
        }
        prop_assert_eq!(global.covered(), brute);

        // Dynamic indirect targets are inside Φ.
        let mut prev: Option<UcodeAddress> = None;
        for (x, spec_) in &traced.trace.executed {
            if *spec_ { continue; }
            if let Some(p) = prev {
                let b = cfg.block_containing(p).unwrap();
                if b.terminator == Terminator::RegJump && *b.members.last().unwrap() == p {
                    prop_assert!(cfg.successors(b).contains(x));
                }
            }
            prev = Some(*x);
        }
    }
}

#[test]
fn shipped_rom_episode() {
    let rom = build_rom();
    let cfg = Cfg::build(&rom, &entry_points());
    assert_eq!(plan_initial_rounds(&cfg.entries).len(), 32);
    // CREP r3 (r3 = 4) then HLT.
    let code = vec![0x10, 0x03, 4, 0, 0, 0, 0x41, 0x03, 0x00];
    let run = |plan: &HookPlan| {
        let mut e = Engine::new(rom.clone());
        install_runtime(&mut e).unwrap();
        install_plan(&mut e, plan).unwrap();
        let mut vm = ufuzz_core::vm::Vm::with_engine(e, ufuzz_core::vm::VmConfig::new(code.clone())).unwrap();
        vm.run();
        read_coverage(&mut vm.engine, plan)
    };
    let (g, rounds) = run_episode(&cfg, run);
    assert!(rounds > 32 && rounds < 40, "{rounds}");
    assert_eq!(g.count(a(ufuzz_core::rom::CREP_LOOP_HEAD)), 4);
    assert_eq!(g.count(a(0x41 * 8)), 1);
    assert_eq!(g.count(a(0x10 * 8)), 1);
    assert_eq!(g.count(a(0)), 1);
}
