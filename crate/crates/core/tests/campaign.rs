use ufuzz_core::campaign::*;
use ufuzz_core::compare::Verdict;
use ufuzz_core::mutate::MutationMode;
use ufuzz_core::vm::{Vm, VmConfig};

fn agent(preset: &str) -> LocalAgent {
    LocalAgent::new(AgentConfig { fault: fault_preset(preset).unwrap(), ..AgentConfig::default() })
}

#[test]
fn zero_iterations_is_empty() {
    let mut c = Campaign::new(CampaignConfig { iterations: 0, ..Default::default() });
    c.run(&mut agent("correct")).unwrap();
    assert!(c.seeds.is_empty() && c.findings.is_empty() && c.coverage.is_empty());
}

#[test]
fn hlt_task_reports_zero_coverage() {
    let a = agent("correct");
    let plan = vec![(0u8, 0x10u16), (1, 0x18)];
    let r = a.execute(&Task { id: 9, variant: Variant::Plain, code: vec![0x00], hooks: plan }).unwrap();
    assert_eq!(r.id, 9);
    assert_eq!(r.exit, ufuzz_core::vm::ExitReason::Halt);
    assert_eq!(r.coverage.len(), 4);
    assert!(r.coverage.iter().all(|e| e.count == 0));
}

#[test]
fn correct_mode_has_no_divergence() {
    for (corpus, mode) in [(CorpusKind::Random, MutationMode::Havoc), (CorpusKind::Valid, MutationMode::Genetic)] {
        let mut c = Campaign::new(CampaignConfig { iterations: 250, corpus, mode, coverage: false, seed: 3, ..Default::default() });
        c.run(&mut agent("correct")).unwrap();
        assert_eq!(c.stats.divergences, 0);
        assert!(c.findings.iter().all(|f| f.kind != FindingKind::ArchDivergence));
    }
}

#[test]
fn coverage_feedback_grows_corpus() {
    let mut c = Campaign::new(CampaignConfig { iterations: 40, corpus_size: 8, seed: 1, ..Default::default() });
    c.run(&mut agent("correct")).unwrap();
    assert!(c.covered().len() > 20, "{}", c.covered().len());
    assert!(c.seeds.iter().any(|s| s.parent.is_some()), "mutants with new coverage are retained");
    assert!(c.seeds.iter().all(|s| s.bytes.len() <= 256));
}

/// MOVI r2, v; CRND r1; then CSEG r2 or CCR r2 with the 0x692 / 0x701 offsets.
fn crafted() -> Vec<Vec<u8>> {
    [vec![0x42, 0x02], vec![0x43, 0x02, 0x12], vec![0x43, 0x02, 0x81]]
        .into_iter()
        .map(|tail| [vec![0x10, 0x02, 0x53, 0, 0, 0, 0x40, 0x01], tail, vec![0x00]].concat())
        .collect()
}

#[test]
fn injected_bugs_are_found_and_localized() {
    let mut c = Campaign::new(CampaignConfig { iterations: 300, coverage: false, seed: 5, extra_seeds: crafted(), ..Default::default() });
    let mut a = agent("injected");
    c.run(&mut a).unwrap();
    let div: Vec<_> = c.findings.iter().filter(|f| f.kind == FindingKind::ArchDivergence).collect();
    assert!(!div.is_empty());
    for f in div {
        // Ground truth: the divergent instruction is the one that runs the
        // persisting µops, i.e. CCR (0x43) or CSEG (0x42), or the
        // instruction whose speculative tail reaches into it.
        let mut vm = Vm::with_engine(ufuzz_core::engine::Engine::new(ufuzz_core::rom::build_rom()), VmConfig {
            code: f.code.clone(),
            max_macro_insns: a.config.max_macro_insns,
            max_uops: a.config.max_uops,
            rng_seed: 0,
        })
        .unwrap();
        let (trace, _) = vm.trace_run();
        let idx = f.index.unwrap() as usize;
        let op = f.code[trace[idx].ip as usize];
        assert!(matches!(op, 0x42 | 0x43), "index {idx} opcode {op:#x}");
    }
}

#[test]
fn step_reports_verdicts() {
    let mut c = Campaign::new(CampaignConfig { iterations: 3, coverage: false, ..Default::default() });
    let r = c.step(&mut agent("correct")).unwrap();
    assert!(matches!(r.verdict, Some(Verdict::Equal) | Some(Verdict::SkippedTimeout) | None));
}

#[test]
fn spec_campaign_finds_catalog_lockups() {
    let e = ufuzz_core::engine::Engine::new(ufuzz_core::rom::build_rom());
    let f = spec_campaign(&e, &fault_preset("correct").unwrap(), 50, 2, 1).unwrap();
    assert!(f.is_empty());
    let f = spec_campaign(&e, &fault_preset("injected").unwrap(), 400, 2, 1).unwrap();
    assert!(f.iter().any(|f| f.kind == FindingKind::SpecPersistence));
}

#[test]
fn campaigns_replay_identically() {
    let run = || {
        let mut c = Campaign::new(CampaignConfig { iterations: 25, corpus_size: 6, seed: 42, extra_seeds: crafted(), ..Default::default() });
        c.run(&mut agent("injected")).unwrap();
        c
    };
    let (a, b) = (run(), run());
    assert_eq!(a.seeds, b.seeds);
    assert_eq!(a.coverage, b.coverage);
    assert_eq!(a.findings, b.findings);
    assert_eq!(a.events, b.events);
}
