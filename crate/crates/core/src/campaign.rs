//! Controller and agent logic independent of transport: task execution on
//! an instrumented engine, and the campaign loop that mutates, measures,
//! compares and records findings.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::compare::{early_bug_eval, localize, serialized_config, ComparisonState, Verdict};
use crate::engine::{Engine, FaultModel, FaultRule, Lockup, UopMatch, CRBUS_HOOK_DISABLE};
use crate::instrument::{install_plan, install_runtime, read_coverage, CoverageReport, Hook, HookPlan, InstrError};
use crate::mutate::{fitness, gen_random_corpus, gen_valid_corpus, MutationMode, Mutator, MutatorConfig, Seed};
use crate::rng::derive_rng;
use crate::rom::{build_rom, entry_points};
use crate::sched::{run_episode, Cfg};
use crate::serialize::serialize;
use crate::specfuzz::{catalog_fault_model, parse_catalog, run_spec_trial, SpecError, BUNDLED_CATALOG};
use crate::ucode::{MicroOp, Opcode, Reg, UcodeAddress};
use crate::vm::{ArchState, ExitReason, RunSummary, Vm, VmConfig, VmError};

/// Names accepted by [`fault_preset`].
pub const FAULT_PRESETS: [&str; 6] = ["correct", "crbus-692", "crbus-701", "wrsegfld", "injected", "catalog"];

fn persist(matcher: UopMatch) -> FaultRule {
    FaultRule { matcher, persists_through_rollback: true, lockup: Lockup::None }
}

/// Named engine configurations. The persistence presets model CRBUS
/// writes to the hook-enable register, to 0x701, and segment-cache writes
/// surviving rollback.
pub fn fault_preset(name: &str) -> Option<FaultModel> {
    let m = FaultModel::correct();
    Some(match name {
        "correct" => m,
        "crbus-692" => m.with_rule(persist(UopMatch::crbus(CRBUS_HOOK_DISABLE))),
        "crbus-701" => m.with_rule(persist(UopMatch::crbus(0x701))),
        "wrsegfld" => m.with_rule(persist(UopMatch::opcode(Opcode::WrSegFld))),
        "injected" => m
            .with_rule(persist(UopMatch::crbus(CRBUS_HOOK_DISABLE)))
            .with_rule(persist(UopMatch::crbus(0x701)))
            .with_rule(persist(UopMatch::opcode(Opcode::WrSegFld))),
        "catalog" => catalog_fault_model(&parse_catalog(BUNDLED_CATALOG).expect("bundled catalog parses")),
        _ => return None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Plain = 0,
    Serialized = 1,
    /// Runs P and its serialized twin with tracing and reports the first
    /// divergent instruction.
    Localize = 2,
}

impl Variant {
    pub fn from_u8(v: u8) -> Option<Variant> {
        match v {
            0 => Some(Variant::Plain),
            1 => Some(Variant::Serialized),
            2 => Some(Variant::Localize),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub id: u64,
    pub variant: Variant,
    pub code: Vec<u8>,
    pub hooks: Vec<(u8, u16)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoverageEntry {
    pub addr: u16,
    pub count: u16,
    pub last_ip: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskResult {
    pub id: u64,
    pub exit: ExitReason,
    pub state: ArchState,
    pub rw_digest: u64,
    pub coverage: Vec<CoverageEntry>,
    pub retired: u64,
    pub executed_bytes: u64,
    pub divergence: Option<u64>,
}

impl TaskResult {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            state: self.state,
            exit: self.exit,
            retired: self.retired,
            rw_digest: self.rw_digest,
            executed_bytes: self.executed_bytes,
        }
    }

    pub fn report(&self) -> CoverageReport {
        let mut r = CoverageReport::default();
        for e in &self.coverage {
            let a = UcodeAddress::new_unchecked(e.addr);
            r.counts.insert(a, e.count as u64);
            if e.count > 0 {
                r.last_ip.insert(a, e.last_ip);
            }
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentError {
    Plan(InstrError),
    Code(VmError),
}

impl fmt::Display for AgentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentError::Plan(e) => write!(f, "hook plan rejected: {e:?}"),
            AgentError::Code(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentConfig {
    pub fault: FaultModel,
    pub max_macro_insns: u64,
    pub max_uops: u64,
    pub rng_seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig { fault: FaultModel::correct(), max_macro_insns: 2_000, max_uops: 200_000, rng_seed: 0 }
    }
}

/// Executes tasks on the shipped ROM with the instrumentation runtime in
/// patch RAM. Every task starts from the same engine snapshot.
#[derive(Debug, Clone)]
pub struct LocalAgent {
    pub config: AgentConfig,
    base: Engine,
}

impl LocalAgent {
    pub fn new(config: AgentConfig) -> LocalAgent {
        let mut base = Engine::new(build_rom());
        install_runtime(&mut base).expect("runtime fits patch RAM");
        base.fault = config.fault.clone();
        LocalAgent { config, base }
    }

    fn vm_config(&self, code: Vec<u8>) -> VmConfig {
        VmConfig { code, max_macro_insns: self.config.max_macro_insns, max_uops: self.config.max_uops, rng_seed: self.config.rng_seed }
    }

    pub fn execute(&self, task: &Task) -> Result<TaskResult, AgentError> {
        let plan = HookPlan { hooks: task.hooks.iter().map(|(s, a)| Hook { slot: *s, src: UcodeAddress::new_unchecked(*a) }).collect() };
        let mut engine = self.base.clone();
        if !plan.hooks.is_empty() {
            install_plan(&mut engine, &plan).map_err(AgentError::Plan)?;
        }
        let base_cfg = self.vm_config(task.code.clone());
        let mut divergence = None;
        let cfg = match task.variant {
            Variant::Plain => base_cfg,
            Variant::Serialized => serialized_config(&base_cfg, task.code.clone()),
            Variant::Localize => {
                if let Ok(sp) = serialize(&task.code) {
                    divergence = localize(&self.base, &base_cfg, &sp).ok();
                }
                base_cfg
            }
        };
        let mut vm = Vm::with_engine(engine, cfg).map_err(AgentError::Code)?;
        let s = vm.run();
        let coverage = if plan.hooks.is_empty() {
            Vec::new()
        } else {
            let rep = read_coverage(&mut vm.engine, &plan);
            rep.counts
                .iter()
                .map(|(a, c)| CoverageEntry {
                    addr: a.value(),
                    count: (*c).min(u16::MAX as u64) as u16,
                    last_ip: rep.last_ip.get(a).copied().unwrap_or(0),
                })
                .collect()
        };
        Ok(TaskResult {
            id: task.id,
            exit: s.exit,
            state: s.state,
            rw_digest: s.rw_digest,
            coverage,
            retired: s.retired,
            executed_bytes: s.executed_bytes,
            divergence,
        })
    }
}

/// Anything that can run a task: an in-process agent or a remote one.
pub trait Executor {
    type Error: fmt::Debug;
    fn execute(&mut self, task: &Task) -> Result<TaskResult, Self::Error>;
}

impl Executor for LocalAgent {
    type Error = AgentError;
    fn execute(&mut self, task: &Task) -> Result<TaskResult, AgentError> {
        LocalAgent::execute(self, task)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusKind {
    Random,
    Valid,
    Printable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CampaignConfig {
    pub mode: MutationMode,
    pub seed: u64,
    /// Number of testcases to execute.
    pub iterations: u64,
    pub corpus: CorpusKind,
    pub corpus_size: usize,
    pub seed_size: usize,
    pub feedback: bool,
    /// Run a full coverage episode per testcase.
    pub coverage: bool,
    pub k: usize,
    pub alpha: u64,
    pub max_stack: usize,
    /// Seeds run before the generated corpus, e.g. loaded from a corpus
    /// directory.
    pub extra_seeds: Vec<Vec<u8>>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            mode: MutationMode::Genetic,
            seed: 0,
            iterations: 1000,
            corpus: CorpusKind::Valid,
            corpus_size: 32,
            seed_size: 24,
            feedback: true,
            coverage: true,
            k: 16,
            alpha: 64,
            max_stack: 128,
            extra_seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FindingKind {
    ArchDivergence,
    SpecPersistence,
    Lockup,
    ProtocolFault,
}

impl FindingKind {
    pub fn name(self) -> &'static str {
        match self {
            FindingKind::ArchDivergence => "ArchDivergence",
            FindingKind::SpecPersistence => "SpecPersistence",
            FindingKind::Lockup => "Lockup",
            FindingKind::ProtocolFault => "ProtocolFault",
        }
    }

    pub fn parse(s: &str) -> Option<FindingKind> {
        [FindingKind::ArchDivergence, FindingKind::SpecPersistence, FindingKind::Lockup, FindingKind::ProtocolFault]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub id: u64,
    pub kind: FindingKind,
    pub testcase: u64,
    pub code: Vec<u8>,
    pub index: Option<u64>,
    pub details: String,
    pub p: Option<ComparisonState>,
    pub q: Option<ComparisonState>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub iteration: u64,
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CampaignStats {
    pub executed: u64,
    pub skipped_timeout: u64,
    pub unserializable: u64,
    pub divergences: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepReport {
    pub testcase: u64,
    pub new_addresses: usize,
    pub verdict: Option<Verdict>,
    pub finding: Option<u64>,
}

/// Campaign loop state. `seeds` holds every retained seed with its lineage;
/// `coverage` the summed per-address counts over all testcases.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub config: CampaignConfig,
    pub seeds: Vec<Seed>,
    pub coverage: BTreeMap<UcodeAddress, u64>,
    pub findings: Vec<Finding>,
    pub events: Vec<Event>,
    pub stats: CampaignStats,
    pub iteration: u64,
    cfg: Cfg,
    mutator: Mutator,
    pending: VecDeque<Seed>,
    next_seed: u64,
    next_task: u64,
}

impl Campaign {
    pub fn new(config: CampaignConfig) -> Campaign {
        let n = config.corpus_size;
        let size = config.seed_size.max(1);
        let generated = match config.corpus {
            CorpusKind::Random => gen_random_corpus(n, size, config.seed),
            CorpusKind::Valid => gen_valid_corpus(n, size, config.seed),
            CorpusKind::Printable => {
                let mut c = gen_random_corpus(n, size, config.seed);
                for s in &mut c {
                    s.bytes.iter_mut().for_each(|b| *b = 0x20 + *b % 95);
                }
                c
            }
        };
        let initial: Vec<Seed> = config
            .extra_seeds
            .iter()
            .filter(|b| !b.is_empty())
            .cloned()
            .chain(generated.into_iter().map(|s| s.bytes))
            .enumerate()
            .map(|(i, b)| Seed::new(i as u64, b))
            .collect();
        let mutator = Mutator::new(MutatorConfig {
            mode: config.mode,
            k: config.k.max(1),
            alpha: config.alpha,
            max_stack: config.max_stack,
            feedback: config.feedback,
            seed: config.seed,
            ..MutatorConfig::default()
        });
        Campaign {
            cfg: Cfg::build(&build_rom(), &entry_points()),
            mutator,
            next_seed: initial.len() as u64,
            pending: initial.into(),
            seeds: Vec::new(),
            coverage: BTreeMap::new(),
            findings: Vec::new(),
            events: Vec::new(),
            stats: CampaignStats::default(),
            iteration: 0,
            next_task: 0,
            config,
        }
    }

    pub fn done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    pub fn covered(&self) -> BTreeSet<UcodeAddress> {
        self.coverage.iter().filter(|(_, c)| **c > 0).map(|(a, _)| *a).collect()
    }

    fn event(&mut self, kind: &str, detail: String) {
        self.events.push(Event { iteration: self.iteration, kind: String::from(kind), detail });
    }

    fn next_testcase(&mut self) -> Seed {
        if let Some(s) = self.pending.pop_front() {
            return s;
        }
        let id = self.next_seed;
        self.next_seed += 1;
        let pool = if self.config.feedback { crate::mutate::select_top_k(&self.seeds, self.config.k.max(1)) } else { self.seeds.clone() };
        let parent = self.mutator.select_parent(&self.seeds).cloned();
        match parent {
            Some(p) => {
                let bytes = self.mutator.mutate(&p.bytes, &pool);
                Seed { parent: Some(p.id), ..Seed::new(id, bytes) }
            }
            None => {
                let size = self.config.seed_size.max(1);
                let rng = self.mutator.rng();
                let bytes = (0..size).map(|_| rng.random()).collect();
                Seed::new(id, bytes)
            }
        }
    }

    fn task(&mut self, variant: Variant, code: &[u8], hooks: Vec<(u8, u16)>) -> Task {
        let id = self.next_task;
        self.next_task += 1;
        Task { id, variant, code: code.to_vec(), hooks }
    }

    fn add_finding(&mut self, mut f: Finding) -> u64 {
        f.id = self.findings.len() as u64;
        let id = f.id;
        self.findings.push(f);
        id
    }

    /// Runs one testcase end to end.
    pub fn step<E: Executor>(&mut self, ex: &mut E) -> Result<StepReport, E::Error> {
        let mut seed = self.next_testcase();
        let code = seed.bytes.clone();
        let t = self.task(Variant::Plain, &code, Vec::new());
        let p = ex.execute(&t)?;

        let mut new_addresses = 0;
        if self.config.coverage {
            let mut err = None;
            let mut next_task = self.next_task;
            let (episode, _) = run_episode(&self.cfg, |plan| {
                if err.is_some() {
                    return CoverageReport::default();
                }
                let t = Task {
                    id: next_task,
                    variant: Variant::Plain,
                    code: code.clone(),
                    hooks: plan.hooks.iter().map(|h| (h.slot, h.src.value())).collect(),
                };
                next_task += 1;
                match ex.execute(&t) {
                    Ok(r) => r.report(),
                    Err(e) => {
                        err = Some(e);
                        CoverageReport::default()
                    }
                }
            });
            self.next_task = next_task;
            if let Some(e) = err {
                return Err(e);
            }
            for (a, (c, _)) in &episode.counts {
                if *c == 0 {
                    continue;
                }
                let slot = self.coverage.entry(*a).or_insert(0);
                if *slot == 0 {
                    new_addresses += 1;
                }
                *slot += c;
                seed.fingerprint.insert((*a, crate::mutate::bucket(*c)));
            }
        }
        seed.fitness = fitness(new_addresses as u64, p.executed_bytes, code.len() as u64, self.config.alpha);

        let mut verdict = None;
        let mut finding = None;
        if let ExitReason::EngineLockup(c) = p.exit {
            finding = Some(self.add_finding(Finding {
                id: 0,
                kind: FindingKind::Lockup,
                testcase: seed.id,
                code: code.clone(),
                index: None,
                details: format!("{c:?} while running the testcase"),
                p: Some(ComparisonState::of_original(&p.summary())),
                q: None,
            }));
        }
        match serialize(&code) {
            Err(e) => {
                self.stats.unserializable += 1;
                self.event("unserializable", format!("testcase {}: {e:?}", seed.id));
            }
            Ok(sp) => {
                let t = self.task(Variant::Serialized, &sp.code, Vec::new());
                let q = ex.execute(&t)?;
                let v = early_bug_eval(&p.summary(), &q.summary(), &sp.map);
                match &v {
                    Verdict::SkippedTimeout => self.stats.skipped_timeout += 1,
                    Verdict::Equal => {}
                    Verdict::Diverged { p: ps, q: qs } => {
                        self.stats.divergences += 1;
                        let t = self.task(Variant::Localize, &code, Vec::new());
                        let l = ex.execute(&t)?;
                        match l.divergence {
                            Some(idx) => {
                                finding = Some(self.add_finding(Finding {
                                    id: 0,
                                    kind: FindingKind::ArchDivergence,
                                    testcase: seed.id,
                                    code: code.clone(),
                                    index: Some(idx),
                                    details: format!("P exit {}, Q exit {}", p.exit, q.exit),
                                    p: Some(*ps),
                                    q: *qs,
                                }));
                            }
                            None => self.event("localization-failed", format!("testcase {}", seed.id)),
                        }
                    }
                }
                verdict = Some(v);
            }
        }

        let retain = seed.parent.is_none() || (self.config.feedback && new_addresses > 0);
        let id = seed.id;
        if retain {
            self.seeds.push(seed);
        }
        self.stats.executed += 1;
        self.iteration += 1;
        Ok(StepReport { testcase: id, new_addresses, verdict, finding })
    }

    pub fn run<E: Executor>(&mut self, ex: &mut E) -> Result<(), E::Error> {
        while !self.done() {
            self.step(ex)?;
        }
        Ok(())
    }
}

/// Random µop candidate for speculative fuzzing.
pub fn random_candidate(rng: &mut impl Rng) -> MicroOp {
    let op = Opcode::ALL[rng.random_range(0..Opcode::ALL.len())];
    let imm = match rng.random_range(0..3u8) {
        0 => rng.random_range(0..0x800u32),
        1 => rng.random_range(0..0x10000u32),
        _ => rng.random_range(0..0x400000u32),
    };
    let imm = if matches!(op.form(), crate::ucode::uop::Form::SegWrite | crate::ucode::uop::Form::SegRead) { imm & 0xFF } else { imm };
    // Half the sources are registers the template leaves nonzero.
    let src = if rng.random_bool(0.5) { [0, 2][rng.random_range(0..2)] } else { rng.random_range(0..16) };
    MicroOp::build(op, Reg(rng.random_range(0..16)), Reg(src), imm)
}

/// Speculative-window campaign: random candidates through the template,
/// recording persisted effects and lockups.
pub fn spec_campaign(engine: &Engine, fault: &FaultModel, iterations: u64, trials: u32, seed: u64) -> Result<Vec<Finding>, SpecError> {
    let mut rng = derive_rng(seed, 7);
    let mut findings = Vec::new();
    for i in 0..iterations {
        let cand = random_candidate(&mut rng);
        let r = run_spec_trial(engine, cand, fault, trials, seed ^ i)?;
        let text = crate::ucode::asm::disassemble_uop(cand);
        if !r.effects.is_empty() {
            findings.push(Finding {
                id: findings.len() as u64,
                kind: FindingKind::SpecPersistence,
                testcase: i,
                code: cand.raw().to_le_bytes()[..6].to_vec(),
                index: None,
                details: format!("{text}: {:?}", r.effects),
                p: None,
                q: None,
            });
        }
        if let Some(c) = r.lockup {
            findings.push(Finding {
                id: findings.len() as u64,
                kind: FindingKind::Lockup,
                testcase: i,
                code: cand.raw().to_le_bytes()[..6].to_vec(),
                index: None,
                details: format!("{text}: {c:?} in {}/{} trials", r.lockups, r.trials),
                p: None,
                q: None,
            });
        }
    }
    Ok(findings)
}
