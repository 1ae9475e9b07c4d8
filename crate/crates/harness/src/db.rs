//! Campaign database: one JSON document with top-level keys `config`,
//! `seeds`, `coverage`, `findings` and `events`, replaced atomically on
//! every save. Only events carry wall-clock timestamps.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use ufuzz_core::campaign::{Campaign, CampaignConfig, CorpusKind, Finding, FindingKind};
use ufuzz_core::compare::ComparisonState;
use ufuzz_core::mutate::{MutationMode, Seed};
use ufuzz_core::vm::ExitReason;

pub const FORMAT: u32 = 1;

#[derive(Debug)]
pub enum DbError {
    Io(std::io::Error),
    SchemaMismatch(String),
}

impl fmt::Display for DbError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DbError::Io(e) => write!(f, "database io: {e}"),
            DbError::SchemaMismatch(m) => write!(f, "schema mismatch: {m}"),
        }
    }
}

impl std::error::Error for DbError {}

impl From<std::io::Error> for DbError {
    fn from(e: std::io::Error) -> Self {
        DbError::Io(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDoc {
    pub format: u32,
    /// Label used to group databases in reports.
    pub name: String,
    /// `afl`, `genetic` or `spec`.
    pub mode: String,
    pub seed: u64,
    pub iterations: u64,
    pub timeout_hours: f64,
    pub fault: String,
    pub corpus: String,
    pub corpus_size: usize,
    pub seed_size: usize,
    pub feedback: bool,
    pub coverage: bool,
    pub k: usize,
    pub alpha: u64,
    pub max_stack: usize,
    pub spec_trials: u32,
    pub extra_seeds: Vec<String>,
}

impl ConfigDoc {
    pub fn new(mode: &str, fault: &str, c: &CampaignConfig) -> ConfigDoc {
        let corpus = match c.corpus {
            CorpusKind::Random => "random",
            CorpusKind::Valid => "valid",
            CorpusKind::Printable => "printable",
        };
        let mut name = String::from(mode);
        if !c.feedback {
            name.push_str("-nofeedback");
        }
        if c.corpus == CorpusKind::Printable {
            name.push_str("-printable");
        }
        ConfigDoc {
            format: FORMAT,
            name,
            mode: mode.to_string(),
            seed: c.seed,
            iterations: c.iterations,
            timeout_hours: 0.0,
            fault: fault.to_string(),
            corpus: corpus.to_string(),
            corpus_size: c.corpus_size,
            seed_size: c.seed_size,
            feedback: c.feedback,
            coverage: c.coverage,
            k: c.k,
            alpha: c.alpha,
            max_stack: c.max_stack,
            spec_trials: 0,
            extra_seeds: c.extra_seeds.iter().map(hex::encode).collect(),
        }
    }

    /// Rebuilds the campaign configuration this document describes.
    pub fn campaign_config(&self) -> Result<CampaignConfig, DbError> {
        let mode = match self.mode.as_str() {
            "afl" | "spec" => MutationMode::Havoc,
            "genetic" => MutationMode::Genetic,
            m => return Err(DbError::SchemaMismatch(format!("unknown mode {m:?}"))),
        };
        let corpus = match self.corpus.as_str() {
            "random" => CorpusKind::Random,
            "valid" => CorpusKind::Valid,
            "printable" => CorpusKind::Printable,
            c => return Err(DbError::SchemaMismatch(format!("unknown corpus {c:?}"))),
        };
        Ok(CampaignConfig {
            mode,
            seed: self.seed,
            iterations: self.iterations,
            corpus,
            corpus_size: self.corpus_size,
            seed_size: self.seed_size,
            feedback: self.feedback,
            coverage: self.coverage,
            k: self.k,
            alpha: self.alpha,
            max_stack: self.max_stack,
            extra_seeds: self.extra_seeds.iter().map(|h| unhex(h)).collect::<Result<_, _>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedDoc {
    pub id: u64,
    pub parent: Option<u64>,
    pub bytes: String,
    pub fitness: [u64; 2],
    pub fingerprint: Vec<(u16, u8)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageDoc {
    pub addr: u16,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDoc {
    pub r: [u64; 8],
    pub flags: u8,
    pub ip: u16,
    pub rw_digest: u64,
    /// Exit reason as (code, detail).
    pub exit: (u8, u8),
}

impl StateDoc {
    fn of(s: &ComparisonState) -> StateDoc {
        StateDoc { r: s.r, flags: s.flags, ip: s.ip, rw_digest: s.rw_digest, exit: s.exit.code() }
    }

    pub fn state(&self) -> Result<ComparisonState, DbError> {
        let exit = ExitReason::from_code(self.exit.0, self.exit.1)
            .ok_or_else(|| DbError::SchemaMismatch(format!("exit code {:?}", self.exit)))?;
        Ok(ComparisonState { r: self.r, flags: self.flags, ip: self.ip, rw_digest: self.rw_digest, exit })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FindingDoc {
    pub id: u64,
    pub kind: String,
    pub testcase: u64,
    pub code: String,
    pub index: Option<u64>,
    pub details: String,
    pub p: Option<StateDoc>,
    pub q: Option<StateDoc>,
}

impl FindingDoc {
    pub fn of(f: &Finding) -> FindingDoc {
        FindingDoc {
            id: f.id,
            kind: f.kind.name().to_string(),
            testcase: f.testcase,
            code: hex::encode(&f.code),
            index: f.index,
            details: f.details.clone(),
            p: f.p.as_ref().map(StateDoc::of),
            q: f.q.as_ref().map(StateDoc::of),
        }
    }

    pub fn kind(&self) -> Result<FindingKind, DbError> {
        FindingKind::parse(&self.kind).ok_or_else(|| DbError::SchemaMismatch(format!("finding kind {:?}", self.kind)))
    }

    pub fn code(&self) -> Result<Vec<u8>, DbError> {
        unhex(&self.code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventDoc {
    pub iteration: Option<u64>,
    pub kind: String,
    pub detail: String,
    /// Milliseconds since the Unix epoch.
    pub ts_ms: u64,
}

impl EventDoc {
    pub fn now(iteration: Option<u64>, kind: &str, detail: String) -> EventDoc {
        EventDoc { iteration, kind: kind.to_string(), detail, ts_ms: now_ms() }
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignDatabase {
    pub config: ConfigDoc,
    pub seeds: Vec<SeedDoc>,
    pub coverage: Vec<CoverageDoc>,
    pub findings: Vec<FindingDoc>,
    pub events: Vec<EventDoc>,
}

fn unhex(s: &str) -> Result<Vec<u8>, DbError> {
    hex::decode(s).map_err(|e| DbError::SchemaMismatch(format!("hex field: {e}")))
}

fn seed_doc(s: &Seed) -> SeedDoc {
    SeedDoc {
        id: s.id,
        parent: s.parent,
        bytes: hex::encode(&s.bytes),
        fitness: [s.fitness.num, s.fitness.den],
        fingerprint: s.fingerprint.iter().map(|(a, b)| (a.value(), *b)).collect(),
    }
}

impl CampaignDatabase {
    pub fn new(config: ConfigDoc) -> CampaignDatabase {
        CampaignDatabase { config, seeds: Vec::new(), coverage: Vec::new(), findings: Vec::new(), events: Vec::new() }
    }

    /// Copies seeds, coverage and findings out of `c`. Campaign events are
    /// appended from `*cursor` on, stamped with the current time.
    pub fn sync(&mut self, c: &Campaign, cursor: &mut usize) {
        self.seeds = c.seeds.iter().map(seed_doc).collect();
        self.coverage = c.coverage.iter().map(|(a, n)| CoverageDoc { addr: a.value(), count: *n }).collect();
        self.findings = c.findings.iter().map(FindingDoc::of).collect();
        for e in &c.events[*cursor..] {
            self.events.push(EventDoc::now(Some(e.iteration), &e.kind, e.detail.clone()));
        }
        *cursor = c.events.len();
    }

    pub fn covered(&self) -> std::collections::BTreeSet<u16> {
        self.coverage.iter().filter(|c| c.count > 0).map(|c| c.addr).collect()
    }

    /// Structural checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<(), DbError> {
        let bad = |m: String| Err(DbError::SchemaMismatch(m));
        if self.config.format != FORMAT {
            return bad(format!("format {} (expected {FORMAT})", self.config.format));
        }
        self.config.campaign_config()?;
        for s in &self.seeds {
            unhex(&s.bytes)?;
            if s.fitness[1] == 0 {
                return bad(format!("seed {} has zero fitness denominator", s.id));
            }
        }
        for f in &self.findings {
            f.code()?;
            if let Some(p) = &f.p {
                p.state()?;
            }
            if let Some(q) = &f.q {
                q.state()?;
            }
            if f.kind()? == FindingKind::ArchDivergence && f.index.is_none() {
                return bad(format!("divergence finding {} lacks an index", f.id));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CampaignDatabase, DbError> {
        let text = std::fs::read_to_string(path)?;
        let db: CampaignDatabase = serde_json::from_str(&text).map_err(|e| DbError::SchemaMismatch(e.to_string()))?;
        db.validate()?;
        Ok(db)
    }

    /// Writes to a temporary file in the same directory and renames it over
    /// `path`, so readers see either the old or the new document.
    pub fn save(&self, path: &Path) -> Result<(), DbError> {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer_pretty(&mut tmp, self).map_err(std::io::Error::from)?;
        tmp.write_all(b"\n")?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| DbError::Io(e.error))?;
        Ok(())
    }

    /// The parts that must match between identically seeded campaigns.
    pub fn deterministic_view(&self) -> (Vec<SeedDoc>, Vec<CoverageDoc>, Vec<FindingDoc>) {
        (self.seeds.clone(), self.coverage.clone(), self.findings.clone())
    }
}
