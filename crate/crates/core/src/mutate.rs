//! Seed corpora, mutation engines and coverage-driven selection.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::gisa::DEFINED_OPCODES;
use crate::rng::derive_rng;
use crate::ucode::UcodeAddress;

pub const DEFAULT_MAX_SIZE: usize = 256;

/// `num / den` with `den >= 1`, compared exactly.
#[derive(Debug, Clone, Copy, Default)]
pub struct Fitness {
    pub num: u64,
    pub den: u64,
}

impl Fitness {
    pub const ZERO: Fitness = Fitness { num: 0, den: 1 };

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialEq for Fitness {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl Eq for Fitness {}

impl PartialOrd for Fitness {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Fitness {
    fn cmp(&self, o: &Self) -> Ordering {
        (self.num as u128 * o.den as u128).cmp(&(o.num as u128 * self.den as u128))
    }
}

impl fmt::Display for Fitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// `new_addresses + alpha * executed / total`.
pub fn fitness(new_addresses: u64, executed_bytes: u64, total_bytes: u64, alpha: u64) -> Fitness {
    let den = total_bytes.max(1);
    Fitness { num: new_addresses * den + alpha * executed_bytes.min(den), den }
}

/// Hit-count bucket, in the style of AFL's classes.
pub fn bucket(count: u64) -> u8 {
    match count {
        0 => 0,
        1 => 1,
        2 => 2,
        3 => 3,
        4..=7 => 4,
        8..=15 => 5,
        16..=31 => 6,
        32..=127 => 7,
        _ => 8,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seed {
    pub id: u64,
    pub bytes: Vec<u8>,
    pub parent: Option<u64>,
    pub fitness: Fitness,
    pub fingerprint: BTreeSet<(UcodeAddress, u8)>,
}

impl Seed {
    pub fn new(id: u64, bytes: Vec<u8>) -> Seed {
        Seed { id, bytes, parent: None, fitness: Fitness::ZERO, fingerprint: BTreeSet::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationMode {
    Havoc,
    Genetic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutatorConfig {
    pub mode: MutationMode,
    pub k: usize,
    pub alpha: u64,
    pub max_stack: usize,
    pub max_size: usize,
    /// When off, parents are drawn uniformly and fitness is ignored.
    pub feedback: bool,
    pub seed: u64,
}

impl Default for MutatorConfig {
    fn default() -> Self {
        MutatorConfig {
            mode: MutationMode::Genetic,
            k: 16,
            alpha: 64,
            max_stack: 128,
            max_size: DEFAULT_MAX_SIZE,
            feedback: true,
            seed: 0,
        }
    }
}

/// `n` seeds of `size` uniformly random bytes.
pub fn gen_random_corpus(n: usize, size: usize, seed: u64) -> Vec<Seed> {
    let mut rng = derive_rng(seed, 1);
    (0..n)
        .map(|i| {
            let mut b = alloc::vec![0u8; size];
            rng.fill_bytes(&mut b);
            Seed::new(i as u64, b)
        })
        .collect()
}

/// One random encoding of `opcode`.
fn gadget(op: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let r = |rng: &mut ChaCha8Rng| rng.random_range(0..8u8);
    let mut v = alloc::vec![op];
    match op {
        0x10 => {
            v.push(r(rng));
            v.extend(rng.random::<u32>().to_le_bytes());
        }
        0x11..=0x13 => v.extend([r(rng), r(rng)]),
        0x20 | 0x21 => v.extend([r(rng), r(rng), rng.random()]),
        0x22 | 0x35..=0x38 => {
            if op == 0x22 {
                v.push(r(rng));
            }
            v.extend(rng.random::<i16>().to_le_bytes());
        }
        0x30..=0x33 | 0x50 => v.push(rng.random()),
        0x40..=0x42 => v.push(r(rng)),
        0x43 => v.extend([r(rng), rng.random()]),
        0x0F => v.push(0x01),
        _ => {}
    }
    v
}

/// Lengths of the gadget for each defined opcode.
fn gadget_len(op: u8) -> usize {
    match op {
        0x10 => 6,
        0x11..=0x13 | 0x35..=0x38 | 0x43 => 3,
        0x20..=0x22 => 4,
        0x30..=0x33 | 0x40..=0x42 | 0x50 | 0x0F => 2,
        _ => 1,
    }
}

/// `n` seeds built from random valid encodings, exactly `size` bytes each
/// (padded with NOPs only when nothing else fits).
pub fn gen_valid_corpus(n: usize, size: usize, seed: u64) -> Vec<Seed> {
    let mut rng = derive_rng(seed, 2);
    (0..n)
        .map(|i| {
            let mut b = Vec::with_capacity(size);
            while b.len() < size {
                let room = size - b.len();
                let fits: Vec<u8> = DEFINED_OPCODES.iter().copied().filter(|o| gadget_len(*o) <= room).collect();
                let op = fits[rng.random_range(0..fits.len())];
                b.extend(gadget(op, &mut rng));
            }
            Seed::new(i as u64, b)
        })
        .collect()
}

/// Prefix of `a` up to `split`, then the rest of `b` from `split`.
pub fn crossover(a: &[u8], b: &[u8], split: usize) -> Vec<u8> {
    let s = split.min(a.len());
    let mut v = a[..s].to_vec();
    if s < b.len() {
        v.extend_from_slice(&b[s..]);
    }
    v
}

/// Stateful mutator; all randomness comes from the configured seed.
#[derive(Debug, Clone)]
pub struct Mutator {
    pub config: MutatorConfig,
    rng: ChaCha8Rng,
}

impl Mutator {
    pub fn new(config: MutatorConfig) -> Mutator {
        let rng = derive_rng(config.seed, 3);
        Mutator { config, rng }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Mutates `seed`; `pool` supplies crossover and splice partners.
    pub fn mutate(&mut self, seed: &[u8], pool: &[Seed]) -> Vec<u8> {
        assert!(!seed.is_empty(), "mutating an empty seed");
        let mut out = match self.config.mode {
            MutationMode::Genetic => self.genetic(seed, pool),
            MutationMode::Havoc => self.havoc(seed, pool),
        };
        out.truncate(self.config.max_size);
        if out.is_empty() {
            out.push(self.rng.random());
        }
        out
    }

    fn partner<'a>(&mut self, pool: &'a [Seed]) -> Option<&'a [u8]> {
        if pool.is_empty() {
            return None;
        }
        Some(&pool[self.rng.random_range(0..pool.len())].bytes)
    }

    fn genetic(&mut self, seed: &[u8], pool: &[Seed]) -> Vec<u8> {
        if self.rng.random_bool(0.5) {
            if let Some(other) = self.partner(pool) {
                let split = self.rng.random_range(0..=seed.len());
                return crossover(seed, other, split);
            }
        }
        let mut v = seed.to_vec();
        let n = self.rng.random_range(1..=8usize);
        for _ in 0..n {
            let i = self.rng.random_range(0..v.len());
            v[i] = self.rng.random();
        }
        v
    }

    fn havoc(&mut self, seed: &[u8], pool: &[Seed]) -> Vec<u8> {
        let mut v = seed.to_vec();
        let n = self.rng.random_range(1..=self.config.max_stack.max(1));
        for _ in 0..n {
            match self.rng.random_range(0..5u8) {
                0 if !v.is_empty() => {
                    let i = self.rng.random_range(0..v.len() * 8);
                    v[i / 8] ^= 1 << (i % 8);
                }
                1 if !v.is_empty() => {
                    let i = self.rng.random_range(0..v.len());
                    v[i] = self.rng.random();
                }
                2 if v.len() < self.config.max_size => {
                    let i = self.rng.random_range(0..=v.len());
                    v.insert(i, self.rng.random());
                }
                3 if v.len() > 1 => {
                    let i = self.rng.random_range(0..v.len());
                    v.remove(i);
                }
                4 => {
                    if let Some(other) = self.partner(pool) {
                        let split = self.rng.random_range(0..=v.len());
                        v = crossover(&v, other, split);
                    }
                }
                _ => {}
            }
        }
        v
    }

    /// Picks a parent: uniformly among the top-k with feedback, uniformly
    /// among everything without.
    pub fn select_parent<'a>(&mut self, generation: &'a [Seed]) -> Option<&'a Seed> {
        if generation.is_empty() {
            return None;
        }
        if !self.config.feedback {
            return Some(&generation[self.rng.random_range(0..generation.len())]);
        }
        let top = select_top_k(generation, self.config.k);
        let pick = &top[self.rng.random_range(0..top.len())];
        generation.iter().find(|s| s.id == pick.id)
    }
}

fn rank(a: &Seed, b: &Seed) -> Ordering {
    b.fitness.cmp(&a.fitness).then(a.bytes.len().cmp(&b.bytes.len())).then(a.id.cmp(&b.id))
}

/// The `k` best seeds: highest fitness, then shorter, then lower id.
pub fn select_top_k(generation: &[Seed], k: usize) -> Vec<Seed> {
    let mut v = generation.to_vec();
    v.sort_by(rank);
    v.truncate(k);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn fitness_formula() {
        assert_eq!(fitness(10, 1, 2, 64), Fitness { num: 42, den: 1 });
        assert_eq!(fitness(0, 4, 4, 64).as_f64(), 64.0);
        assert!(fitness(3, 1, 2, 64) > fitness(2, 1, 2, 64));
    }

    #[test]
    fn crossover_split() {
        assert_eq!(crossover(&[0xAA; 6], &[0xBB; 6], 2), vec![0xAA, 0xAA, 0xBB, 0xBB, 0xBB, 0xBB]);
    }

    #[test]
    fn small_corpora() {
        assert!(gen_random_corpus(0, 16, 1).is_empty());
        assert_eq!(gen_random_corpus(3, 16, 1), gen_random_corpus(3, 16, 1));
        let v = gen_valid_corpus(1, 1, 5);
        assert_eq!(v[0].bytes.len(), 1);
    }
}
