//! Microcoded CPU simulator and the fuzzing algorithms that drive it: hook
//! instrumentation, coverage scheduling, fence serialization, differential
//! comparison and speculative-window fuzzing.
#![no_std]

extern crate alloc;

pub mod ucode;
pub mod engine;
pub mod hash;
pub mod rng;
pub mod gisa;
pub mod rom;
pub mod vm;
pub mod instrument;
pub mod sched;
pub mod serialize;
pub mod compare;
pub mod mutate;
pub mod specfuzz;
pub mod report;
pub mod campaign;
