//! ROM + patch-RAM triad storage and its binary file format.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use super::{Triad, UcodeAddress, ADDR_SPACE, RAM_BASE, RAM_TRIADS, ROM_END};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageError {
    Misaligned(u16),
    OutOfRange(u16),
    RamFull,
    Truncated,
    BadSequenceWord(u16),
}

impl fmt::Display for ImageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageError::Misaligned(a) => write!(f, "triad base {a:#06x} not aligned to 4"),
            ImageError::OutOfRange(a) => write!(f, "triad base {a:#06x} outside the address space"),
            ImageError::RamFull => f.write_str("patch RAM holds at most 256 triads"),
            ImageError::Truncated => f.write_str("truncated image file"),
            ImageError::BadSequenceWord(a) => write!(f, "non-canonical sequence word at {a:#06x}"),
        }
    }
}

/// Sparse map of triad base address to triad. Missing triads read as all-zero
/// words (µop opcode 0, which is undefined).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UcodeImage {
    rom: BTreeMap<u16, Triad>,
    ram: BTreeMap<u16, Triad>,
}

pub const RECORD_LEN: usize = 2 + 4 * 8;

impl UcodeImage {
    pub fn new() -> UcodeImage {
        UcodeImage::default()
    }

    pub fn insert(&mut self, base: u16, triad: Triad) -> Result<(), ImageError> {
        if base & 3 != 0 {
            return Err(ImageError::Misaligned(base));
        }
        if base >= ADDR_SPACE {
            return Err(ImageError::OutOfRange(base));
        }
        if base < ROM_END {
            self.rom.insert(base, triad);
        } else {
            if !self.ram.contains_key(&base) && self.ram.len() >= RAM_TRIADS {
                return Err(ImageError::RamFull);
            }
            self.ram.insert(base, triad);
        }
        Ok(())
    }

    pub fn triad(&self, base: u16) -> Option<&Triad> {
        if base >= RAM_BASE {
            self.ram.get(&base)
        } else {
            self.rom.get(&base)
        }
    }

    pub fn rom(&self) -> &BTreeMap<u16, Triad> {
        &self.rom
    }

    pub fn ram(&self) -> &BTreeMap<u16, Triad> {
        &self.ram
    }

    pub fn clear_ram(&mut self) {
        self.ram.clear();
    }

    /// All triads in address order.
    pub fn iter(&self) -> impl Iterator<Item = (u16, &Triad)> {
        self.rom.iter().chain(self.ram.iter()).map(|(a, t)| (*a, t))
    }

    /// Raw word at an address (slot 3 is the sequence word).
    pub fn word(&self, addr: u16) -> u64 {
        match self.triad(addr & !3) {
            Some(t) => t.to_words()[(addr & 3) as usize],
            None => 0,
        }
    }

    /// Overwrites one stored word. Used by the patch-RAM control port.
    pub fn set_word(&mut self, addr: u16, value: u64) -> Result<(), ImageError> {
        let base = addr & !3;
        let mut words = self.triad(base).map(|t| t.to_words()).unwrap_or([0; 4]);
        words[(addr & 3) as usize] = value;
        let t = Triad::from_words(words).ok_or(ImageError::BadSequenceWord(base))?;
        self.insert(base, t)
    }

    pub fn contains(&self, addr: UcodeAddress) -> bool {
        self.triad(addr.triad_base()).is_some()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity((self.rom.len() + self.ram.len()) * RECORD_LEN);
        for (base, t) in self.iter() {
            out.extend_from_slice(&base.to_le_bytes());
            for w in t.to_words() {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<UcodeImage, ImageError> {
        if bytes.len() % RECORD_LEN != 0 {
            return Err(ImageError::Truncated);
        }
        let mut img = UcodeImage::new();
        for rec in bytes.chunks_exact(RECORD_LEN) {
            let base = u16::from_le_bytes([rec[0], rec[1]]);
            let mut words = [0u64; 4];
            for (i, w) in words.iter_mut().enumerate() {
                let off = 2 + i * 8;
                *w = u64::from_le_bytes(rec[off..off + 8].try_into().expect("8 bytes"));
            }
            let t = Triad::from_words(words).ok_or(ImageError::BadSequenceWord(base))?;
            img.insert(base, t)?;
        }
        Ok(img)
    }
}
