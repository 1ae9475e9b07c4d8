//! µcode model: µop words, triads, sequence words, the address space and
//! textual listings.

pub mod asm;
pub mod image;
pub mod uop;

use core::fmt;

pub use image::UcodeImage;
pub use uop::{MicroOp, Opcode, OperandB, Reg};

pub const ADDR_SPACE: u16 = 0x8000;
pub const ROM_END: u16 = 0x7C00;
pub const RAM_BASE: u16 = 0x7C00;
pub const RAM_TRIADS: usize = 256;

/// A 15-bit µcode address. The low two bits select the lane within a triad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct UcodeAddress(u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddressError {
    OutOfRange(u32),
    SlotThree(u16),
}

impl fmt::Display for AddressError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AddressError::OutOfRange(v) => write!(f, "µcode address {v:#x} outside [0, 0x8000)"),
            AddressError::SlotThree(v) => write!(f, "µcode address {v:#06x} names the sequence-word lane"),
        }
    }
}

impl UcodeAddress {
    pub fn new(value: u32) -> Result<UcodeAddress, AddressError> {
        if value >= ADDR_SPACE as u32 {
            return Err(AddressError::OutOfRange(value));
        }
        if value & 3 == 3 {
            return Err(AddressError::SlotThree(value as u16));
        }
        Ok(UcodeAddress(value as u16))
    }

    /// Builds an address without validation. Callers guarantee range.
    pub const fn new_unchecked(value: u16) -> UcodeAddress {
        UcodeAddress(value)
    }

    pub const fn value(self) -> u16 {
        self.0
    }

    pub const fn slot(self) -> u16 {
        self.0 & 3
    }

    pub const fn triad_base(self) -> u16 {
        self.0 & !3
    }

    pub const fn is_rom(self) -> bool {
        self.0 < ROM_END
    }

    pub const fn is_ram(self) -> bool {
        self.0 >= RAM_BASE && self.0 < ADDR_SPACE
    }

    pub const fn is_hookable(self) -> bool {
        self.is_rom() && self.0 & 1 == 0 && self.slot() != 3
    }
}

impl fmt::Display for UcodeAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#06x}", self.0)
    }
}

/// Every hookable address in ascending order (slots 0 and 2 of every ROM triad).
pub fn hookable_addresses() -> impl Iterator<Item = UcodeAddress> {
    (0..ROM_END).step_by(2).map(UcodeAddress)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum Sync {
    #[default]
    None,
    LfenceWait,
    SyncFull,
}

/// Per-triad control word: termination, ordering and a static branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct SequenceWord {
    pub uend: bool,
    pub sync: Sync,
    pub goto_addr: Option<UcodeAddress>,
}

impl SequenceWord {
    pub const NONE: SequenceWord = SequenceWord { uend: false, sync: Sync::None, goto_addr: None };

    pub fn uend() -> SequenceWord {
        SequenceWord { uend: true, ..SequenceWord::NONE }
    }

    pub fn goto(target: UcodeAddress) -> SequenceWord {
        SequenceWord { goto_addr: Some(target), ..SequenceWord::NONE }
    }

    pub fn is_fence(&self) -> bool {
        self.sync != Sync::None
    }

    /// Bit 0 uend, bits 1-2 sync, bit 3 goto present, bits 16-30 goto address.
    pub fn encode(&self) -> u64 {
        let sync = match self.sync {
            Sync::None => 0,
            Sync::LfenceWait => 1,
            Sync::SyncFull => 2,
        };
        let mut w = self.uend as u64 | sync << 1;
        if let Some(a) = self.goto_addr {
            w |= 1 << 3 | (a.value() as u64) << 16;
        }
        w
    }

    /// Decodes a stored sequence word. Reserved bits make the word
    /// non-canonical and yield `None`.
    pub fn decode(w: u64) -> Option<SequenceWord> {
        let sync = match (w >> 1) & 3 {
            0 => Sync::None,
            1 => Sync::LfenceWait,
            2 => Sync::SyncFull,
            _ => return None,
        };
        let goto_addr = if w & 8 != 0 {
            let a = ((w >> 16) & 0x7FFF) as u16;
            if a & 3 != 0 {
                return None;
            }
            Some(UcodeAddress(a))
        } else {
            None
        };
        let seq = SequenceWord { uend: w & 1 != 0, sync, goto_addr };
        (seq.encode() == w).then_some(seq)
    }
}

/// Three µops and a sequence word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triad {
    pub ops: [MicroOp; 3],
    pub seq: SequenceWord,
}

impl Default for Triad {
    fn default() -> Self {
        Triad { ops: [MicroOp::NOP; 3], seq: SequenceWord::NONE }
    }
}

impl Triad {
    pub fn new(ops: [MicroOp; 3], seq: SequenceWord) -> Triad {
        Triad { ops, seq }
    }

    pub fn to_words(&self) -> [u64; 4] {
        [self.ops[0].raw(), self.ops[1].raw(), self.ops[2].raw(), self.seq.encode()]
    }

    pub fn from_words(w: [u64; 4]) -> Option<Triad> {
        Some(Triad {
            ops: [MicroOp::from_raw(w[0]), MicroOp::from_raw(w[1]), MicroOp::from_raw(w[2])],
            seq: SequenceWord::decode(w[3])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hookable_count_matches_rom_size() {
        assert_eq!(hookable_addresses().count(), 0x7C00 / 2);
        for a in hookable_addresses() {
            let partner = a.value() + 1;
            // The odd partner is the next lane; lane 3 is never fetched.
            assert!(partner & 3 == 1 || partner & 3 == 3);
            assert_eq!(partner & !3, a.triad_base());
        }
    }

    #[test]
    fn address_validation() {
        assert!(UcodeAddress::new(0x8000).is_err());
        assert_eq!(UcodeAddress::new(3), Err(AddressError::SlotThree(3)));
        assert!(UcodeAddress::new(0x7C00).unwrap().is_ram());
        assert!(!UcodeAddress::new(0x0101).unwrap().is_hookable());
        assert!(UcodeAddress::new(0x0102).unwrap().is_hookable());
        assert!(!UcodeAddress::new(0x7C00).unwrap().is_hookable());
    }

    #[test]
    fn triad_is_four_words() {
        let t = Triad::new([MicroOp::NOP; 3], SequenceWord::uend());
        let w = t.to_words();
        assert_eq!(w.len(), 4);
        assert_eq!(Triad::from_words(w), Some(t));
    }

    proptest::proptest! {
        #[test]
        fn seqw_round_trip(uend: bool, sync in 0u8..3, goto in proptest::option::of(0u16..0x2000)) {
            let seq = SequenceWord {
                uend,
                sync: [Sync::None, Sync::LfenceWait, Sync::SyncFull][sync as usize],
                goto_addr: goto.map(|g| UcodeAddress(g * 4)),
            };
            proptest::prop_assert_eq!(SequenceWord::decode(seq.encode()), Some(seq));
        }
    }
}
