//! Base-relocation table model. The on-disk format is a run of blocks, one
//! per 4K page: u32 page rva, u32 block size, then u16 entries of
//! `kind << 12 | page_offset`. Decoding drops ABS padding entries; encoding
//! re-inserts one ABS entry per odd-sized block, so decode∘encode is the
//! identity on the entry set and idempotent on bytes.

use super::PeError;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum RelocKind {
    Abs,
    HighLow,
    Dir64,
}

impl RelocKind {
    pub fn code(self) -> u16 {
        match self {
            RelocKind::Abs => 0,
            RelocKind::HighLow => 3,
            RelocKind::Dir64 => 10,
        }
    }

    fn from_code(c: u16) -> Result<RelocKind, PeError> {
        match c {
            0 => Ok(RelocKind::Abs),
            3 => Ok(RelocKind::HighLow),
            10 => Ok(RelocKind::Dir64),
            _ => Err(PeError::MalformedHeader("unsupported relocation kind")),
        }
    }

    /// Width of the patched cell in bytes.
    pub fn width(self) -> u64 {
        match self {
            RelocKind::Abs => 0,
            RelocKind::HighLow => 4,
            RelocKind::Dir64 => 8,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct RelocEntry {
    pub rva: u32,
    pub kind: RelocKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelocationTable {
    /// Sorted by rva; ABS padding is not represented.
    pub entries: Vec<RelocEntry>,
}

impl RelocationTable {
    pub fn decode(blob: &[u8]) -> Result<RelocationTable, PeError> {
        let mut entries = Vec::new();
        let mut o = 0usize;
        while o + 8 <= blob.len() {
            let page = u32::from_le_bytes(blob[o..o + 4].try_into().unwrap());
            let size = u32::from_le_bytes(blob[o + 4..o + 8].try_into().unwrap()) as usize;
            if size == 0 && page == 0 {
                break; // zero padding after the last block
            }
            if size < 8 || o + size > blob.len() || size % 2 != 0 {
                return Err(PeError::MalformedHeader("bad relocation block size"));
            }
            for e in (o + 8..o + size).step_by(2) {
                let v = u16::from_le_bytes(blob[e..e + 2].try_into().unwrap());
                let kind = RelocKind::from_code(v >> 12)?;
                if kind == RelocKind::Abs {
                    continue;
                }
                entries.push(RelocEntry { rva: page + (v & 0xFFF) as u32, kind });
            }
            o += size;
        }
        entries.sort_unstable();
        Ok(RelocationTable { entries })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut sorted = self.entries.clone();
        sorted.sort_unstable();
        let mut out = Vec::new();
        let mut i = 0;
        while i < sorted.len() {
            let page = sorted[i].rva & !0xFFF;
            let start = i;
            while i < sorted.len() && sorted[i].rva & !0xFFF == page {
                i += 1;
            }
            let n = i - start;
            let padded = n + (n & 1);
            out.extend_from_slice(&page.to_le_bytes());
            out.extend_from_slice(&((8 + padded * 2) as u32).to_le_bytes());
            for e in &sorted[start..i] {
                let v = (e.kind.code() << 12) | (e.rva & 0xFFF) as u16;
                out.extend_from_slice(&v.to_le_bytes());
            }
            if n & 1 == 1 {
                out.extend_from_slice(&0u16.to_le_bytes());
            }
        }
        out
    }

    pub fn contains(&self, rva: u32) -> bool {
        self.entries.binary_search_by_key(&rva, |e| e.rva).is_ok()
    }

    /// Entries whose patched cell intersects [lo, hi).
    pub fn entries_in(&self, lo: u64, hi: u64) -> impl Iterator<Item = &RelocEntry> {
        self.entries
            .iter()
            .filter(move |e| (e.rva as u64) < hi && e.rva as u64 + e.kind.width() > lo)
    }
}
