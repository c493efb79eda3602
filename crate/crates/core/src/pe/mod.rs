//! Byte-exact PE32/PE64 model: parse, mutate, serialize.
//!
//! The model keeps every region it does not interpret (DOS stub, header
//! slack, inter-section gaps, overlay) verbatim, so `serialize(parse(f))`
//! reproduces `f` exactly for any well-formed input. Mutations (new
//! sections, relocation rewrites, checksum) go through dedicated methods
//! that keep the header fields consistent.

mod reloc;

pub use reloc::{RelocEntry, RelocKind, RelocationTable};

use thiserror::Error;

pub const DIR_EXPORT: usize = 0;
pub const DIR_IMPORT: usize = 1;
pub const DIR_SECURITY: usize = 4;
pub const DIR_BASERELOC: usize = 5;
pub const DIR_TLS: usize = 9;
pub const DIR_IAT: usize = 12;

pub const SCN_CNT_CODE: u32 = 0x0000_0020;
pub const SCN_CNT_INITIALIZED_DATA: u32 = 0x0000_0040;
pub const SCN_MEM_DISCARDABLE: u32 = 0x0200_0000;
pub const SCN_MEM_EXECUTE: u32 = 0x2000_0000;
pub const SCN_MEM_READ: u32 = 0x4000_0000;
pub const SCN_MEM_WRITE: u32 = 0x8000_0000;

#[derive(Debug, Error)]
pub enum PeError {
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
    #[error("section {name} raw range {off:#x}+{size:#x} exceeds file size {file:#x}")]
    SectionOutOfBounds { name: String, off: u32, size: u32, file: usize },
    #[error("section name longer than 8 bytes")]
    NameTooLong,
    #[error("no section contains rva {0:#x}")]
    BadRva(u64),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Arch {
    Pe32,
    Pe64,
}

impl Arch {
    pub fn is64(self) -> bool {
        self == Arch::Pe64
    }

    pub fn pointer_size(self) -> u32 {
        if self.is64() { 8 } else { 4 }
    }
}

#[derive(Clone, Debug)]
pub struct FileHeader {
    pub machine: u16,
    pub time_date_stamp: u32,
    pub pointer_to_symbol_table: u32,
    pub number_of_symbols: u32,
    pub size_of_optional_header: u16,
    pub characteristics: u16,
}

/// Merged PE32/PE64 optional header; `base_of_data` only exists for PE32 and
/// the four size fields are pointer-width on disk.
#[derive(Clone, Debug)]
pub struct OptionalHeader {
    pub magic: u16,
    pub major_linker_version: u8,
    pub minor_linker_version: u8,
    pub size_of_code: u32,
    pub size_of_initialized_data: u32,
    pub size_of_uninitialized_data: u32,
    pub address_of_entry_point: u32,
    pub base_of_code: u32,
    pub base_of_data: u32,
    pub image_base: u64,
    pub section_alignment: u32,
    pub file_alignment: u32,
    pub major_os_version: u16,
    pub minor_os_version: u16,
    pub major_image_version: u16,
    pub minor_image_version: u16,
    pub major_subsystem_version: u16,
    pub minor_subsystem_version: u16,
    pub win32_version_value: u32,
    pub size_of_image: u32,
    pub size_of_headers: u32,
    pub checksum: u32,
    pub subsystem: u16,
    pub dll_characteristics: u16,
    pub size_of_stack_reserve: u64,
    pub size_of_stack_commit: u64,
    pub size_of_heap_reserve: u64,
    pub size_of_heap_commit: u64,
    pub loader_flags: u32,
    pub number_of_rva_and_sizes: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DataDirectory {
    pub rva: u32,
    pub size: u32,
}

#[derive(Clone, Debug)]
pub struct Section {
    pub name: [u8; 8],
    pub virtual_size: u32,
    pub virtual_address: u32,
    pub raw_size: u32,
    pub raw_offset: u32,
    pub pointer_to_relocations: u32,
    pub pointer_to_linenumbers: u32,
    pub number_of_relocations: u16,
    pub number_of_linenumbers: u16,
    pub characteristics: u32,
    pub data: Vec<u8>,
}

impl Section {
    pub fn name_str(&self) -> String {
        let end = self.name.iter().position(|&b| b == 0).unwrap_or(8);
        String::from_utf8_lossy(&self.name[..end]).into_owned()
    }

    /// Virtual extent: bytes the loader maps for this section.
    pub fn virtual_end(&self) -> u32 {
        self.virtual_address + self.virtual_size.max(self.raw_size)
    }

    pub fn contains_rva(&self, rva: u64) -> bool {
        rva >= self.virtual_address as u64 && rva < self.virtual_end() as u64
    }

    pub fn is_executable(&self) -> bool {
        self.characteristics & SCN_MEM_EXECUTE != 0
    }

    pub fn is_writable(&self) -> bool {
        self.characteristics & SCN_MEM_WRITE != 0
    }

    pub fn is_readable(&self) -> bool {
        self.characteristics & SCN_MEM_READ != 0
    }
}

#[derive(Clone, Debug)]
pub struct PeImage {
    pub arch: Arch,
    /// Everything before the NT signature, DOS header included.
    pub dos_stub: Vec<u8>,
    pub file_header: FileHeader,
    pub opt: OptionalHeader,
    pub data_dirs: Vec<DataDirectory>,
    pub sections: Vec<Section>,
    /// Bytes between the end of the section table and size_of_headers.
    header_tail: Vec<u8>,
    /// Non-zero slack between section raw regions, keyed by file offset.
    gaps: Vec<(u32, Vec<u8>)>,
    /// Bytes after the last section's raw data.
    pub overlay: Vec<u8>,
    relocations: Option<RelocationTable>,
}

fn rd_u16(b: &[u8], o: usize) -> Result<u16, PeError> {
    b.get(o..o + 2)
        .map(|s| u16::from_le_bytes(s.try_into().unwrap()))
        .ok_or(PeError::MalformedHeader("truncated"))
}

fn rd_u32(b: &[u8], o: usize) -> Result<u32, PeError> {
    b.get(o..o + 4)
        .map(|s| u32::from_le_bytes(s.try_into().unwrap()))
        .ok_or(PeError::MalformedHeader("truncated"))
}

fn rd_u64(b: &[u8], o: usize) -> Result<u64, PeError> {
    b.get(o..o + 8)
        .map(|s| u64::from_le_bytes(s.try_into().unwrap()))
        .ok_or(PeError::MalformedHeader("truncated"))
}

pub fn align_up(v: u32, align: u32) -> u32 {
    debug_assert!(align.is_power_of_two());
    (v + align - 1) & !(align - 1)
}

/// Architecture of a PE file from its optional-header magic, without a full
/// parse.
pub fn detect_arch(bytes: &[u8]) -> Result<Arch, PeError> {
    if rd_u16(bytes, 0)? != 0x5A4D {
        return Err(PeError::MalformedHeader("missing MZ signature"));
    }
    let e_lfanew = rd_u32(bytes, 0x3C)? as usize;
    if rd_u32(bytes, e_lfanew)? != 0x0000_4550 {
        return Err(PeError::MalformedHeader("missing PE signature"));
    }
    match rd_u16(bytes, e_lfanew + 24)? {
        0x10B => Ok(Arch::Pe32),
        0x20B => Ok(Arch::Pe64),
        _ => Err(PeError::MalformedHeader("unknown optional-header magic")),
    }
}

impl PeImage {
    pub fn parse(bytes: &[u8]) -> Result<PeImage, PeError> {
        let arch = detect_arch(bytes)?;
        let e_lfanew = rd_u32(bytes, 0x3C)? as usize;
        if e_lfanew < 0x40 {
            return Err(PeError::MalformedHeader("e_lfanew under DOS header"));
        }
        let dos_stub = bytes[..e_lfanew].to_vec();
        let fh_off = e_lfanew + 4;
        let file_header = FileHeader {
            machine: rd_u16(bytes, fh_off)?,
            time_date_stamp: rd_u32(bytes, fh_off + 4)?,
            pointer_to_symbol_table: rd_u32(bytes, fh_off + 8)?,
            number_of_symbols: rd_u32(bytes, fh_off + 12)?,
            size_of_optional_header: rd_u16(bytes, fh_off + 16)?,
            characteristics: rd_u16(bytes, fh_off + 18)?,
        };
        let nsec = rd_u16(bytes, fh_off + 2)? as usize;
        let o = fh_off + 20;
        let is64 = arch.is64();

        let opt = OptionalHeader {
            magic: rd_u16(bytes, o)?,
            major_linker_version: bytes[o + 2],
            minor_linker_version: bytes[o + 3],
            size_of_code: rd_u32(bytes, o + 4)?,
            size_of_initialized_data: rd_u32(bytes, o + 8)?,
            size_of_uninitialized_data: rd_u32(bytes, o + 12)?,
            address_of_entry_point: rd_u32(bytes, o + 16)?,
            base_of_code: rd_u32(bytes, o + 20)?,
            base_of_data: if is64 { 0 } else { rd_u32(bytes, o + 24)? },
            image_base: if is64 { rd_u64(bytes, o + 24)? } else { rd_u32(bytes, o + 28)? as u64 },
            section_alignment: rd_u32(bytes, o + 32)?,
            file_alignment: rd_u32(bytes, o + 36)?,
            major_os_version: rd_u16(bytes, o + 40)?,
            minor_os_version: rd_u16(bytes, o + 42)?,
            major_image_version: rd_u16(bytes, o + 44)?,
            minor_image_version: rd_u16(bytes, o + 46)?,
            major_subsystem_version: rd_u16(bytes, o + 48)?,
            minor_subsystem_version: rd_u16(bytes, o + 50)?,
            win32_version_value: rd_u32(bytes, o + 52)?,
            size_of_image: rd_u32(bytes, o + 56)?,
            size_of_headers: rd_u32(bytes, o + 60)?,
            checksum: rd_u32(bytes, o + 64)?,
            subsystem: rd_u16(bytes, o + 68)?,
            dll_characteristics: rd_u16(bytes, o + 70)?,
            size_of_stack_reserve: if is64 { rd_u64(bytes, o + 72)? } else { rd_u32(bytes, o + 72)? as u64 },
            size_of_stack_commit: if is64 { rd_u64(bytes, o + 80)? } else { rd_u32(bytes, o + 76)? as u64 },
            size_of_heap_reserve: if is64 { rd_u64(bytes, o + 88)? } else { rd_u32(bytes, o + 80)? as u64 },
            size_of_heap_commit: if is64 { rd_u64(bytes, o + 96)? } else { rd_u32(bytes, o + 84)? as u64 },
            loader_flags: rd_u32(bytes, if is64 { o + 104 } else { o + 88 })?,
            number_of_rva_and_sizes: rd_u32(bytes, if is64 { o + 108 } else { o + 92 })?,
        };
        if opt.section_alignment == 0
            || !opt.section_alignment.is_power_of_two()
            || opt.file_alignment == 0
            || !opt.file_alignment.is_power_of_two()
        {
            return Err(PeError::MalformedHeader("bad alignment values"));
        }
        let ndirs = opt.number_of_rva_and_sizes as usize;
        if ndirs > 16 {
            return Err(PeError::MalformedHeader("more than 16 data directories"));
        }
        let dirs_off = if is64 { o + 112 } else { o + 96 };
        let mut data_dirs = Vec::with_capacity(ndirs);
        for i in 0..ndirs {
            data_dirs.push(DataDirectory {
                rva: rd_u32(bytes, dirs_off + i * 8)?,
                size: rd_u32(bytes, dirs_off + 4 + i * 8)?,
            });
        }
        let fixed = if is64 { 112usize } else { 96 };
        if file_header.size_of_optional_header as usize != fixed + 8 * ndirs {
            return Err(PeError::MalformedHeader("optional header size mismatch"));
        }

        let table_off = dirs_off + ndirs * 8;
        let mut sections = Vec::with_capacity(nsec);
        for i in 0..nsec {
            let so = table_off + i * 40;
            let raw_size = rd_u32(bytes, so + 16)?;
            let raw_offset = rd_u32(bytes, so + 20)?;
            let name: [u8; 8] = bytes
                .get(so..so + 8)
                .ok_or(PeError::MalformedHeader("section table truncated"))?
                .try_into()
                .unwrap();
            let sec = Section {
                name,
                virtual_size: rd_u32(bytes, so + 8)?,
                virtual_address: rd_u32(bytes, so + 12)?,
                raw_size,
                raw_offset,
                pointer_to_relocations: rd_u32(bytes, so + 24)?,
                pointer_to_linenumbers: rd_u32(bytes, so + 28)?,
                number_of_relocations: rd_u16(bytes, so + 32)?,
                number_of_linenumbers: rd_u16(bytes, so + 34)?,
                characteristics: rd_u32(bytes, so + 36)?,
                data: match bytes.get(raw_offset as usize..(raw_offset + raw_size) as usize) {
                    Some(d) => d.to_vec(),
                    None => {
                        return Err(PeError::SectionOutOfBounds {
                            name: String::from_utf8_lossy(&name).into_owned(),
                            off: raw_offset,
                            size: raw_size,
                            file: bytes.len(),
                        })
                    }
                },
            };
            sections.push(sec);
        }

        // Layout invariants: ordered, non-overlapping, aligned.
        for w in sections.windows(2) {
            let end = align_up(w[0].virtual_end(), opt.section_alignment);
            if w[1].virtual_address < end {
                return Err(PeError::MalformedHeader("section virtual addresses overlap"));
            }
            if w[1].raw_size > 0 && w[0].raw_size > 0 && w[1].raw_offset < w[0].raw_offset + w[0].raw_size {
                return Err(PeError::MalformedHeader("section raw data out of order"));
            }
        }
        for s in &sections {
            if s.virtual_address % opt.section_alignment != 0 {
                return Err(PeError::MalformedHeader("section va misaligned"));
            }
            if s.raw_size > 0
                && (s.raw_offset % opt.file_alignment != 0 || s.raw_size % opt.file_alignment != 0)
            {
                return Err(PeError::MalformedHeader("section raw range misaligned"));
            }
        }
        if let Some(last) = sections.last() {
            if opt.size_of_image != align_up(last.virtual_end(), opt.section_alignment) {
                return Err(PeError::MalformedHeader("size_of_image inconsistent"));
            }
        }

        let table_end = table_off + nsec * 40;
        let hdr_size = opt.size_of_headers as usize;
        if hdr_size < table_end || hdr_size > bytes.len() {
            return Err(PeError::MalformedHeader("size_of_headers inconsistent"));
        }
        let header_tail = bytes[table_end..hdr_size].to_vec();

        // Capture slack between raw regions and the trailing overlay.
        let mut gaps = Vec::new();
        let mut cursor = hdr_size as u32;
        let mut raw_sections: Vec<&Section> = sections.iter().filter(|s| s.raw_size > 0).collect();
        raw_sections.sort_by_key(|s| s.raw_offset);
        for s in &raw_sections {
            if s.raw_offset > cursor {
                gaps.push((cursor, bytes[cursor as usize..s.raw_offset as usize].to_vec()));
            }
            cursor = s.raw_offset + s.raw_size;
        }
        let overlay = bytes[cursor as usize..].to_vec();

        let mut img = PeImage {
            arch,
            dos_stub,
            file_header,
            opt,
            data_dirs,
            sections,
            header_tail,
            gaps,
            overlay,
            relocations: None,
        };
        img.relocations = match img.dir(DIR_BASERELOC) {
            Some(d) if d.rva != 0 && d.size != 0 => {
                let blob = img.read_rva(d.rva as u64, d.size as usize)?.to_vec();
                Some(RelocationTable::decode(&blob)?)
            }
            _ => None,
        };
        Ok(img)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let e_lfanew = self.dos_stub.len();
        let is64 = self.arch.is64();
        let hdr_size = self.opt.size_of_headers as usize;
        let raw_end = self
            .sections
            .iter()
            .map(|s| (s.raw_offset + s.raw_size) as usize)
            .max()
            .unwrap_or(0)
            .max(hdr_size);
        let mut out = vec![0u8; raw_end];

        out[..e_lfanew].copy_from_slice(&self.dos_stub);
        let mut h = Vec::with_capacity(hdr_size - e_lfanew);
        h.extend_from_slice(&0x0000_4550u32.to_le_bytes());
        h.extend_from_slice(&self.file_header.machine.to_le_bytes());
        h.extend_from_slice(&(self.sections.len() as u16).to_le_bytes());
        h.extend_from_slice(&self.file_header.time_date_stamp.to_le_bytes());
        h.extend_from_slice(&self.file_header.pointer_to_symbol_table.to_le_bytes());
        h.extend_from_slice(&self.file_header.number_of_symbols.to_le_bytes());
        h.extend_from_slice(&self.file_header.size_of_optional_header.to_le_bytes());
        h.extend_from_slice(&self.file_header.characteristics.to_le_bytes());
        let opt = &self.opt;
        h.extend_from_slice(&opt.magic.to_le_bytes());
        h.push(opt.major_linker_version);
        h.push(opt.minor_linker_version);
        h.extend_from_slice(&opt.size_of_code.to_le_bytes());
        h.extend_from_slice(&opt.size_of_initialized_data.to_le_bytes());
        h.extend_from_slice(&opt.size_of_uninitialized_data.to_le_bytes());
        h.extend_from_slice(&opt.address_of_entry_point.to_le_bytes());
        h.extend_from_slice(&opt.base_of_code.to_le_bytes());
        if is64 {
            h.extend_from_slice(&opt.image_base.to_le_bytes());
        } else {
            h.extend_from_slice(&opt.base_of_data.to_le_bytes());
            h.extend_from_slice(&(opt.image_base as u32).to_le_bytes());
        }
        h.extend_from_slice(&opt.section_alignment.to_le_bytes());
        h.extend_from_slice(&opt.file_alignment.to_le_bytes());
        h.extend_from_slice(&opt.major_os_version.to_le_bytes());
        h.extend_from_slice(&opt.minor_os_version.to_le_bytes());
        h.extend_from_slice(&opt.major_image_version.to_le_bytes());
        h.extend_from_slice(&opt.minor_image_version.to_le_bytes());
        h.extend_from_slice(&opt.major_subsystem_version.to_le_bytes());
        h.extend_from_slice(&opt.minor_subsystem_version.to_le_bytes());
        h.extend_from_slice(&opt.win32_version_value.to_le_bytes());
        h.extend_from_slice(&opt.size_of_image.to_le_bytes());
        h.extend_from_slice(&opt.size_of_headers.to_le_bytes());
        h.extend_from_slice(&opt.checksum.to_le_bytes());
        h.extend_from_slice(&opt.subsystem.to_le_bytes());
        h.extend_from_slice(&opt.dll_characteristics.to_le_bytes());
        if is64 {
            h.extend_from_slice(&opt.size_of_stack_reserve.to_le_bytes());
            h.extend_from_slice(&opt.size_of_stack_commit.to_le_bytes());
            h.extend_from_slice(&opt.size_of_heap_reserve.to_le_bytes());
            h.extend_from_slice(&opt.size_of_heap_commit.to_le_bytes());
        } else {
            h.extend_from_slice(&(opt.size_of_stack_reserve as u32).to_le_bytes());
            h.extend_from_slice(&(opt.size_of_stack_commit as u32).to_le_bytes());
            h.extend_from_slice(&(opt.size_of_heap_reserve as u32).to_le_bytes());
            h.extend_from_slice(&(opt.size_of_heap_commit as u32).to_le_bytes());
        }
        h.extend_from_slice(&opt.loader_flags.to_le_bytes());
        h.extend_from_slice(&opt.number_of_rva_and_sizes.to_le_bytes());
        for d in &self.data_dirs {
            h.extend_from_slice(&d.rva.to_le_bytes());
            h.extend_from_slice(&d.size.to_le_bytes());
        }
        for s in &self.sections {
            h.extend_from_slice(&s.name);
            h.extend_from_slice(&s.virtual_size.to_le_bytes());
            h.extend_from_slice(&s.virtual_address.to_le_bytes());
            h.extend_from_slice(&s.raw_size.to_le_bytes());
            h.extend_from_slice(&s.raw_offset.to_le_bytes());
            h.extend_from_slice(&s.pointer_to_relocations.to_le_bytes());
            h.extend_from_slice(&s.pointer_to_linenumbers.to_le_bytes());
            h.extend_from_slice(&s.number_of_relocations.to_le_bytes());
            h.extend_from_slice(&s.number_of_linenumbers.to_le_bytes());
            h.extend_from_slice(&s.characteristics.to_le_bytes());
        }
        h.extend_from_slice(&self.header_tail);
        debug_assert_eq!(e_lfanew + h.len(), hdr_size);
        out[e_lfanew..e_lfanew + h.len()].copy_from_slice(&h);

        for (off, bytes) in &self.gaps {
            let off = *off as usize;
            if off + bytes.len() <= out.len() {
                out[off..off + bytes.len()].copy_from_slice(bytes);
            }
        }
        for s in &self.sections {
            debug_assert_eq!(s.data.len(), s.raw_size as usize);
            let off = s.raw_offset as usize;
            out[off..off + s.data.len()].copy_from_slice(&s.data);
        }
        out.extend_from_slice(&self.overlay);
        out
    }

    pub fn dir(&self, idx: usize) -> Option<DataDirectory> {
        self.data_dirs.get(idx).copied()
    }

    pub fn set_dir(&mut self, idx: usize, rva: u32, size: u32) {
        if idx < self.data_dirs.len() {
            self.data_dirs[idx] = DataDirectory { rva, size };
        }
    }

    pub fn section_by_name(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name_str() == name)
    }

    pub fn section_containing(&self, rva: u64) -> Option<&Section> {
        self.sections.iter().find(|s| s.contains_rva(rva))
    }

    /// First executable section; text for every fixture and most binaries.
    pub fn text_section(&self) -> Option<&Section> {
        self.sections.iter().find(|s| s.is_executable())
    }

    pub fn read_rva(&self, rva: u64, len: usize) -> Result<&[u8], PeError> {
        let s = self.section_containing(rva).ok_or(PeError::BadRva(rva))?;
        let off = (rva - s.virtual_address as u64) as usize;
        s.data.get(off..off + len).ok_or(PeError::BadRva(rva))
    }

    pub fn read_u32_rva(&self, rva: u64) -> Result<u32, PeError> {
        Ok(u32::from_le_bytes(self.read_rva(rva, 4)?.try_into().unwrap()))
    }

    pub fn read_u64_rva(&self, rva: u64) -> Result<u64, PeError> {
        Ok(u64::from_le_bytes(self.read_rva(rva, 8)?.try_into().unwrap()))
    }

    pub fn write_rva(&mut self, rva: u64, bytes: &[u8]) -> Result<(), PeError> {
        let s = self
            .sections
            .iter_mut()
            .find(|s| s.contains_rva(rva))
            .ok_or(PeError::BadRva(rva))?;
        let off = (rva - s.virtual_address as u64) as usize;
        let dst = s.data.get_mut(off..off + bytes.len()).ok_or(PeError::BadRva(rva))?;
        dst.copy_from_slice(bytes);
        Ok(())
    }

    pub fn relocations(&self) -> Option<&RelocationTable> {
        self.relocations.as_ref()
    }

    /// Replace the relocation table model (callers also rewrite the bytes
    /// and the directory entry; see the rewrite module).
    pub fn set_relocations(&mut self, table: Option<RelocationTable>) {
        self.relocations = table;
    }

    /// Append a section. Virtual and raw placement follow the alignment
    /// rules; the section is zero-filled.
    pub fn add_section(
        &mut self,
        name: &str,
        size: u32,
        characteristics: u32,
    ) -> Result<&mut Section, PeError> {
        if name.len() > 8 {
            return Err(PeError::NameTooLong);
        }
        assert!(size > 0, "empty section");
        let sect_align = self.opt.section_alignment;
        let file_align = self.opt.file_alignment;
        let va = self
            .sections
            .last()
            .map(|s| align_up(s.virtual_end(), sect_align))
            .unwrap_or(sect_align);
        let raw_size = align_up(size, file_align);

        // growing the header region shifts every raw offset, so place the
        // new section only afterwards
        self.ensure_header_room(self.sections.len() + 1);
        let raw_offset = self
            .sections
            .iter()
            .map(|s| s.raw_offset + s.raw_size)
            .max()
            .unwrap_or(self.opt.size_of_headers)
            .max(self.opt.size_of_headers);
        let raw_offset = align_up(raw_offset, file_align);

        let mut sec_name = [0u8; 8];
        sec_name[..name.len()].copy_from_slice(name.as_bytes());
        self.sections.push(Section {
            name: sec_name,
            virtual_size: size,
            virtual_address: va,
            raw_size,
            raw_offset,
            pointer_to_relocations: 0,
            pointer_to_linenumbers: 0,
            number_of_relocations: 0,
            number_of_linenumbers: 0,
            characteristics,
            data: vec![0u8; raw_size as usize],
        });
        self.opt.size_of_image = align_up(va + size, sect_align);
        Ok(self.sections.last_mut().unwrap())
    }

    /// Grow the header region if the section table cannot fit `nsec`
    /// entries, shifting all raw data by a file-alignment multiple.
    fn ensure_header_room(&mut self, nsec: usize) {
        let table_end = self.dos_stub.len()
            + 24
            + self.file_header.size_of_optional_header as usize
            + nsec * 40;
        let hdr = self.opt.size_of_headers as usize;
        if table_end <= hdr {
            // consume slack from the front of the preserved tail
            let consumed = 40.min(self.header_tail.len());
            self.header_tail.drain(..consumed);
            return;
        }
        let grow = align_up((table_end - hdr) as u32, self.opt.file_alignment);
        self.opt.size_of_headers += grow;
        self.header_tail.resize(self.header_tail.len() + grow as usize, 0);
        let consumed = 40.min(self.header_tail.len());
        self.header_tail.drain(..consumed);
        for s in &mut self.sections {
            if s.raw_size > 0 {
                s.raw_offset += grow;
            }
        }
        for g in &mut self.gaps {
            g.0 += grow;
        }
    }

    /// Zero the checksum field, recompute over the serialized image and
    /// store the result.
    pub fn update_checksum(&mut self) -> u32 {
        self.opt.checksum = 0;
        let bytes = self.serialize();
        let sum = checksum(&bytes, self.checksum_offset());
        self.opt.checksum = sum;
        sum
    }

    /// Validate the stored checksum; a stored value of 0 is accepted as
    /// "unset".
    pub fn verify_checksum(&self) -> bool {
        if self.opt.checksum == 0 {
            return true;
        }
        let bytes = self.serialize();
        checksum(&bytes, self.checksum_offset()) == self.opt.checksum
    }

    fn checksum_offset(&self) -> usize {
        self.dos_stub.len() + 4 + 20 + 64
    }

    /// IAT slots as (slot rva, import name), from the import directory.
    pub fn imports(&self) -> Vec<(u64, String)> {
        let mut out = Vec::new();
        let Some(dir) = self.dir(DIR_IMPORT) else { return out };
        if dir.rva == 0 {
            return out;
        }
        let psize = self.arch.pointer_size() as u64;
        let mut desc = dir.rva as u64;
        loop {
            let Ok(d) = self.read_rva(desc, 20) else { break };
            let int_rva = u32::from_le_bytes(d[0..4].try_into().unwrap()) as u64;
            let name_rva = u32::from_le_bytes(d[12..16].try_into().unwrap());
            let iat_rva = u32::from_le_bytes(d[16..20].try_into().unwrap()) as u64;
            if iat_rva == 0 && name_rva == 0 {
                break;
            }
            let lookup = if int_rva != 0 { int_rva } else { iat_rva };
            let mut i = 0u64;
            loop {
                let thunk = if self.arch.is64() {
                    self.read_u64_rva(lookup + i * psize).unwrap_or(0)
                } else {
                    self.read_u32_rva(lookup + i * psize).unwrap_or(0) as u64
                };
                if thunk == 0 {
                    break;
                }
                let by_ordinal = if self.arch.is64() {
                    thunk & (1 << 63) != 0
                } else {
                    thunk & (1 << 31) != 0
                };
                if !by_ordinal {
                    if let Ok(name) = self.read_cstr(thunk + 2) {
                        out.push((iat_rva + i * psize, name));
                    }
                }
                i += 1;
            }
            desc += 20;
        }
        out
    }

    /// Exported (name, rva) pairs.
    pub fn exports(&self) -> Vec<(String, u32)> {
        let mut out = Vec::new();
        let Some(dir) = self.dir(DIR_EXPORT) else { return out };
        if dir.rva == 0 {
            return out;
        }
        let Ok(d) = self.read_rva(dir.rva as u64, 40) else { return out };
        let nnames = u32::from_le_bytes(d[24..28].try_into().unwrap()) as u64;
        let funcs = u32::from_le_bytes(d[28..32].try_into().unwrap()) as u64;
        let names = u32::from_le_bytes(d[32..36].try_into().unwrap()) as u64;
        let ords = u32::from_le_bytes(d[36..40].try_into().unwrap()) as u64;
        for i in 0..nnames {
            let Ok(name_rva) = self.read_u32_rva(names + i * 4) else { continue };
            let Ok(name) = self.read_cstr(name_rva as u64) else { continue };
            let Ok(ord) = self.read_rva(ords + i * 2, 2) else { continue };
            let ord = u16::from_le_bytes(ord.try_into().unwrap()) as u64;
            if let Ok(rva) = self.read_u32_rva(funcs + ord * 4) {
                out.push((name, rva));
            }
        }
        out
    }

    fn read_cstr(&self, rva: u64) -> Result<String, PeError> {
        let s = self.section_containing(rva).ok_or(PeError::BadRva(rva))?;
        let off = (rva - s.virtual_address as u64) as usize;
        let rest = s.data.get(off..).ok_or(PeError::BadRva(rva))?;
        let end = rest.iter().position(|&b| b == 0).ok_or(PeError::BadRva(rva))?;
        Ok(String::from_utf8_lossy(&rest[..end]).into_owned())
    }
}

/// PE checksum: one's-complement fold of 16-bit words (checksum field
/// excluded) plus the file length.
pub fn checksum(bytes: &[u8], checksum_off: usize) -> u32 {
    let mut sum: u32 = 0;
    let mut i = 0;
    let len = bytes.len();
    while i < len {
        if i == checksum_off {
            i += 4;
            continue;
        }
        let lo = bytes[i] as u32;
        let hi = if i + 1 < len { bytes[i + 1] as u32 } else { 0 };
        sum += lo | (hi << 8);
        sum = (sum & 0xFFFF) + (sum >> 16);
        i += 2;
    }
    sum = (sum & 0xFFFF) + (sum >> 16);
    sum + len as u32
}

#[cfg(test)]
mod tests;
