//! A reference PE writer and a minimal reader, independent of the production
//! parser. The writer lays files out by the book (DOS header, NT headers,
//! section table, aligned section data) so round-trip and rebase tests have
//! known-good inputs; the reader and the relocation applier double as the
//! oracles for rebase tests.

const DOS_MAGIC: u16 = 0x5A4D;
const NT_MAGIC: u32 = 0x0000_4550;
const SECTION_ALIGN: u32 = 0x1000;
const FILE_ALIGN: u32 = 0x200;

pub const CHARS_TEXT: u32 = 0x6000_0020;
pub const CHARS_RDATA: u32 = 0x4000_0040;
pub const CHARS_DATA: u32 = 0xC000_0040;
pub const CHARS_RELOC: u32 = 0x4200_0040;

pub const RELOC_ABS: u8 = 0;
pub const RELOC_HIGHLOW: u8 = 3;
pub const RELOC_DIR64: u8 = 10;

fn align_up(v: u32, a: u32) -> u32 {
    (v + a - 1) & !(a - 1)
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn patch_u32(buf: &mut [u8], off: usize, v: u32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

/// What the builder decided about the produced image; tests read addresses
/// (IAT slots, TLS cells, section placement) from here instead of re-parsing.
#[derive(Clone, Debug, Default)]
pub struct PeLayout {
    pub is64: bool,
    pub image_base: u64,
    pub entry_rva: u32,
    pub text_rva: u32,
    pub text_len: u32,
    pub rdata_rva: u32,
    pub data_rva: u32,
    pub reloc_rva: u32,
    /// (slot rva, import name) for every IAT entry.
    pub iat: Vec<(u32, String)>,
    pub tls_dir_rva: Option<u32>,
    pub tls_index_rva: Option<u32>,
    /// All relocated cells (rva, kind) in the emitted table, sorted.
    pub relocs: Vec<(u32, u8)>,
}

struct SectionDef {
    name: [u8; 8],
    chars: u32,
    data: Vec<u8>,
}

fn sec_name(s: &str) -> [u8; 8] {
    let mut n = [0u8; 8];
    n[..s.len()].copy_from_slice(s.as_bytes());
    n
}

pub struct PeBuilder {
    is64: bool,
    image_base: u64,
    entry_rva: Option<u32>,
    text: Vec<u8>,
    rdata: Vec<u8>,
    data: Vec<u8>,
    extra_sections: Vec<SectionDef>,
    exports: Vec<(String, u32)>,
    imports: Option<(String, Vec<String>)>,
    tls: Option<(Vec<u8>, Vec<u32>)>,
    reloc_rvas: Vec<u32>,
    dos_extra: Vec<u8>,
    overlay: Vec<u8>,
    zero_checksum: bool,
}

impl PeBuilder {
    pub fn new32() -> Self {
        Self::new(false)
    }

    pub fn new64() -> Self {
        Self::new(true)
    }

    fn new(is64: bool) -> Self {
        PeBuilder {
            is64,
            image_base: if is64 { 0x1_4000_0000 } else { 0x40_0000 },
            entry_rva: None,
            text: Vec::new(),
            rdata: Vec::new(),
            data: Vec::new(),
            extra_sections: Vec::new(),
            exports: Vec::new(),
            imports: None,
            tls: None,
            reloc_rvas: Vec::new(),
            dos_extra: Vec::new(),
            overlay: Vec::new(),
            zero_checksum: false,
        }
    }

    pub fn image_base(mut self, base: u64) -> Self {
        self.image_base = base;
        self
    }

    pub fn text(mut self, code: &[u8]) -> Self {
        self.text = code.to_vec();
        self
    }

    pub fn rdata(mut self, bytes: &[u8]) -> Self {
        self.rdata = bytes.to_vec();
        self
    }

    pub fn data(mut self, bytes: &[u8]) -> Self {
        self.data = bytes.to_vec();
        self
    }

    pub fn section(mut self, name: &str, chars: u32, bytes: &[u8]) -> Self {
        self.extra_sections.push(SectionDef {
            name: sec_name(name),
            chars,
            data: bytes.to_vec(),
        });
        self
    }

    /// Entry point, as an offset into the text bytes.
    pub fn entry(mut self, text_offset: u32) -> Self {
        self.entry_rva = Some(SECTION_ALIGN + text_offset);
        self
    }

    pub fn export(mut self, name: &str, text_offset: u32) -> Self {
        self.exports.push((name.to_string(), SECTION_ALIGN + text_offset));
        self
    }

    pub fn imports(mut self, dll: &str, names: &[&str]) -> Self {
        self.imports = Some((dll.to_string(), names.iter().map(|s| s.to_string()).collect()));
        self
    }

    /// TLS template data plus callback rvas (offsets into text).
    pub fn tls(mut self, raw: &[u8], callback_text_offsets: &[u32]) -> Self {
        let cbs = callback_text_offsets.iter().map(|o| SECTION_ALIGN + o).collect();
        self.tls = Some((raw.to_vec(), cbs));
        self
    }

    /// Mark an absolute-address cell (rva) for the relocation table.
    pub fn reloc(mut self, rva: u32) -> Self {
        self.reloc_rvas.push(rva);
        self
    }

    pub fn relocs(mut self, rvas: &[u32]) -> Self {
        self.reloc_rvas.extend_from_slice(rvas);
        self
    }

    /// Extra bytes between the DOS header and the NT headers (moves e_lfanew).
    pub fn dos_extra(mut self, bytes: &[u8]) -> Self {
        self.dos_extra = bytes.to_vec();
        self
    }

    pub fn overlay(mut self, bytes: &[u8]) -> Self {
        self.overlay = bytes.to_vec();
        self
    }

    pub fn zero_checksum(mut self) -> Self {
        self.zero_checksum = true;
        self
    }

    pub fn build(self) -> (Vec<u8>, PeLayout) {
        let is64 = self.is64;
        let ptr_size: u32 = if is64 { 8 } else { 4 };
        let mut layout = PeLayout {
            is64,
            image_base: self.image_base,
            ..Default::default()
        };

        // Section order: .text, .rdata, .data, extras, .reloc. Virtual
        // addresses are assigned first so directory content can be composed
        // with final rvas in one pass.
        let text_rva = SECTION_ALIGN;
        layout.text_rva = text_rva;
        layout.text_len = self.text.len() as u32;

        let mut rdata = self.rdata.clone();
        let rdata_rva = text_rva + align_up(self.text.len().max(1) as u32, SECTION_ALIGN);

        // Export directory.
        let mut export_dir = (0u32, 0u32);
        if !self.exports.is_empty() {
            while rdata.len() % 4 != 0 {
                rdata.push(0);
            }
            let dir_off = rdata.len() as u32;
            let n = self.exports.len() as u32;
            let funcs_off = dir_off + 40;
            let nameptrs_off = funcs_off + 4 * n;
            let ords_off = nameptrs_off + 4 * n;
            let strings_off = ords_off + 2 * n;
            let mut names = self.exports.clone();
            names.sort_by(|a, b| a.0.cmp(&b.0));
            let mut strings = Vec::new();
            let mut name_rvas = Vec::new();
            for (name, _) in &names {
                name_rvas.push(rdata_rva + strings_off + strings.len() as u32);
                strings.extend_from_slice(name.as_bytes());
                strings.push(0);
            }
            let module_name_rva = rdata_rva + strings_off + strings.len() as u32;
            strings.extend_from_slice(b"fixture.dll\0");

            put_u32(&mut rdata, 0); // characteristics
            put_u32(&mut rdata, 0); // timestamp
            put_u32(&mut rdata, 0); // version
            put_u32(&mut rdata, module_name_rva);
            put_u32(&mut rdata, 1); // ordinal base
            put_u32(&mut rdata, n);
            put_u32(&mut rdata, n);
            put_u32(&mut rdata, rdata_rva + funcs_off);
            put_u32(&mut rdata, rdata_rva + nameptrs_off);
            put_u32(&mut rdata, rdata_rva + ords_off);
            for (_, rva) in &names {
                put_u32(&mut rdata, *rva);
            }
            for rva in &name_rvas {
                put_u32(&mut rdata, *rva);
            }
            for i in 0..n {
                put_u16(&mut rdata, i as u16);
            }
            rdata.extend_from_slice(&strings);
            export_dir = (rdata_rva + dir_off, rdata.len() as u32 - dir_off);
        }

        // Import directory: one DLL, INT + IAT + hint/name entries.
        let mut import_dir = (0u32, 0u32);
        let mut iat_dir = (0u32, 0u32);
        if let Some((dll, names)) = &self.imports {
            while rdata.len() % 8 != 0 {
                rdata.push(0);
            }
            let n = names.len() as u32;
            let desc_off = rdata.len() as u32;
            let int_off = desc_off + 20 * 2; // one descriptor + terminator
            let iat_off = int_off + ptr_size * (n + 1);
            let hints_off = iat_off + ptr_size * (n + 1);

            let mut hints = Vec::new();
            let mut hint_rvas = Vec::new();
            for name in names {
                if hints.len() % 2 != 0 {
                    hints.push(0);
                }
                hint_rvas.push(rdata_rva + hints_off + hints.len() as u32);
                hints.extend_from_slice(&0u16.to_le_bytes());
                hints.extend_from_slice(name.as_bytes());
                hints.push(0);
            }
            if hints.len() % 2 != 0 {
                hints.push(0);
            }
            let dll_name_rva = rdata_rva + hints_off + hints.len() as u32;
            hints.extend_from_slice(dll.as_bytes());
            hints.push(0);

            // descriptor
            put_u32(&mut rdata, rdata_rva + int_off);
            put_u32(&mut rdata, 0);
            put_u32(&mut rdata, 0);
            put_u32(&mut rdata, dll_name_rva);
            put_u32(&mut rdata, rdata_rva + iat_off);
            rdata.extend_from_slice(&[0u8; 20]); // terminator

            for pass in 0..2 {
                // INT then IAT, identical before binding
                for (i, hint_rva) in hint_rvas.iter().enumerate() {
                    if pass == 1 {
                        layout
                            .iat
                            .push((rdata_rva + iat_off + ptr_size * i as u32, names[i].clone()));
                    }
                    if is64 {
                        put_u64(&mut rdata, *hint_rva as u64);
                    } else {
                        put_u32(&mut rdata, *hint_rva);
                    }
                }
                if is64 {
                    put_u64(&mut rdata, 0);
                } else {
                    put_u32(&mut rdata, 0);
                }
            }
            rdata.extend_from_slice(&hints);
            import_dir = (rdata_rva + desc_off, 40);
            iat_dir = (rdata_rva + iat_off, ptr_size * (n + 1));
        }

        let mut reloc_rvas: Vec<u32> = self.reloc_rvas.clone();

        // Data section: user bytes, then the TLS block (template + callbacks
        // + index cell all need to be loader-writable or at least mapped).
        let mut data = self.data.clone();
        let data_rva = if rdata.is_empty() {
            rdata_rva
        } else {
            rdata_rva + align_up(rdata.len() as u32, SECTION_ALIGN)
        };
        let mut tls_dir = (0u32, 0u32);
        if let Some((raw, callbacks)) = &self.tls {
            while data.len() % 8 != 0 {
                data.push(0);
            }
            let dir_size: u32 = if is64 { 40 } else { 24 };
            let dir_off = data.len() as u32;
            let raw_off = dir_off + dir_size;
            let cb_off = raw_off + raw.len() as u32;
            let index_off = cb_off + ptr_size * (callbacks.len() as u32 + 1);

            let base = self.image_base;
            let raw_va = base + (data_rva + raw_off) as u64;
            let cb_va = base + (data_rva + cb_off) as u64;
            let index_va = base + (data_rva + index_off) as u64;
            if is64 {
                put_u64(&mut data, raw_va);
                put_u64(&mut data, raw_va + raw.len() as u64);
                put_u64(&mut data, index_va);
                put_u64(&mut data, cb_va);
                put_u32(&mut data, 0);
                put_u32(&mut data, 0);
            } else {
                put_u32(&mut data, raw_va as u32);
                put_u32(&mut data, (raw_va + raw.len() as u64) as u32);
                put_u32(&mut data, index_va as u32);
                put_u32(&mut data, cb_va as u32);
                put_u32(&mut data, 0);
                put_u32(&mut data, 0);
            }
            data.extend_from_slice(raw);
            for cb in callbacks {
                let cb_va = base + *cb as u64;
                if is64 {
                    put_u64(&mut data, cb_va);
                } else {
                    put_u32(&mut data, cb_va as u32);
                }
            }
            data.extend_from_slice(&vec![0u8; ptr_size as usize]); // terminator
            put_u32(&mut data, 0); // index cell

            for i in 0..4 {
                reloc_rvas.push(data_rva + dir_off + i * ptr_size);
            }
            for i in 0..callbacks.len() as u32 {
                reloc_rvas.push(data_rva + cb_off + i * ptr_size);
            }
            tls_dir = (data_rva + dir_off, dir_size);
            layout.tls_dir_rva = Some(data_rva + dir_off);
            layout.tls_index_rva = Some(data_rva + index_off);
        }

        // Assemble the section list.
        let mut sections: Vec<SectionDef> = Vec::new();
        sections.push(SectionDef {
            name: sec_name(".text"),
            chars: CHARS_TEXT,
            data: self.text.clone(),
        });
        if !rdata.is_empty() {
            sections.push(SectionDef {
                name: sec_name(".rdata"),
                chars: CHARS_RDATA,
                data: rdata,
            });
        }
        if !data.is_empty() {
            sections.push(SectionDef {
                name: sec_name(".data"),
                chars: CHARS_DATA,
                data,
            });
        }
        for s in self.extra_sections {
            sections.push(s);
        }

        // Relocation section built last; rvas must all be below it.
        let reloc_kind = if is64 { RELOC_DIR64 } else { RELOC_HIGHLOW };
        let mut reloc_pairs: Vec<(u32, u8)> = reloc_rvas.iter().map(|&r| (r, reloc_kind)).collect();
        reloc_pairs.sort_unstable();
        reloc_pairs.dedup();
        layout.relocs = reloc_pairs.clone();
        if !reloc_pairs.is_empty() {
            let blob = encode_reloc_table(&reloc_pairs);
            sections.push(SectionDef {
                name: sec_name(".reloc"),
                chars: CHARS_RELOC,
                data: blob,
            });
        }

        // Fix virtual and raw addresses.
        let e_lfanew = 0x40 + self.dos_extra.len() as u32;
        let opt_size: u32 = if is64 { 112 + 16 * 8 } else { 96 + 16 * 8 };
        let headers_size = align_up(e_lfanew + 4 + 20 + opt_size + 40 * sections.len() as u32, FILE_ALIGN);

        let mut va = SECTION_ALIGN;
        let mut raw = headers_size;
        let mut placed: Vec<(u32, u32, u32, u32)> = Vec::new(); // va, vsize, raw_off, raw_size
        for s in &sections {
            let vsize = s.data.len().max(1) as u32;
            let raw_size = align_up(s.data.len() as u32, FILE_ALIGN);
            placed.push((va, vsize, raw, raw_size));
            va += align_up(vsize, SECTION_ALIGN);
            raw += raw_size;
        }
        let size_of_image = va;
        let reloc_idx = sections.iter().position(|s| &s.name[..6] == b".reloc");
        if let Some(i) = reloc_idx {
            layout.reloc_rva = placed[i].0;
        }
        // Directory content above was composed against these rvas.
        for (s, p) in sections.iter().zip(&placed) {
            if &s.name[..6] == b".rdata" {
                assert_eq!(p.0, rdata_rva, "rdata rva drifted");
            }
            if &s.name[..5] == b".data" {
                assert_eq!(p.0, data_rva, "data rva drifted");
            }
        }

        // Emit.
        let mut out = Vec::with_capacity(raw as usize);
        // DOS header
        put_u16(&mut out, DOS_MAGIC);
        out.extend_from_slice(&[0u8; 0x3A]);
        put_u32(&mut out, e_lfanew);
        out.extend_from_slice(&self.dos_extra);
        // NT signature + file header
        put_u32(&mut out, NT_MAGIC);
        put_u16(&mut out, if is64 { 0x8664 } else { 0x014C });
        put_u16(&mut out, sections.len() as u16);
        put_u32(&mut out, 0); // timestamp
        put_u32(&mut out, 0); // symbol table
        put_u32(&mut out, 0); // symbol count
        put_u16(&mut out, opt_size as u16);
        put_u16(&mut out, if is64 { 0x0022 } else { 0x0102 });
        // Optional header
        let entry = self.entry_rva.unwrap_or(text_rva);
        layout.entry_rva = entry;
        let checksum_field_off;
        put_u16(&mut out, if is64 { 0x20B } else { 0x10B });
        out.push(14); // linker major
        out.push(0); // linker minor
        put_u32(&mut out, align_up(self.text.len() as u32, FILE_ALIGN)); // size of code
        let init_size: u32 = placed.iter().skip(1).map(|p| p.3).sum();
        put_u32(&mut out, init_size);
        put_u32(&mut out, 0); // uninitialized
        put_u32(&mut out, entry);
        put_u32(&mut out, text_rva); // base of code
        if is64 {
            put_u64(&mut out, self.image_base);
        } else {
            put_u32(&mut out, rdata_rva); // base of data
            put_u32(&mut out, self.image_base as u32);
        }
        put_u32(&mut out, SECTION_ALIGN);
        put_u32(&mut out, FILE_ALIGN);
        put_u16(&mut out, 6); // os major
        put_u16(&mut out, 0);
        put_u16(&mut out, 0); // image version
        put_u16(&mut out, 0);
        put_u16(&mut out, 6); // subsystem major
        put_u16(&mut out, 0);
        put_u32(&mut out, 0); // win32 version
        put_u32(&mut out, size_of_image);
        put_u32(&mut out, headers_size);
        checksum_field_off = out.len();
        put_u32(&mut out, 0); // checksum, patched below
        put_u16(&mut out, 3); // console subsystem
        put_u16(&mut out, if reloc_pairs.is_empty() { 0x8100 } else { 0x8140 });
        if is64 {
            put_u64(&mut out, 0x10_0000);
            put_u64(&mut out, 0x1000);
            put_u64(&mut out, 0x10_0000);
            put_u64(&mut out, 0x1000);
        } else {
            put_u32(&mut out, 0x10_0000);
            put_u32(&mut out, 0x1000);
            put_u32(&mut out, 0x10_0000);
            put_u32(&mut out, 0x1000);
        }
        put_u32(&mut out, 0); // loader flags
        put_u32(&mut out, 16); // dir count
        let mut dirs = [(0u32, 0u32); 16];
        dirs[0] = export_dir;
        dirs[1] = import_dir;
        if let Some(i) = reloc_idx {
            dirs[5] = (placed[i].0, sections[i].data.len() as u32);
        }
        dirs[9] = tls_dir;
        dirs[12] = iat_dir;
        for (rva, size) in dirs {
            put_u32(&mut out, rva);
            put_u32(&mut out, size);
        }
        // Section table
        for (s, p) in sections.iter().zip(&placed) {
            out.extend_from_slice(&s.name);
            put_u32(&mut out, p.1);
            put_u32(&mut out, p.0);
            put_u32(&mut out, p.3);
            put_u32(&mut out, p.2);
            put_u32(&mut out, 0);
            put_u32(&mut out, 0);
            put_u16(&mut out, 0);
            put_u16(&mut out, 0);
            put_u32(&mut out, s.chars);
        }
        out.resize(headers_size as usize, 0);
        for (s, p) in sections.iter().zip(&placed) {
            assert_eq!(out.len(), p.2 as usize);
            out.extend_from_slice(&s.data);
            out.resize((p.2 + p.3) as usize, 0);
        }
        out.extend_from_slice(&self.overlay);

        if !self.zero_checksum {
            let sum = checksum_reference(&out, checksum_field_off);
            patch_u32(&mut out, checksum_field_off, sum);
        }
        layout.data_rva = data_rva;
        layout.rdata_rva = rdata_rva;
        (out, layout)
    }
}

/// Encode a base-relocation table from sorted (rva, kind) pairs: one block
/// per 4K page, entries are `kind << 12 | page_offset`, blocks padded to an
/// even entry count with ABS entries.
pub fn encode_reloc_table(pairs: &[(u32, u8)]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        let page = pairs[i].0 & !0xFFF;
        let mut entries = Vec::new();
        while i < pairs.len() && pairs[i].0 & !0xFFF == page {
            let (rva, kind) = pairs[i];
            entries.push(((kind as u16) << 12) | (rva & 0xFFF) as u16);
            i += 1;
        }
        if entries.len() % 2 != 0 {
            entries.push(0); // ABS padding
        }
        put_u32(&mut out, page);
        put_u32(&mut out, 8 + 2 * entries.len() as u32);
        for e in entries {
            put_u16(&mut out, e);
        }
    }
    out
}

/// Minimal independent header reader used by the oracles. Panics on
/// malformed inputs; only ever fed known-good fixtures.
pub struct MiniPe {
    pub is64: bool,
    pub image_base: u64,
    pub entry_rva: u32,
    pub size_of_image: u32,
    pub checksum_off: usize,
    pub dirs: Vec<(u32, u32)>,
    pub sections: Vec<MiniSection>,
}

#[derive(Clone, Debug)]
pub struct MiniSection {
    pub name: [u8; 8],
    pub va: u32,
    pub vsize: u32,
    pub raw_off: u32,
    pub raw_size: u32,
    pub chars: u32,
}

fn rd_u16(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes(b[o..o + 2].try_into().unwrap())
}
fn rd_u32(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}
fn rd_u64(b: &[u8], o: usize) -> u64 {
    u64::from_le_bytes(b[o..o + 8].try_into().unwrap())
}

pub fn parse_min(bytes: &[u8]) -> MiniPe {
    assert_eq!(rd_u16(bytes, 0), DOS_MAGIC);
    let pe = rd_u32(bytes, 0x3C) as usize;
    assert_eq!(rd_u32(bytes, pe), NT_MAGIC);
    let nsec = rd_u16(bytes, pe + 6) as usize;
    let opt = pe + 24;
    let magic = rd_u16(bytes, opt);
    let is64 = match magic {
        0x10B => false,
        0x20B => true,
        _ => panic!("bad optional magic {magic:#x}"),
    };
    let image_base = if is64 { rd_u64(bytes, opt + 24) } else { rd_u32(bytes, opt + 28) as u64 };
    let entry_rva = rd_u32(bytes, opt + 16);
    let size_of_image = rd_u32(bytes, opt + 56);
    let checksum_off = opt + 64;
    let ndirs_off = if is64 { opt + 108 } else { opt + 92 };
    let ndirs = rd_u32(bytes, ndirs_off) as usize;
    let mut dirs = Vec::new();
    for i in 0..ndirs {
        dirs.push((rd_u32(bytes, ndirs_off + 4 + i * 8), rd_u32(bytes, ndirs_off + 8 + i * 8)));
    }
    let sec_table = ndirs_off + 4 + ndirs * 8;
    let mut sections = Vec::new();
    for i in 0..nsec {
        let o = sec_table + i * 40;
        sections.push(MiniSection {
            name: bytes[o..o + 8].try_into().unwrap(),
            vsize: rd_u32(bytes, o + 8),
            va: rd_u32(bytes, o + 12),
            raw_size: rd_u32(bytes, o + 16),
            raw_off: rd_u32(bytes, o + 20),
            chars: rd_u32(bytes, o + 36),
        });
    }
    MiniPe { is64, image_base, entry_rva, size_of_image, checksum_off, dirs, sections }
}

impl MiniPe {
    pub fn rva_to_off(&self, rva: u32) -> Option<usize> {
        for s in &self.sections {
            if rva >= s.va && rva < s.va + s.raw_size.max(s.vsize) {
                let delta = rva - s.va;
                if delta < s.raw_size {
                    return Some((s.raw_off + delta) as usize);
                }
                return None;
            }
        }
        None
    }

    pub fn section(&self, name: &str) -> Option<&MiniSection> {
        let n = sec_name(name);
        self.sections.iter().find(|s| s.name == n)
    }
}

/// Walk the relocation directory, returning (rva, kind) pairs (ABS padding
/// entries skipped).
pub fn read_relocs(bytes: &[u8]) -> Vec<(u32, u8)> {
    let pe = parse_min(bytes);
    let (dir_rva, dir_size) = pe.dirs[5];
    let mut out = Vec::new();
    if dir_size == 0 {
        return out;
    }
    let start = pe.rva_to_off(dir_rva).expect("reloc dir in section");
    let blob = &bytes[start..start + dir_size as usize];
    let mut o = 0;
    while o + 8 <= blob.len() {
        let page = rd_u32(blob, o);
        let size = rd_u32(blob, o + 4) as usize;
        if size < 8 {
            break;
        }
        for e in (o + 8..o + size).step_by(2) {
            let v = rd_u16(blob, e);
            let kind = (v >> 12) as u8;
            if kind != RELOC_ABS {
                out.push((page + (v & 0xFFF) as u32, kind));
            }
        }
        o += size;
    }
    out
}

/// Independent rebase oracle: patch every relocated cell for a new load base.
pub fn apply_relocations(bytes: &mut [u8], new_base: u64) {
    let pe = parse_min(bytes);
    let delta = new_base.wrapping_sub(pe.image_base);
    if delta == 0 {
        return;
    }
    for (rva, kind) in read_relocs(bytes) {
        let off = pe.rva_to_off(rva).expect("reloc target mapped");
        match kind {
            RELOC_HIGHLOW => {
                let v = rd_u32(bytes, off).wrapping_add(delta as u32);
                bytes[off..off + 4].copy_from_slice(&v.to_le_bytes());
            }
            RELOC_DIR64 => {
                let v = rd_u64(bytes, off).wrapping_add(delta);
                bytes[off..off + 8].copy_from_slice(&v.to_le_bytes());
            }
            _ => panic!("unsupported reloc kind {kind}"),
        }
    }
}

/// Reference PE checksum: one's-complement fold of all 16-bit words with the
/// checksum field zeroed, plus the file length.
pub fn checksum_reference(bytes: &[u8], checksum_off: usize) -> u32 {
    let mut sum: u64 = 0;
    let mut i = 0;
    while i < bytes.len() {
        if i == checksum_off {
            i += 4;
            continue;
        }
        let lo = bytes[i] as u64;
        let hi = if i + 1 < bytes.len() && i + 1 != checksum_off { bytes[i + 1] as u64 } else { 0 };
        sum += lo | (hi << 8);
        i += 2;
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    sum as u32 + bytes.len() as u32
}

/// Checksum of a whole file, locating the field from the headers.
pub fn checksum_of(bytes: &[u8]) -> u32 {
    let pe = parse_min(bytes);
    checksum_reference(bytes, pe.checksum_off)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_and_reread_32() {
        let (bytes, layout) = PeBuilder::new32().text(&[0xC3]).entry(0).build();
        let pe = parse_min(&bytes);
        assert!(!pe.is64);
        assert_eq!(pe.image_base, 0x40_0000);
        assert_eq!(pe.entry_rva, 0x1000);
        assert_eq!(pe.sections.len(), 1);
        assert_eq!(layout.text_rva, 0x1000);
        assert_eq!(bytes[pe.rva_to_off(0x1000).unwrap()], 0xC3);
        // checksum round: reference value stored in the field
        assert_eq!(rd_u32(&bytes, pe.checksum_off), checksum_of(&bytes));
    }

    #[test]
    fn build_relocs_and_apply() {
        let (mut bytes, _) = PeBuilder::new32()
            .text(&[0xB8, 0x00, 0x30, 0x40, 0x00, 0xC3]) // mov eax, 0x403000; ret
            .reloc(0x1001)
            .build();
        let pairs = read_relocs(&bytes);
        assert_eq!(pairs, vec![(0x1001, RELOC_HIGHLOW)]);
        apply_relocations(&mut bytes, 0x40_0000 + 0x10000);
        let pe = parse_min(&bytes);
        let off = pe.rva_to_off(0x1001).unwrap();
        assert_eq!(rd_u32(&bytes, off), 0x41_3000);
    }

    #[test]
    fn tls_fixture_has_dir_and_relocs() {
        let (bytes, layout) = PeBuilder::new64().text(&[0xC3]).tls(&[1, 2, 3, 4], &[0]).build();
        let pe = parse_min(&bytes);
        assert_ne!(pe.dirs[9].0, 0);
        assert_eq!(pe.dirs[9].0, layout.tls_dir_rva.unwrap());
        // 4 directory cells + 1 callback
        assert_eq!(read_relocs(&bytes).len(), 5);
    }

    #[test]
    fn reloc_block_padded_to_even() {
        let blob = encode_reloc_table(&[(0x1001, 3)]);
        assert_eq!(blob.len(), 12);
        assert_eq!(rd_u32(&blob, 4), 12);
        assert_eq!(rd_u16(&blob, 10), 0); // ABS pad
    }
}
