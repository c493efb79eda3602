//! Basic-block recovery over the decoded text section, jump-table
//! detection, and the JSON interchange format between the analysis and
//! rewrite stages.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::decode::{DecodedInsn, InsnKind, Mode, UndecodableRegion};
use crate::pe::PeImage;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Terminator {
    Jmp,
    Jcc,
    Call,
    Ret,
    FallThrough,
    JumpTable,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasicBlock {
    pub start_rva: u64,
    pub size: u64,
    pub insns: u32,
    pub terminator: Terminator,
    pub function_name: Option<String>,
    /// Offsets into the block of relocation-backed cells.
    pub relocs_inside: Vec<u32>,
}

impl BasicBlock {
    pub fn end_rva(&self) -> u64 {
        self.start_rva + self.size
    }
}

/// Sorted, disjoint blocks plus the jump tables that fed their leaders.
#[derive(Clone, Debug, Default)]
pub struct BlockList {
    pub arch_is64: bool,
    pub image_base: u64,
    pub blocks: Vec<BasicBlock>,
    pub jump_tables: Vec<JumpTable>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JumpTableKind {
    /// Absolute 32-bit virtual addresses, each backed by a relocation.
    Abs32,
    /// 32-bit offsets relative to a rip-lea'd base.
    Rva32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JumpTable {
    pub jmp_rva: u64,
    pub table_rva: u64,
    pub entry_kind: JumpTableKind,
    pub targets: Vec<u64>,
}

/// Named code entry points fed into leader recovery: image entry point,
/// exports, user-supplied symbols.
#[derive(Clone, Debug, Default)]
pub struct EntryPoints {
    pub rvas: Vec<u64>,
    pub names: BTreeMap<u64, String>,
}

impl EntryPoints {
    pub fn from_image(img: &PeImage) -> EntryPoints {
        let mut ep = EntryPoints::default();
        let entry = img.opt.address_of_entry_point as u64;
        if entry != 0 {
            ep.rvas.push(entry);
        }
        for (name, rva) in img.exports() {
            ep.rvas.push(rva as u64);
            ep.names.insert(rva as u64, name);
        }
        ep
    }

    /// Extra symbols in "hex_rva name" line format.
    pub fn add_symbol_lines(&mut self, text: &str) -> Result<(), String> {
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (addr, name) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| format!("line {}: expected 'rva name'", ln + 1))?;
            let addr = addr.trim_start_matches("0x");
            let rva = u64::from_str_radix(addr, 16).map_err(|e| format!("line {}: {e}", ln + 1))?;
            self.rvas.push(rva);
            self.names.insert(rva, name.trim().to_string());
        }
        Ok(())
    }
}

/// Compute block leaders: entry points, direct branch targets, fall-through
/// successors of jcc and call, and jump-table targets — the addresses
/// control flow can actually enter. Bytes after an unconditional jmp/ret
/// that nothing targets are unreachable padding and form no block.
pub fn find_leaders(
    insns: &[DecodedInsn],
    entry_points: &[u64],
    jump_tables: &[JumpTable],
    text_lo: u64,
    text_hi: u64,
) -> BTreeSet<u64> {
    let starts: BTreeSet<u64> = insns.iter().map(|i| i.rva).collect();
    let in_text = |rva: u64| rva >= text_lo && rva < text_hi;
    let mut leaders: BTreeSet<u64> = entry_points.iter().copied().filter(|&r| in_text(r)).collect();
    for insn in insns {
        match insn.kind {
            InsnKind::CallDirect | InsnKind::JmpDirect | InsnKind::Jcc => {
                if let Some(t) = insn.target {
                    if in_text(t) {
                        leaders.insert(t);
                    }
                }
                if insn.kind != InsnKind::JmpDirect {
                    leaders.insert(insn.end_rva());
                }
            }
            InsnKind::CallIndirect => {
                leaders.insert(insn.end_rva());
            }
            _ => {}
        }
    }
    for jt in jump_tables {
        for &t in &jt.targets {
            if in_text(t) {
                leaders.insert(t);
            }
        }
    }
    leaders.retain(|r| starts.contains(r));
    leaders
}

/// Partition sweep output into basic blocks.
///
/// Leaders are entry points, direct branch targets, fall-through successors
/// of jcc/call, instructions after unconditional transfers, and jump-table
/// targets. A block runs from its leader to the first transfer instruction
/// or the next leader. Blocks whose instruction run hits an undecodable
/// gap are dropped.
pub fn extract_basic_blocks(
    insns: &[DecodedInsn],
    regions: &[UndecodableRegion],
    entry_points: &EntryPoints,
    jump_tables: &[JumpTable],
    text_lo: u64,
    text_hi: u64,
    relocs: &[u32],
    arch_is64: bool,
    image_base: u64,
) -> BlockList {
    let leaders = find_leaders(insns, &entry_points.rvas, jump_tables, text_lo, text_hi);
    let table_jmps: BTreeSet<u64> = jump_tables.iter().map(|t| t.jmp_rva).collect();
    let index: BTreeMap<u64, usize> = insns.iter().enumerate().map(|(i, d)| (d.rva, i)).collect();
    let reloc_rvas: Vec<u64> = relocs.iter().map(|&r| r as u64).collect();

    let mut blocks = Vec::new();
    'leader: for &start in &leaders {
        let mut i = index[&start];
        let mut insn_count = 0u32;
        let term;
        loop {
            let d = &insns[i];
            insn_count += 1;
            if d.kind.is_transfer() {
                term = match d.kind {
                    InsnKind::Jcc => Terminator::Jcc,
                    InsnKind::CallDirect | InsnKind::CallIndirect => Terminator::Call,
                    InsnKind::Ret => Terminator::Ret,
                    InsnKind::JmpIndirectReg | InsnKind::JmpIndirectMem => {
                        if table_jmps.contains(&d.rva) {
                            Terminator::JumpTable
                        } else {
                            Terminator::Jmp
                        }
                    }
                    _ => Terminator::Jmp,
                };
                break;
            }
            let next = d.end_rva();
            if leaders.contains(&next) {
                term = Terminator::FallThrough;
                break;
            }
            match index.get(&next) {
                Some(&n) if n == i + 1 => i = n,
                // ran into an undecodable gap or the end of the section
                _ => continue 'leader,
            }
        }
        let end = insns[i].end_rva();
        let size = end - start;
        if regions.iter().any(|r| r.start < end && r.start + r.len > start) {
            continue;
        }
        let lo = reloc_rvas.partition_point(|&r| r < start);
        let relocs_inside: Vec<u32> = reloc_rvas[lo..]
            .iter()
            .take_while(|&&r| r < end)
            .map(|&r| (r - start) as u32)
            .collect();
        blocks.push(BasicBlock {
            start_rva: start,
            size,
            insns: insn_count,
            terminator: term,
            function_name: None,
            relocs_inside,
        });
    }

    // Name blocks by the nearest preceding named entry point.
    if !entry_points.names.is_empty() {
        for b in &mut blocks {
            if let Some((_, name)) = entry_points.names.range(..=b.start_rva).next_back() {
                b.function_name = Some(name.clone());
            }
        }
    }

    BlockList {
        arch_is64,
        image_base,
        blocks,
        jump_tables: jump_tables.to_vec(),
    }
}

/// Maximum entries read from one jump table before assuming a runaway scan.
const MAX_TABLE_ENTRIES: usize = 4096;
/// How many instructions before an indirect jmp the 64-bit pattern matcher
/// will look at.
const SCAN_WINDOW: usize = 16;

/// Jump-table discovery.
///
/// 32-bit images: `jmp [reg*4 + disp32]` where the displacement is a
/// readable VA; entries are absolute text addresses, each backed by a
/// relocation. 64-bit images: a backward scan from `jmp reg` for
/// `lea base, [rip+disp]`, a 32-bit table load indexed off `base`, and an
/// `add` folding the base back in; entries are offsets from the lea target.
pub fn detect_jump_tables(insns: &[DecodedInsn], img: &PeImage, mode: Mode) -> Vec<JumpTable> {
    let mut out = Vec::new();
    let text = match img.text_section() {
        Some(s) => s,
        None => return out,
    };
    let text_lo = text.virtual_address as u64;
    let text_hi = text.virtual_end() as u64;
    let base = img.opt.image_base;

    for (i, insn) in insns.iter().enumerate() {
        match (mode, insn.kind) {
            (Mode::Bits32, InsnKind::JmpIndirectMem) => {
                let Some(mem) = insn.mem else { continue };
                if mem.base.is_some() || mem.index.is_none() || mem.scale != 4 {
                    continue;
                }
                let table_va = mem.disp as u64;
                if table_va < base {
                    continue;
                }
                let table_rva = table_va - base;
                if !img
                    .section_containing(table_rva)
                    .map(|s| s.is_readable())
                    .unwrap_or(false)
                {
                    continue;
                }
                let relocs = img.relocations();
                let mut targets = Vec::new();
                for n in 0..MAX_TABLE_ENTRIES {
                    let slot = table_rva + 4 * n as u64;
                    let backed = relocs.map(|t| t.contains(slot as u32)).unwrap_or(false);
                    if !backed {
                        break;
                    }
                    let Ok(entry) = img.read_u32_rva(slot) else { break };
                    let entry_rva = (entry as u64).wrapping_sub(base);
                    if entry_rva < text_lo || entry_rva >= text_hi {
                        break;
                    }
                    targets.push(entry_rva);
                }
                if targets.len() >= 2 {
                    out.push(JumpTable {
                        jmp_rva: insn.rva,
                        table_rva,
                        entry_kind: JumpTableKind::Abs32,
                        targets,
                    });
                }
            }
            (Mode::Bits64, InsnKind::JmpIndirectReg) => {
                let jreg = insn.modrm_rm;
                let lo = i.saturating_sub(SCAN_WINDOW);
                let window = &insns[lo..i];
                // add jreg, base_reg
                let mut found = None;
                for w in window.iter().rev() {
                    if let (crate::decode::Opcode::One(0x01 | 0x03), Some(3)) =
                        (w.opcode, w.modrm.map(|m| m >> 6))
                    {
                        let (dst, src) = match w.opcode {
                            crate::decode::Opcode::One(0x01) => (w.modrm_rm, w.modrm_reg),
                            _ => (w.modrm_reg, w.modrm_rm),
                        };
                        if dst == jreg {
                            found = Some((w.rva, src));
                            break;
                        }
                    }
                }
                let Some((add_rva, base_reg)) = found else { continue };
                // 32-bit table load into jreg indexed off base_reg
                let mut load = None;
                for w in window.iter().rev() {
                    if w.rva >= add_rva {
                        continue;
                    }
                    let is_load = matches!(w.opcode, crate::decode::Opcode::One(0x63))
                        || (matches!(w.opcode, crate::decode::Opcode::One(0x8B)) && w.rex & 8 == 0);
                    if !is_load {
                        continue;
                    }
                    let Some(mem) = w.mem else { continue };
                    if w.modrm_reg == jreg
                        && mem.base == Some(base_reg)
                        && mem.index.is_some()
                        && mem.scale == 4
                    {
                        load = Some((w.rva, mem.disp));
                        break;
                    }
                }
                let Some((load_rva, load_disp)) = load else { continue };
                // lea base_reg, [rip + disp]
                let mut lea_target = None;
                for w in window.iter().rev() {
                    if w.rva >= load_rva {
                        continue;
                    }
                    if matches!(w.opcode, crate::decode::Opcode::One(0x8D)) && w.modrm_reg == base_reg {
                        if let Some(mem) = w.mem {
                            if mem.rip_relative {
                                lea_target = Some((w.end_rva() as i64 + mem.disp) as u64);
                                break;
                            }
                        }
                    }
                }
                let Some(lea_rva) = lea_target else { continue };
                let table_rva = (lea_rva as i64 + load_disp) as u64;
                let mut targets = Vec::new();
                for n in 0..MAX_TABLE_ENTRIES {
                    let Ok(entry) = img.read_u32_rva(table_rva + 4 * n as u64) else { break };
                    let target = (lea_rva as i64 + entry as i32 as i64) as u64;
                    if target < text_lo || target >= text_hi {
                        break;
                    }
                    targets.push(target);
                }
                if targets.len() >= 2 {
                    out.push(JumpTable {
                        jmp_rva: insn.rva,
                        table_rva,
                        entry_kind: JumpTableKind::Rva32,
                        targets,
                    });
                }
            }
            _ => {}
        }
    }
    out
}

// ---- interchange format ----

#[derive(Serialize, Deserialize)]
struct BlockListFile {
    version: u32,
    arch: String,
    image_base: u64,
    blocks: Vec<BlockEntry>,
    jump_tables: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    start: u64,
    size: u64,
    insns: u32,
    term: Terminator,
    func: Option<String>,
    relocs: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    jmp: u64,
    table: u64,
    kind: JumpTableKind,
    targets: Vec<u64>,
}

pub fn block_list_to_json(list: &BlockList) -> Vec<u8> {
    let file = BlockListFile {
        version: 1,
        arch: if list.arch_is64 { "pe64".into() } else { "pe32".into() },
        image_base: list.image_base,
        blocks: list
            .blocks
            .iter()
            .map(|b| BlockEntry {
                start: b.start_rva,
                size: b.size,
                insns: b.insns,
                term: b.terminator,
                func: b.function_name.clone(),
                relocs: b.relocs_inside.clone(),
            })
            .collect(),
        jump_tables: list
            .jump_tables
            .iter()
            .map(|t| TableEntry {
                jmp: t.jmp_rva,
                table: t.table_rva,
                kind: t.entry_kind,
                targets: t.targets.clone(),
            })
            .collect(),
    };
    let mut v = serde_json::to_vec(&file).expect("block list serializes");
    v.push(b'\n');
    v
}

pub fn block_list_from_json(bytes: &[u8]) -> Result<BlockList, String> {
    let file: BlockListFile = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
    if file.version != 1 {
        return Err(format!("unsupported block-list version {}", file.version));
    }
    let arch_is64 = match file.arch.as_str() {
        "pe32" => false,
        "pe64" => true,
        other => return Err(format!("unknown arch '{other}'")),
    };
    Ok(BlockList {
        arch_is64,
        image_base: file.image_base,
        blocks: file
            .blocks
            .into_iter()
            .map(|b| BasicBlock {
                start_rva: b.start,
                size: b.size,
                insns: b.insns,
                terminator: b.term,
                function_name: b.func,
                relocs_inside: b.relocs,
            })
            .collect(),
        jump_tables: file
            .jump_tables
            .into_iter()
            .map(|t| JumpTable {
                jmp_rva: t.jmp,
                table_rva: t.table,
                entry_kind: t.kind,
                targets: t.targets,
            })
            .collect(),
    })
}

/// Convenience: sweep the text section of an image and extract everything.
pub fn analyze_image(img: &PeImage, extra: &EntryPoints) -> Result<BlockList, crate::pe::PeError> {
    let mode = if img.arch.is64() { Mode::Bits64 } else { Mode::Bits32 };
    let text = img.text_section().ok_or(crate::pe::PeError::BadRva(0))?;
    let text_lo = text.virtual_address as u64;
    let code_len = (text.virtual_size.min(text.raw_size)) as usize;
    let (insns, regions) = crate::decode::sweep(&text.data[..code_len], text_lo, mode);
    let tables = detect_jump_tables(&insns, img, mode);
    let mut entries = EntryPoints::from_image(img);
    entries.rvas.extend_from_slice(&extra.rvas);
    for (rva, name) in &extra.names {
        entries.names.insert(*rva, name.clone());
    }
    let relocs: Vec<u32> = img
        .relocations()
        .map(|t| t.entries.iter().map(|e| e.rva).collect())
        .unwrap_or_default();
    Ok(extract_basic_blocks(
        &insns,
        &regions,
        &entries,
        &tables,
        text_lo,
        text_lo + code_len as u64,
        &relocs,
        img.arch.is64(),
        img.opt.image_base,
    ))
}
