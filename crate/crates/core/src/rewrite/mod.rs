//! Rewriting: materialize an instrumentation plan into a new PE.
//!
//! Jump mode patches each selected block head with a 5-byte jump to an
//! out-of-line trampoline (stub + displaced instructions + jump back) in
//! `.spot0`. Inline mode clones the text section into `.spot0` with stubs
//! inserted ahead of selected block heads. Either way the feedback state
//! lives in `.spot1`, multi-thread builds register a TLS slot through
//! `.spot2`, and the base-relocation table is rebuilt (cleaning entries
//! under patch sites, adding entries for moved/emitted absolute cells).

mod inline;
pub mod patch;
pub mod stub;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cfg::{self, EntryPoints};
use crate::decode::{sweep, DecodedInsn, Mode};
use crate::pe::{
    PeError, PeImage, RelocEntry, RelocKind, RelocationTable, DIR_BASERELOC, DIR_SECURITY, DIR_TLS,
    SCN_CNT_CODE, SCN_CNT_INITIALIZED_DATA, SCN_MEM_EXECUTE, SCN_MEM_READ, SCN_MEM_WRITE,
};
use crate::select::{InstrumentationPlan, ThreadMode};
use patch::{encode_patch, plan_patch_site, reencode_at};
use stub::StubCtx;

pub const TRAMPOLINE_SECTION: &str = ".spot0";
pub const FEEDBACK_SECTION: &str = ".spot1";
pub const TLS_SECTION: &str = ".spot2";

pub const FEEDBACK_MAGIC: &[u8; 8] = b"SPOTFB\0\0";
pub const FEEDBACK_VERSION: u32 = 1;
/// Feedback section layout (offsets in bytes).
pub const FB_OFF_VERSION: usize = 8;
pub const FB_OFF_MAP_SIZE: usize = 12;
pub const FB_OFF_EXTRA_SIZE: usize = 16;
pub const FB_OFF_FLAGS: usize = 20;
pub const FB_OFF_PREV: usize = 24;
pub const FB_OFF_BITMAP: usize = 64;
pub const FB_FLAG_MULTI_THREAD: u32 = 1;
pub const FB_FLAG_LINEAR: u32 = 2;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstrumentMode {
    Jump,
    Inline,
}

/// Outcome accounting for one instrumentation run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RewriteReport {
    pub instrumented: u32,
    pub skipped_too_small: u32,
    pub expanded_with_neighbor: u32,
    pub relocs_deleted: u32,
    pub relocs_added: u32,
    pub new_sections: Vec<(String, u64, u64)>,
}

#[derive(Debug, thiserror::Error)]
pub enum RewriteError {
    #[error(transparent)]
    Pe(#[from] PeError),
    #[error("image has no executable section")]
    NoText,
    #[error("TLS directory conflict: {0}")]
    TlsDirectoryConflict(String),
    #[error("unsupported construct: {0}")]
    Unsupported(&'static str),
}

/// Header block of the feedback section.
pub fn feedback_header(map_size: u32, extra_size: u32, flags: u32) -> [u8; FB_OFF_BITMAP] {
    let mut h = [0u8; FB_OFF_BITMAP];
    h[..8].copy_from_slice(FEEDBACK_MAGIC);
    h[FB_OFF_VERSION..FB_OFF_VERSION + 4].copy_from_slice(&FEEDBACK_VERSION.to_le_bytes());
    h[FB_OFF_MAP_SIZE..FB_OFF_MAP_SIZE + 4].copy_from_slice(&map_size.to_le_bytes());
    h[FB_OFF_EXTRA_SIZE..FB_OFF_EXTRA_SIZE + 4].copy_from_slice(&extra_size.to_le_bytes());
    h[FB_OFF_FLAGS..FB_OFF_FLAGS + 4].copy_from_slice(&flags.to_le_bytes());
    h
}

/// Rebuilt TLS metadata destined for `.spot2`.
struct TlsPlan {
    content: Vec<u8>,
    /// rva of the index cell the stub reads (may live in the original image
    /// when merging an existing directory).
    index_rva: u64,
    /// Offset of the per-thread previous-location slot inside the block.
    slot_off: u32,
    /// Offsets in `content` of cells that need base relocations.
    reloc_offs: Vec<u32>,
    dir_size: u32,
}

fn plan_tls(img: &PeImage, spot2_rva: u64) -> Result<TlsPlan, RewriteError> {
    let is64 = img.arch.is64();
    let ptr = img.arch.pointer_size() as usize;
    let base = img.opt.image_base;
    let dir_size = if is64 { 40u32 } else { 24 };

    let mut orig_raw = Vec::new();
    let mut orig_callbacks: Vec<u64> = Vec::new();
    let mut orig_index_va = 0u64;
    let mut characteristics = 0u32;
    if let Some(d) = img.dir(DIR_TLS) {
        if d.rva != 0 {
            let rd = |off: u64, w: usize| -> Result<u64, PeError> {
                Ok(match w {
                    8 => img.read_u64_rva(d.rva as u64 + off)?,
                    _ => img.read_u32_rva(d.rva as u64 + off)? as u64,
                })
            };
            let conflicted = |e: PeError| RewriteError::TlsDirectoryConflict(e.to_string());
            let (start, end, index, cbs, zfill, chars) = if is64 {
                (
                    rd(0, 8).map_err(conflicted)?,
                    rd(8, 8).map_err(conflicted)?,
                    rd(16, 8).map_err(conflicted)?,
                    rd(24, 8).map_err(conflicted)?,
                    rd(32, 4).map_err(conflicted)?,
                    rd(36, 4).map_err(conflicted)?,
                )
            } else {
                (
                    rd(0, 4).map_err(conflicted)?,
                    rd(4, 4).map_err(conflicted)?,
                    rd(8, 4).map_err(conflicted)?,
                    rd(12, 4).map_err(conflicted)?,
                    rd(16, 4).map_err(conflicted)?,
                    rd(20, 4).map_err(conflicted)?,
                )
            };
            if end < start {
                return Err(RewriteError::TlsDirectoryConflict("backwards raw range".into()));
            }
            if start != 0 && end > start {
                orig_raw = img
                    .read_rva(start - base, (end - start) as usize)
                    .map_err(conflicted)?
                    .to_vec();
            }
            // fold declared zero-fill into explicit template bytes
            orig_raw.extend(std::iter::repeat(0u8).take(zfill as usize));
            characteristics = chars as u32;
            orig_index_va = index;
            if cbs != 0 {
                let mut i = 0u64;
                loop {
                    let v = if is64 {
                        img.read_u64_rva(cbs - base + i * 8).map_err(conflicted)?
                    } else {
                        img.read_u32_rva(cbs - base + i * 4).map_err(conflicted)? as u64
                    };
                    if v == 0 {
                        break;
                    }
                    orig_callbacks.push(v);
                    i += 1;
                }
            }
        }
    }

    let align8 = |v: usize| (v + 7) & !7;
    let index_off = dir_size as usize;
    let cb_off = align8(index_off + 4);
    let raw_off = align8(cb_off + ptr * (orig_callbacks.len() + 1));
    let slot_off = align8(orig_raw.len());
    let template_len = slot_off + ptr;
    let total = raw_off + template_len;

    let mut content = vec![0u8; total];
    let mut w = |c: &mut Vec<u8>, off: usize, v: u64, wid: usize| {
        c[off..off + wid].copy_from_slice(&v.to_le_bytes()[..wid]);
    };
    let start_va = base + spot2_rva + raw_off as u64;
    let index_va =
        if orig_index_va != 0 { orig_index_va } else { base + spot2_rva + index_off as u64 };
    let cb_va = base + spot2_rva + cb_off as u64;
    w(&mut content, 0, start_va, ptr);
    w(&mut content, ptr, start_va + template_len as u64, ptr);
    w(&mut content, 2 * ptr, index_va, ptr);
    w(&mut content, 3 * ptr, cb_va, ptr);
    w(&mut content, 4 * ptr, 0, 4);
    w(&mut content, 4 * ptr + 4, characteristics as u64, 4);
    for (i, cb) in orig_callbacks.iter().enumerate() {
        w(&mut content, cb_off + i * ptr, *cb, ptr);
    }
    content[raw_off..raw_off + orig_raw.len()].copy_from_slice(&orig_raw);

    let mut reloc_offs: Vec<u32> = (0..4u32).map(|i| i * ptr as u32).collect();
    for i in 0..orig_callbacks.len() {
        reloc_offs.push((cb_off + i * ptr) as u32);
    }

    Ok(TlsPlan {
        content,
        index_rva: index_va - base,
        slot_off: slot_off as u32,
        reloc_offs,
        dir_size,
    })
}

/// Relocation-table rebuild: drop entries inside cleaned ranges, append new
/// ones, re-encode.
struct RelocRebuild {
    entries: Vec<RelocEntry>,
    deleted: u32,
    added: u32,
    blob: Vec<u8>,
}

fn rebuild_relocs(img: &PeImage, cleaned: &[(u64, u64)], added: &[u64], kind: RelocKind) -> RelocRebuild {
    let mut entries: Vec<RelocEntry> =
        img.relocations().map(|t| t.entries.clone()).unwrap_or_default();
    let before = entries.len();
    entries.retain(|e| !cleaned.iter().any(|&(lo, hi)| (e.rva as u64) >= lo && (e.rva as u64) < hi));
    let deleted = (before - entries.len()) as u32;
    for &rva in added {
        entries.push(RelocEntry { rva: rva as u32, kind });
    }
    entries.sort_unstable();
    entries.dedup();
    let table = RelocationTable { entries };
    let blob = table.encode();
    RelocRebuild { entries: table.entries, deleted, added: added.len() as u32, blob }
}

fn align_up64(v: u64, a: u64) -> u64 {
    (v + a - 1) & !(a - 1)
}

/// Decoded view of the text section shared by both rewrite modes.
pub(crate) struct ImageView {
    pub mode: Mode,
    pub text_index: usize,
    pub text_rva: u64,
    pub code_len: usize,
    pub insns: Vec<DecodedInsn>,
    pub insn_index: BTreeMap<u64, DecodedInsn>,
    pub leaders: BTreeSet<u64>,
    pub tables: Vec<cfg::JumpTable>,
}

pub(crate) fn view_of(img: &PeImage, plan: &InstrumentationPlan) -> Result<ImageView, RewriteError> {
    let mode = if img.arch.is64() { Mode::Bits64 } else { Mode::Bits32 };
    let text_index = img
        .sections
        .iter()
        .position(|s| s.is_executable())
        .ok_or(RewriteError::NoText)?;
    let text = &img.sections[text_index];
    let text_rva = text.virtual_address as u64;
    let code_len = text.virtual_size.min(text.raw_size) as usize;
    let (insns, _regions) = sweep(&text.data[..code_len], text_rva, mode);
    let insn_index: BTreeMap<u64, DecodedInsn> = insns.iter().map(|i| (i.rva, i.clone())).collect();
    let tables = cfg::detect_jump_tables(&insns, img, mode);
    let mut entries = EntryPoints::from_image(img).rvas;
    entries.extend(plan.points.iter().map(|p| p.block.start_rva));
    let leaders =
        cfg::find_leaders(&insns, &entries, &tables, text_rva, text_rva + code_len as u64);
    Ok(ImageView { mode, text_index, text_rva, code_len, insns, insn_index, leaders, tables })
}

/// Original encoded bytes of a decoded instruction.
pub(crate) fn insn_bytes(img: &PeImage, view: &ImageView, insn: &DecodedInsn) -> Vec<u8> {
    let text = &img.sections[view.text_index];
    let off = (insn.rva - view.text_rva) as usize;
    text.data[off..off + insn.length as usize].to_vec()
}

pub(crate) fn finish_image(out: &mut PeImage, report: &mut RewriteReport) {
    report.new_sections = out
        .sections
        .iter()
        .filter(|s| s.name_str().starts_with(".spot"))
        .map(|s| (s.name_str(), s.virtual_address as u64, s.virtual_size as u64))
        .collect();
    // instrumentation invalidates signatures; drop the certificate directory
    out.set_dir(DIR_SECURITY, 0, 0);
    out.update_checksum();
}

/// Instrument an image according to the plan; the input is not modified.
pub fn instrument(
    img: &PeImage,
    plan: &InstrumentationPlan,
) -> Result<(PeImage, RewriteReport), RewriteError> {
    if plan.mode == InstrumentMode::Inline {
        return inline::instrument_inline(img, plan);
    }
    let view = view_of(img, plan)?;
    let is64 = img.arch.is64();
    let mut out = img.clone();
    let mut report = RewriteReport::default();

    let map_size = 1u32 << plan.map_size_log2;
    let extra_size =
        if plan.linear_coverage { (plan.points.len() as u32).div_ceil(8) } else { 0 };
    let multi = plan.thread_mode == ThreadMode::Multi;

    // ---- phase A: plan every trampoline ----
    struct Tramp {
        point_index: usize,
        site: patch::PatchSite,
        off: u64,
        len: u64,
    }
    let sizing_ctx = StubCtx {
        is64,
        thread_mode: plan.thread_mode,
        linear: plan.linear_coverage,
        image_base: img.opt.image_base,
        prev_cell_rva: 0,
        bitmap_rva: 0,
        linear_rva: 0,
        tls_index_rva: 0,
        tls_slot_off: 0,
    };
    let stub_len = sizing_ctx.stub_len() as u64;
    let sect_align = img.opt.section_alignment as u64;
    let last_vend = img.sections.last().map(|s| s.virtual_end() as u64).unwrap_or(sect_align);
    let spot0_rva = align_up64(last_vend, sect_align);

    let mut tramps: Vec<Tramp> = Vec::new();
    let mut cursor = 0u64;
    let mut covered_until = 0u64;
    for (i, point) in plan.points.iter().enumerate() {
        if point.block.start_rva < covered_until {
            // head swallowed by a previous site's neighbor expansion
            report.skipped_too_small += 1;
            continue;
        }
        let site = match plan_patch_site(&point.block, &view.insn_index, &view.leaders) {
            Ok(s) => s,
            Err(_) => {
                report.skipped_too_small += 1;
                continue;
            }
        };
        let mut displaced_len = 0u64;
        let mut ok = true;
        for insn in &site.displaced {
            let src = insn_bytes(img, &view, insn);
            match reencode_at(insn, &src, spot0_rva + cursor + stub_len + displaced_len, |t| t) {
                Ok(r) => displaced_len += r.bytes.len() as u64,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            report.skipped_too_small += 1;
            continue;
        }
        if site.expanded {
            report.expanded_with_neighbor += 1;
        }
        covered_until = point.block.start_rva + site.site_size;
        let off = cursor;
        let len = stub_len + displaced_len + 5;
        cursor = align_up64(off + len, 16);
        tramps.push(Tramp { point_index: i, site, off, len });
    }
    report.instrumented = tramps.len() as u32;

    // ---- section layout ----
    let spot0_size = cursor.max(16);
    let spot1_rva = align_up64(spot0_rva + spot0_size, sect_align);
    let feedback_len = FB_OFF_BITMAP as u64 + map_size as u64 + extra_size as u64;
    let spot2_rva = align_up64(spot1_rva + feedback_len, sect_align);
    let tls = if multi { Some(plan_tls(img, spot2_rva)?) } else { None };

    let ctx = StubCtx {
        prev_cell_rva: spot1_rva + FB_OFF_PREV as u64,
        bitmap_rva: spot1_rva + FB_OFF_BITMAP as u64,
        linear_rva: spot1_rva + FB_OFF_BITMAP as u64 + map_size as u64,
        tls_index_rva: tls.as_ref().map(|t| t.index_rva).unwrap_or(0),
        tls_slot_off: tls.as_ref().map(|t| t.slot_off).unwrap_or(0),
        ..sizing_ctx
    };

    // ---- relocation accounting ----
    let reloc_kind = if is64 { RelocKind::Dir64 } else { RelocKind::HighLow };
    let mut cleaned: Vec<(u64, u64)> = Vec::new();
    let mut added: Vec<u64> = Vec::new();
    let old_relocs = img.relocations().cloned().unwrap_or_default();
    for t in &tramps {
        let head = plan.points[t.point_index].block.start_rva;
        cleaned.push((head, head + t.site.site_size));
        let stub_rva = spot0_rva + t.off;
        let code = ctx.emit(plan.points[t.point_index].id, t.point_index, stub_rva);
        for o in &code.reloc_offsets {
            added.push(stub_rva + *o as u64);
        }
        let mut new_rva = stub_rva + stub_len;
        for insn in &t.site.displaced {
            let src = insn_bytes(img, &view, insn);
            let re = reencode_at(insn, &src, new_rva, |t| t).expect("validated in phase A");
            for e in old_relocs.entries_in(insn.rva, insn.end_rva()) {
                added.push(new_rva + (e.rva as u64 - insn.rva));
            }
            new_rva += re.bytes.len() as u64;
        }
    }
    if let Some(t) = &tls {
        for o in &t.reloc_offs {
            added.push(spot2_rva + *o as u64);
        }
    }
    let any_cleaned = old_relocs
        .entries
        .iter()
        .any(|e| cleaned.iter().any(|&(lo, hi)| (e.rva as u64) >= lo && (e.rva as u64) < hi));
    let rebuild = if !added.is_empty() || any_cleaned {
        Some(rebuild_relocs(img, &cleaned, &added, reloc_kind))
    } else {
        None
    };

    // the rebuilt table goes at the tail of the last new section
    let blob_len = rebuild.as_ref().map(|r| r.blob.len() as u64).unwrap_or(0);
    let (spot1_size, spot2_size) = if multi {
        let c = tls.as_ref().map(|t| t.content.len() as u64).unwrap_or(0);
        (feedback_len, align_up64(c, 8) + blob_len)
    } else {
        (align_up64(feedback_len, 8) + blob_len, 0)
    };

    // ---- phase B: write everything ----
    let sec0 = out.add_section(
        TRAMPOLINE_SECTION,
        spot0_size as u32,
        SCN_MEM_READ | SCN_MEM_EXECUTE | SCN_CNT_CODE,
    )?;
    debug_assert_eq!(sec0.virtual_address as u64, spot0_rva);
    for t in &tramps {
        let point = &plan.points[t.point_index];
        let stub_rva = spot0_rva + t.off;
        let mut blob = ctx.emit(point.id, t.point_index, stub_rva).bytes;
        let mut new_rva = stub_rva + stub_len;
        for insn in &t.site.displaced {
            let src = insn_bytes(img, &view, insn);
            let re = reencode_at(insn, &src, new_rva, |t| t).expect("validated in phase A");
            new_rva += re.bytes.len() as u64;
            blob.extend_from_slice(&re.bytes);
        }
        let resume = point.block.start_rva + t.site.site_size;
        blob.push(0xE9);
        let rel = resume as i64 - (new_rva as i64 + 5);
        blob.extend_from_slice(&i32::try_from(rel).expect("back-jump reach").to_le_bytes());
        debug_assert_eq!(blob.len() as u64, t.len);
        out.write_rva(stub_rva, &blob)?;
    }

    for t in &tramps {
        let head = plan.points[t.point_index].block.start_rva;
        let bytes = encode_patch(head, t.site.site_size, spot0_rva + t.off);
        out.write_rva(head, &bytes)?;
    }

    let fb_flags = if multi { FB_FLAG_MULTI_THREAD } else { 0 }
        | if plan.linear_coverage { FB_FLAG_LINEAR } else { 0 };
    out.add_section(
        FEEDBACK_SECTION,
        spot1_size.max(1) as u32,
        SCN_MEM_READ | SCN_MEM_WRITE | SCN_CNT_INITIALIZED_DATA,
    )?;
    out.write_rva(spot1_rva, &feedback_header(map_size, extra_size, fb_flags))?;

    if let Some(t) = &tls {
        out.add_section(
            TLS_SECTION,
            spot2_size.max(1) as u32,
            SCN_MEM_READ | SCN_MEM_WRITE | SCN_CNT_INITIALIZED_DATA,
        )?;
        out.write_rva(spot2_rva, &t.content)?;
        out.set_dir(DIR_TLS, spot2_rva as u32, t.dir_size);
    }

    if let Some(r) = &rebuild {
        let home_rva = if multi {
            let c = tls.as_ref().map(|t| t.content.len() as u64).unwrap_or(0);
            spot2_rva + align_up64(c, 8)
        } else {
            spot1_rva + align_up64(feedback_len, 8)
        };
        out.write_rva(home_rva, &r.blob)?;
        out.set_dir(DIR_BASERELOC, home_rva as u32, r.blob.len() as u32);
        out.set_relocations(Some(RelocationTable { entries: r.entries.clone() }));
        report.relocs_deleted = r.deleted;
        report.relocs_added = r.added;
    }

    finish_image(&mut out, &mut report);
    Ok((out, report))
}

#[cfg(test)]
mod tests;
