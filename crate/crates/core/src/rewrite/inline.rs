//! Inline instrumentation: clone the text section into `.spot0` with
//! coverage stubs inserted ahead of selected block heads, rewrite all
//! intra-section direct branches into the clone (rel8 promoted to rel32 as
//! needed by a fixpoint over the layout), re-displace rip-relative
//! operands, then steer execution into the clone by redirecting the entry
//! point, export addresses, relocation-backed code pointers, and
//! offset-table jump entries. The original section stays mapped so data
//! reads through it keep working.

use std::collections::BTreeMap;

use super::stub::StubCtx;
use super::{
    align_up64, feedback_header, finish_image, insn_bytes, plan_tls, rebuild_relocs, view_of,
    RewriteError, RewriteReport, FB_FLAG_LINEAR, FB_FLAG_MULTI_THREAD, FB_OFF_BITMAP, FB_OFF_PREV,
    FEEDBACK_SECTION, TLS_SECTION, TRAMPOLINE_SECTION,
};
use crate::cfg::JumpTableKind;
use crate::decode::{DecodedInsn, InsnKind, Opcode};
use crate::pe::{
    PeImage, RelocKind, RelocationTable, DIR_BASERELOC, DIR_EXPORT, DIR_TLS, SCN_CNT_CODE,
    SCN_CNT_INITIALIZED_DATA, SCN_MEM_EXECUTE, SCN_MEM_READ, SCN_MEM_WRITE,
};
use crate::select::{InstrumentationPlan, ThreadMode};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Enc {
    Verbatim,
    /// rel8 branch promoted to its rel32 form.
    Rel32,
    /// loop/jcxz split into a local skip plus a rel32 jump.
    Islet,
}

enum Item {
    Insn { index: usize, enc: Enc },
    /// Undecodable bytes copied verbatim (data-in-text, padding).
    Gap { rva: u64, len: u64 },
}

pub(super) fn instrument_inline(
    img: &PeImage,
    plan: &InstrumentationPlan,
) -> Result<(PeImage, RewriteReport), RewriteError> {
    let view = view_of(img, plan)?;
    let is64 = img.arch.is64();
    let mut out = img.clone();
    let mut report = RewriteReport::default();
    let multi = plan.thread_mode == ThreadMode::Multi;
    let map_size = 1u32 << plan.map_size_log2;
    let extra_size =
        if plan.linear_coverage { (plan.points.len() as u32).div_ceil(8) } else { 0 };

    // stubbed heads -> plan point index
    let mut stubbed: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, p) in plan.points.iter().enumerate() {
        if view.insn_index.contains_key(&p.block.start_rva) {
            stubbed.entry(p.block.start_rva).or_insert(i);
        } else {
            report.skipped_too_small += 1;
        }
    }
    report.instrumented = stubbed.len() as u32;

    // ---- clone item list in address order ----
    let mut items = Vec::new();
    let mut cursor = view.text_rva;
    for (i, insn) in view.insns.iter().enumerate() {
        if insn.rva > cursor {
            items.push(Item::Gap { rva: cursor, len: insn.rva - cursor });
        }
        items.push(Item::Insn { index: i, enc: Enc::Verbatim });
        cursor = insn.end_rva();
    }
    let text_end = view.text_rva + view.code_len as u64;
    if cursor < text_end {
        items.push(Item::Gap { rva: cursor, len: text_end - cursor });
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

    let enc_len = |insn: &DecodedInsn, enc: Enc| -> u64 {
        match enc {
            Enc::Verbatim => insn.length as u64,
            Enc::Rel32 => match insn.opcode {
                Opcode::One(0xEB) => 5,
                _ => 6, // 7x -> 0F 8x rel32
            },
            Enc::Islet => insn.length as u64 + 7,
        }
    };

    // ---- layout fixpoint: promote rel8 branches that fall out of range ----
    // offsets are relative to the clone base; stubs precede their heads
    let mut insn_off: BTreeMap<u64, u64> = BTreeMap::new();
    let mut entry_off: BTreeMap<u64, u64> = BTreeMap::new(); // where branches enter (stub if present)
    loop {
        insn_off.clear();
        entry_off.clear();
        let mut off = 0u64;
        for item in &items {
            match item {
                Item::Insn { index, enc } => {
                    let insn = &view.insns[*index];
                    if stubbed.contains_key(&insn.rva) {
                        entry_off.insert(insn.rva, off);
                        off += stub_len;
                    } else {
                        entry_off.insert(insn.rva, off);
                    }
                    insn_off.insert(insn.rva, off);
                    off += enc_len(insn, *enc);
                }
                Item::Gap { len, .. } => {
                    off += len;
                }
            }
        }
        let mut changed = false;
        for item in &mut items {
            let Item::Insn { index, enc } = item else { continue };
            if *enc != Enc::Verbatim {
                continue;
            }
            let insn = &view.insns[*index];
            if insn.imm_len != 1
                || !matches!(insn.kind, InsnKind::JmpDirect | InsnKind::Jcc | InsnKind::CallDirect)
            {
                continue;
            }
            let target = insn.target.expect("rel8 branch target");
            let here_end = insn_off[&insn.rva] + insn.length as u64;
            let reach = match entry_off.get(&target) {
                Some(&t) => t as i64 - here_end as i64,
                None => i64::MAX, // leaves the clone: cannot stay rel8
            };
            if !(-128..=127).contains(&reach) {
                *enc = if matches!(insn.opcode, Opcode::One(0xE0..=0xE3)) {
                    Enc::Islet
                } else {
                    Enc::Rel32
                };
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let clone_len: u64 = {
        let mut off = 0u64;
        for item in &items {
            off += match item {
                Item::Insn { index, enc } => {
                    (if stubbed.contains_key(&view.insns[*index].rva) { stub_len } else { 0 })
                        + enc_len(&view.insns[*index], *enc)
                }
                Item::Gap { len, .. } => *len,
            };
        }
        off
    };

    // ---- section layout ----
    let sect_align = img.opt.section_alignment as u64;
    let last_vend = img.sections.last().map(|s| s.virtual_end() as u64).unwrap_or(sect_align);
    let spot0_rva = align_up64(last_vend, sect_align);
    let spot0_size = clone_len.max(16);
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

    // map an original text address to its clone rva (branch entry view)
    let text_lo = view.text_rva;
    let map_code = |rva: u64| -> Option<u64> { entry_off.get(&rva).map(|&o| spot0_rva + o) };

    // ---- emit the clone ----
    let mut clone = Vec::with_capacity(clone_len as usize);
    let mut added: Vec<u64> = Vec::new();
    let old_relocs = img.relocations().cloned().unwrap_or_default();
    for item in &items {
        match item {
            Item::Insn { index, enc } => {
                let insn = &view.insns[*index];
                if let Some(&pi) = stubbed.get(&insn.rva) {
                    let stub_rva = spot0_rva + clone.len() as u64;
                    let code = ctx.emit(plan.points[pi].id, pi, stub_rva);
                    for o in &code.reloc_offsets {
                        added.push(stub_rva + *o as u64);
                    }
                    clone.extend_from_slice(&code.bytes);
                }
                let new_rva = spot0_rva + clone.len() as u64;
                let src = insn_bytes(img, &view, insn);
                // duplicated relocation entries travel with the copied bytes
                for e in old_relocs.entries_in(insn.rva, insn.end_rva()) {
                    added.push(new_rva + (e.rva as u64 - insn.rva));
                }
                let map = |t: u64| map_code(t).unwrap_or(t);
                match enc {
                    Enc::Verbatim => {
                        let mut bytes = src.clone();
                        if matches!(
                            insn.kind,
                            InsnKind::JmpDirect | InsnKind::Jcc | InsnKind::CallDirect
                        ) && insn.imm_len == 2
                        {
                            return Err(RewriteError::Unsupported("rel16 branch in text"));
                        }
                        if insn.imm_len == 1
                            && matches!(
                                insn.kind,
                                InsnKind::JmpDirect | InsnKind::Jcc | InsnKind::CallDirect
                            )
                        {
                            let target = map(insn.target.unwrap());
                            let rel = target as i64 - (new_rva as i64 + insn.length as i64);
                            bytes[insn.imm_off as usize] = i8::try_from(rel)
                                .expect("verified by layout fixpoint")
                                as u8;
                        } else if matches!(
                            insn.kind,
                            InsnKind::JmpDirect | InsnKind::Jcc | InsnKind::CallDirect
                        ) {
                            let target = map(insn.target.unwrap());
                            let rel = target as i64 - (new_rva as i64 + insn.length as i64);
                            let rel = i32::try_from(rel).expect("clone branch reach");
                            bytes[insn.imm_off as usize..insn.imm_off as usize + 4]
                                .copy_from_slice(&rel.to_le_bytes());
                        } else if insn.mem.map(|m| m.rip_relative).unwrap_or(false) {
                            let m = insn.mem.unwrap();
                            let old_target = (insn.end_rva() as i64 + m.disp) as u64;
                            let target = map_code(old_target).unwrap_or(old_target);
                            let rel = target as i64 - (new_rva as i64 + insn.length as i64);
                            let rel = i32::try_from(rel).expect("rip operand reach");
                            bytes[insn.disp_off as usize..insn.disp_off as usize + 4]
                                .copy_from_slice(&rel.to_le_bytes());
                        }
                        clone.extend_from_slice(&bytes);
                    }
                    Enc::Rel32 => {
                        let re = super::patch::reencode_at(insn, &src, new_rva, map)
                            .map_err(|_| RewriteError::NoText)?;
                        clone.extend_from_slice(&re.bytes);
                    }
                    Enc::Islet => {
                        // op rel8 jumps over the fall-through hop to a rel32
                        let target = map(insn.target.unwrap());
                        let mut bytes = src.clone();
                        bytes[insn.imm_off as usize] = 2; // over the EB 05
                        clone.extend_from_slice(&bytes);
                        clone.extend_from_slice(&[0xEB, 0x05]);
                        let e9_rva = new_rva + insn.length as u64 + 2;
                        let rel = i32::try_from(target as i64 - (e9_rva as i64 + 5))
                            .expect("islet reach");
                        clone.push(0xE9);
                        clone.extend_from_slice(&rel.to_le_bytes());
                    }
                }
            }
            Item::Gap { rva, len } => {
                let new_rva = spot0_rva + clone.len() as u64;
                for e in old_relocs.entries_in(*rva, rva + len) {
                    added.push(new_rva + (e.rva as u64 - rva));
                }
                let text = &img.sections[view.text_index];
                let off = (rva - view.text_rva) as usize;
                clone.extend_from_slice(&text.data[off..off + *len as usize]);
            }
        }
    }
    debug_assert_eq!(clone.len() as u64, clone_len);

    // ---- steer pointers into the clone ----
    if let Some(new_entry) = map_code(img.opt.address_of_entry_point as u64) {
        out.opt.address_of_entry_point = new_entry as u32;
    }
    // export address table entries
    if let Some(d) = img.dir(DIR_EXPORT) {
        if d.rva != 0 {
            if let Ok(hdr) = img.read_rva(d.rva as u64, 40) {
                let nfuncs = u32::from_le_bytes(hdr[20..24].try_into().unwrap()) as u64;
                let funcs = u32::from_le_bytes(hdr[28..32].try_into().unwrap()) as u64;
                for i in 0..nfuncs {
                    if let Ok(rva) = img.read_u32_rva(funcs + 4 * i) {
                        if let Some(mapped) = map_code(rva as u64) {
                            out.write_rva(funcs + 4 * i, &(mapped as u32).to_le_bytes())?;
                        }
                    }
                }
            }
        }
    }
    // relocation-backed code pointers outside the text section
    let base = img.opt.image_base;
    let text_hi = view.text_rva + view.code_len as u64;
    for e in &old_relocs.entries {
        let cell = e.rva as u64;
        if cell >= text_lo && cell < text_hi {
            continue; // cells inside code move with the clone copy instead
        }
        let width = e.kind.width() as usize;
        if width == 0 {
            continue;
        }
        let Ok(raw) = img.read_rva(cell, width) else { continue };
        let mut v = [0u8; 8];
        v[..width].copy_from_slice(raw);
        let value = u64::from_le_bytes(v);
        let Some(rva) = value.checked_sub(base) else { continue };
        if let Some(mapped) = map_code(rva) {
            let nv = base + mapped;
            out.write_rva(cell, &nv.to_le_bytes()[..width])?;
        }
    }
    // offset-based jump tables: rebase each entry onto the clone
    for table in &view.tables {
        if table.entry_kind != JumpTableKind::Rva32 {
            continue;
        }
        for (i, &target) in table.targets.iter().enumerate() {
            if let Some(mapped) = map_code(target) {
                let slot = table.table_rva + 4 * i as u64;
                let old = img.read_u32_rva(slot)? as i32 as i64;
                let adjusted = old + (mapped as i64 - target as i64);
                out.write_rva(slot, &(i32::try_from(adjusted).expect("table entry range") as u32).to_le_bytes())?;
            }
        }
    }

    // ---- relocation table ----
    if let Some(t) = &tls {
        for o in &t.reloc_offs {
            added.push(spot2_rva + *o as u64);
        }
    }
    let reloc_kind = if is64 { RelocKind::Dir64 } else { RelocKind::HighLow };
    let rebuild = if added.is_empty() {
        None
    } else {
        Some(rebuild_relocs(img, &[], &added, reloc_kind))
    };
    let blob_len = rebuild.as_ref().map(|r| r.blob.len() as u64).unwrap_or(0);
    let (spot1_size, spot2_size) = if multi {
        let c = tls.as_ref().map(|t| t.content.len() as u64).unwrap_or(0);
        (feedback_len, align_up64(c, 8) + blob_len)
    } else {
        (align_up64(feedback_len, 8) + blob_len, 0)
    };

    // ---- write sections ----
    out.add_section(
        TRAMPOLINE_SECTION,
        spot0_size as u32,
        SCN_MEM_READ | SCN_MEM_EXECUTE | SCN_CNT_CODE,
    )?;
    out.write_rva(spot0_rva, &clone)?;

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
