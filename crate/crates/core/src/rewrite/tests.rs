use std::collections::BTreeMap;

use super::*;
use crate::cfg::analyze_image;
use crate::coverage::{self, CoverageMap};
use crate::pe::PeImage;
use crate::sandbox::{self, diff_states, load_image, ExitStatus, REG_SI};
use crate::select;
use spot_testkit::{proggen, PeBuilder, Rng};

fn full_plan(
    img: &PeImage,
    mode: InstrumentMode,
    tm: ThreadMode,
    linear: bool,
) -> crate::select::InstrumentationPlan {
    let blocks = analyze_image(img, &Default::default()).unwrap();
    select::build_plan(&blocks, mode, tm, linear, 16)
}

/// The central oracle: run original and instrumented builds of the same
/// fixture and compare everything outside the instrumentation state; then
/// check the recorded bitmap against the reference bitmap math replayed
/// over the original trace.
fn preserve_and_cover(fix: &proggen::Fixture, mode: InstrumentMode, tm: ThreadMode, linear: bool) {
    let img = PeImage::parse(&fix.bytes).unwrap();
    let plan = full_plan(&img, mode, tm, linear);
    let (instr, report) = instrument(&img, &plan).unwrap();
    assert_eq!(
        report.instrumented + report.skipped_too_small,
        plan.points.len() as u32,
        "report identity"
    );
    let instr_img = PeImage::parse(&instr.serialize()).expect("instrumented image parses");
    assert!(instr_img.verify_checksum());

    let nthreads = if tm == ThreadMode::Multi { 2 } else { 1 };
    let base = img.opt.image_base;

    // ids of instrumented heads
    let mut head_ids: BTreeMap<u64, u32> = BTreeMap::new();
    let placed: Vec<&crate::select::PlanPoint> = {
        // reconstruct which points were placed: re-run the site planner
        let view = view_of(&img, &plan).unwrap();
        let mut out = Vec::new();
        let mut covered = 0u64;
        for p in &plan.points {
            if p.block.start_rva < covered {
                continue;
            }
            if let Ok(site) = patch::plan_patch_site(&p.block, &view.insn_index, &view.leaders) {
                if mode == InstrumentMode::Jump {
                    covered = p.block.start_rva + site.site_size;
                }
                out.push(p);
            } else if mode == InstrumentMode::Inline {
                out.push(p); // inline mode has no size constraint
            }
        }
        if mode == InstrumentMode::Inline {
            plan.points.iter().collect()
        } else {
            out
        }
    };
    for p in &placed {
        head_ids.insert(base + p.block.start_rva, p.id);
    }

    let run = |image: &PeImage| {
        let mut st = load_image(image, base, nthreads).unwrap();
        st.trace_points = head_ids.keys().copied().collect();
        for t in 0..nthreads {
            st.thread_mut(t).regs[REG_SI] =
                base + fix.scratch_rva as u64 + t as u64 * proggen::SCRATCH_SIZE as u64;
        }
        st.run(2_000_000);
        st
    };
    let orig = run(&img);
    assert_eq!(orig.exit, ExitStatus::Returned, "original must terminate");
    let inst = run(&instr_img);

    let ignore = inst.default_ignore_ranges();
    let diffs = diff_states(&orig, &inst, &ignore);
    assert!(
        diffs.is_empty(),
        "{mode:?}/{tm:?}: divergence between original and instrumented run: {diffs:?}"
    );

    // bitmap equality against the reference replay of the original trace
    let spot1 = inst.section_span(&instr_img, FEEDBACK_SECTION).unwrap().0;
    let map_size = 1usize << plan.map_size_log2;
    let bitmap = inst.read_region(spot1 + FB_OFF_BITMAP as u64, map_size).unwrap();
    let mut expect = CoverageMap::new(plan.map_size_log2);
    for t in 0..nthreads {
        let ids: Vec<u32> = orig
            .trace
            .iter()
            .filter(|&&(th, _)| th == t)
            .filter_map(|&(_, va)| head_ids.get(&va).copied())
            .collect();
        coverage::accumulate_path(&mut expect, &ids);
    }
    assert_eq!(bitmap, expect.bitmap, "{mode:?}/{tm:?}: bitmap mismatch");

    if linear {
        let extra = plan.points.len().div_ceil(8);
        let bits = inst
            .read_region(spot1 + FB_OFF_BITMAP as u64 + map_size as u64, extra)
            .unwrap();
        for (i, p) in plan.points.iter().enumerate() {
            let visited = orig.trace.iter().any(|&(_, va)| va == base + p.block.start_rva);
            let set = bits[i / 8] & (1 << (i % 8)) != 0;
            if head_ids.contains_key(&(base + p.block.start_rva)) {
                assert_eq!(set, visited, "linear bit {i}");
            }
        }
    }
}

#[test]
fn one_point_jump_patch() {
    // mov eax,1(5B) ; ret — a single 5-byte patchable block
    let (bytes, _) = PeBuilder::new32().text(&[0xB8, 1, 0, 0, 0, 0xC3]).entry(0).build();
    let img = PeImage::parse(&bytes).unwrap();
    let blocks = analyze_image(&img, &Default::default()).unwrap();
    assert_eq!(blocks.blocks.len(), 1);
    let plan = select::build_plan(&blocks, InstrumentMode::Jump, ThreadMode::Single, false, 16);
    let (instr, report) = instrument(&img, &plan).unwrap();
    assert_eq!(report.instrumented, 1);
    assert_eq!(report.skipped_too_small, 0);
    // patched head: jump into .spot0
    let patched = instr.read_rva(0x1000, 5).unwrap();
    assert_eq!(patched[0], 0xE9);
    let spot0 = instr.section_by_name(TRAMPOLINE_SECTION).unwrap();
    let rel = i32::from_le_bytes(patched[1..5].try_into().unwrap()) as i64;
    assert_eq!(0x1005 + rel, spot0.virtual_address as i64);
    // sections in place
    assert!(instr.section_by_name(FEEDBACK_SECTION).is_some());
    assert!(instr.section_by_name(TLS_SECTION).is_none());
    // feedback header
    let spot1 = instr.section_by_name(FEEDBACK_SECTION).unwrap();
    let hdr = instr.read_rva(spot1.virtual_address as u64, 24).unwrap();
    assert_eq!(&hdr[..8], FEEDBACK_MAGIC);
    assert_eq!(u32::from_le_bytes(hdr[12..16].try_into().unwrap()), 1 << 16);
}

#[test]
fn zero_point_plan_is_noop_plus_sections() {
    let (bytes, _) = PeBuilder::new32().text(&[0x31, 0xC0, 0xC3]).entry(0).build();
    let img = PeImage::parse(&bytes).unwrap();
    let blocks = crate::cfg::BlockList {
        arch_is64: false,
        image_base: img.opt.image_base,
        ..Default::default()
    };
    let plan = select::build_plan(&blocks, InstrumentMode::Jump, ThreadMode::Single, false, 16);
    let (instr, report) = instrument(&img, &plan).unwrap();
    assert_eq!(report.instrumented, 0);
    assert_eq!(report.relocs_deleted + report.relocs_added, 0);
    // text bytes untouched
    assert_eq!(instr.read_rva(0x1000, 3).unwrap(), img.read_rva(0x1000, 3).unwrap());
    // relocation directory untouched
    assert_eq!(instr.dir(DIR_BASERELOC), img.dir(DIR_BASERELOC));
    assert!(instr.section_by_name(TRAMPOLINE_SECTION).is_some());
}

#[test]
fn small_blocks_skip_accounting() {
    let mut rng = Rng::new(0x5ca1e);
    for mode in [spot_testkit::asm::Mode::Bits32, spot_testkit::asm::Mode::Bits64] {
        let fix = proggen::small_block_program(&mut rng, mode);
        let img = PeImage::parse(&fix.bytes).unwrap();
        let plan = full_plan(&img, InstrumentMode::Jump, ThreadMode::Single, false);
        let (_, report) = instrument(&img, &plan).unwrap();
        assert_eq!(report.instrumented + report.skipped_too_small, plan.points.len() as u32);
        assert!(report.skipped_too_small > 0, "corpus must contain skipped blocks");
        // every skipped block is genuinely under the patch size
        let view = view_of(&img, &plan).unwrap();
        for p in &plan.points {
            if patch::plan_patch_site(&p.block, &view.insn_index, &view.leaders).is_err() {
                assert!(p.block.size < 5);
            }
        }
    }
}

#[test]
fn displaced_reloc_moves_into_trampoline() {
    // block head: mov esi, imm32-with-reloc (5 bytes); reloc at +1
    let (bytes, _) = PeBuilder::new32()
        .text(&[0xBE, 0x00, 0x30, 0x40, 0x00, 0xC3])
        .relocs(&[0x1001])
        .entry(0)
        .build();
    let img = PeImage::parse(&bytes).unwrap();
    let plan = full_plan(&img, InstrumentMode::Jump, ThreadMode::Single, false);
    let (instr, report) = instrument(&img, &plan).unwrap();
    assert_eq!(report.instrumented, 1);
    assert_eq!(report.relocs_deleted, 1);
    assert!(report.relocs_added >= 1);
    let table = instr.relocations().unwrap();
    assert!(!table.contains(0x1001), "old entry must be cleaned");
    let spot0 = instr.section_by_name(TRAMPOLINE_SECTION).unwrap();
    let in_tramp = table
        .entries
        .iter()
        .filter(|e| (e.rva as u64) >= spot0.virtual_address as u64
            && (e.rva as u64) < spot0.virtual_end() as u64)
        .count();
    assert!(in_tramp >= 1, "moved entry must land in the trampoline section");
    // round-trip of the instrumented image stays byte-exact
    let ser = instr.serialize();
    assert_eq!(PeImage::parse(&ser).unwrap().serialize(), ser);
}

#[test]
fn preservation_small_hand_fixture() {
    let (bytes, layout) = PeBuilder::new32()
        .text(&[0x31, 0xC0, 0x75, 0x02, 0x31, 0xC9, 0x31, 0xD2, 0xC3])
        .data(&[0u8; 0x800])
        .entry(0)
        .build();
    let fix = proggen::Fixture { bytes, scratch_rva: layout.data_rva, layout };
    for mode in [InstrumentMode::Jump, InstrumentMode::Inline] {
        preserve_and_cover(&fix, mode, ThreadMode::Single, false);
    }
}

#[test]
fn preservation_random_fixtures_all_modes() {
    let mut rng = Rng::new(2024);
    for i in 0..12 {
        let bits =
            if i % 2 == 0 { spot_testkit::asm::Mode::Bits32 } else { spot_testkit::asm::Mode::Bits64 };
        let fix = proggen::random_program(&mut rng, bits, 48);
        for mode in [InstrumentMode::Jump, InstrumentMode::Inline] {
            for tm in [ThreadMode::Single, ThreadMode::Multi] {
                preserve_and_cover(&fix, mode, tm, false);
            }
        }
    }
}

#[test]
fn preservation_with_linear_coverage() {
    let mut rng = Rng::new(7);
    let fix = proggen::random_program(&mut rng, spot_testkit::asm::Mode::Bits32, 40);
    preserve_and_cover(&fix, InstrumentMode::Jump, ThreadMode::Single, true);
    preserve_and_cover(&fix, InstrumentMode::Inline, ThreadMode::Multi, true);
}

#[test]
fn preservation_jump_tables() {
    for (fix, _) in [proggen::jump_table_fixture32(4), proggen::jump_table_fixture32(8)] {
        let img = PeImage::parse(&fix.bytes).unwrap();
        let plan = full_plan(&img, InstrumentMode::Jump, ThreadMode::Single, false);
        let (instr, _) = instrument(&img, &plan).unwrap();
        let instr_img = PeImage::parse(&instr.serialize()).unwrap();
        for idx in 0..4u8 {
            let run = |image: &PeImage| {
                let mut st = load_image(image, image.opt.image_base, 1).unwrap();
                let scratch = st.load_base + fix.scratch_rva as u64;
                st.write_region(scratch, &[idx]);
                st.run(100_000);
                st
            };
            let a = run(&img);
            let b = run(&instr_img);
            assert_eq!(a.exit, ExitStatus::Returned);
            let diffs = diff_states(&a, &b, &b.default_ignore_ranges());
            assert!(diffs.is_empty(), "case {idx}: {diffs:?}");
        }
    }
    // 64-bit variant in both modes
    let (fix, _) = proggen::jump_table_fixture64(4);
    let img = PeImage::parse(&fix.bytes).unwrap();
    for mode in [InstrumentMode::Jump, InstrumentMode::Inline] {
        let plan = full_plan(&img, mode, ThreadMode::Single, false);
        let (instr, _) = instrument(&img, &plan).unwrap();
        let instr_img = PeImage::parse(&instr.serialize()).unwrap();
        for idx in 0..4u8 {
            let run = |image: &PeImage| {
                let mut st = load_image(image, image.opt.image_base, 1).unwrap();
                let scratch = st.load_base + fix.scratch_rva as u64;
                st.write_region(scratch, &[idx]);
                st.run(100_000);
                st
            };
            let a = run(&img);
            let b = run(&instr_img);
            let diffs = diff_states(&a, &b, &b.default_ignore_ranges());
            assert!(diffs.is_empty(), "{mode:?} case {idx}: {diffs:?}");
        }
    }
}

#[test]
fn rebase_trace_equivalence() {
    let mut rng = Rng::new(31);
    let fix = proggen::random_program(&mut rng, spot_testkit::asm::Mode::Bits32, 40);
    let img = PeImage::parse(&fix.bytes).unwrap();
    let plan = full_plan(&img, InstrumentMode::Jump, ThreadMode::Single, false);
    let (instr, _) = instrument(&img, &plan).unwrap();
    let instr_img = PeImage::parse(&instr.serialize()).unwrap();
    let heads: Vec<u64> = plan.points.iter().map(|p| p.block.start_rva).collect();

    let run_at = |delta: u64| {
        let base = img.opt.image_base + delta;
        let mut st = load_image(&instr_img, base, 1).unwrap();
        st.trace_points = heads.iter().map(|h| base + h).collect();
        st.thread_mut(0).regs[REG_SI] = base + fix.scratch_rva as u64;
        st.run(1_000_000);
        assert_eq!(st.exit, ExitStatus::Returned, "run at +{delta:#x}");
        let b = st.load_base;
        st.trace.iter().map(|&(t, va)| (t, va - b)).collect::<Vec<_>>()
    };
    assert_eq!(run_at(0), run_at(0x10000));
}

#[test]
fn tls_merge_preserves_callbacks() {
    // existing TLS directory with two callbacks and 8 bytes of template
    let (bytes, _) = PeBuilder::new32()
        .text(&[0xC3, 0x90, 0xC3, 0x90, 0xC3])
        .tls(&[0x11; 8], &[2, 4])
        .build();
    let img = PeImage::parse(&bytes).unwrap();
    let orig_dir = img.dir(DIR_TLS).unwrap();
    let orig_index_va = img.read_u32_rva(orig_dir.rva as u64 + 8).unwrap() as u64;
    let plan = full_plan(&img, InstrumentMode::Jump, ThreadMode::Multi, false);
    let (instr, _) = instrument(&img, &plan).unwrap();
    let instr_img = PeImage::parse(&instr.serialize()).unwrap();

    let new_dir = instr_img.dir(DIR_TLS).unwrap();
    let spot2 = instr_img.section_by_name(TLS_SECTION).unwrap();
    assert_eq!(new_dir.rva, spot2.virtual_address);
    // callbacks preserved in order
    let cb_va = instr_img.read_u32_rva(new_dir.rva as u64 + 12).unwrap() as u64;
    let base = instr_img.opt.image_base;
    let cb0 = instr_img.read_u32_rva(cb_va - base).unwrap() as u64;
    let cb1 = instr_img.read_u32_rva(cb_va - base + 4).unwrap() as u64;
    let term = instr_img.read_u32_rva(cb_va - base + 8).unwrap();
    assert_eq!(cb0, base + 0x1002);
    assert_eq!(cb1, base + 0x1004);
    assert_eq!(term, 0);
    // index cell reused from the original image
    let new_index_va = instr_img.read_u32_rva(new_dir.rva as u64 + 8).unwrap() as u64;
    assert_eq!(new_index_va, orig_index_va);
    // template payload copied
    let start_va = instr_img.read_u32_rva(new_dir.rva as u64).unwrap() as u64;
    let raw = instr_img.read_rva(start_va - base, 8).unwrap();
    assert_eq!(raw, &[0x11; 8]);
}

#[test]
fn single_mode_has_no_tls_section() {
    let (bytes, _) = PeBuilder::new32().text(&[0xB8, 1, 0, 0, 0, 0xC3]).entry(0).build();
    let img = PeImage::parse(&bytes).unwrap();
    let plan = full_plan(&img, InstrumentMode::Jump, ThreadMode::Single, false);
    let (instr, _) = instrument(&img, &plan).unwrap();
    assert!(instr.section_by_name(TLS_SECTION).is_none());
    // fresh TLS section appears in multi mode, zero-initialized slot
    let plan = full_plan(&img, InstrumentMode::Jump, ThreadMode::Multi, false);
    let (instr, _) = instrument(&img, &plan).unwrap();
    let instr_img = PeImage::parse(&instr.serialize()).unwrap();
    let dir = instr_img.dir(DIR_TLS).unwrap();
    assert_ne!(dir.rva, 0);
    let st = load_image(&instr_img, instr_img.opt.image_base, 1).unwrap();
    assert_ne!(st.thread(0).seg_base[0], 0);
}

#[test]
fn instrument_deterministic() {
    let mut rng = Rng::new(55);
    let fix = proggen::random_program(&mut rng, spot_testkit::asm::Mode::Bits64, 40);
    let img = PeImage::parse(&fix.bytes).unwrap();
    for mode in [InstrumentMode::Jump, InstrumentMode::Inline] {
        let plan = full_plan(&img, mode, ThreadMode::Single, true);
        let (a, _) = instrument(&img, &plan).unwrap();
        let (b, _) = instrument(&img, &plan).unwrap();
        assert_eq!(a.serialize(), b.serialize());
    }
}

#[test]
fn sandbox_fault_location_is_ignored_in_diff() {
    // smoke check that the crash fixture behaves identically when
    // instrumented: benign input, then crashing input
    let fix = proggen::guarded_crash_fixture();
    let img = PeImage::parse(&fix.bytes).unwrap();
    let plan = full_plan(&img, InstrumentMode::Jump, ThreadMode::Single, false);
    let (instr, _) = instrument(&img, &plan).unwrap();
    let instr_img = PeImage::parse(&instr.serialize()).unwrap();
    let input_rva = img.section_by_name(".fuzzin").unwrap().virtual_address as u64;

    let run = |image: &PeImage, data: &[u8]| {
        let mut st = load_image(image, image.opt.image_base, 1).unwrap();
        let mut buf = (data.len() as u32).to_le_bytes().to_vec();
        buf.extend_from_slice(data);
        st.write_region(st.load_base + input_rva, &buf);
        st.run(100_000);
        st
    };
    let a = run(&img, b"nope");
    let b = run(&instr_img, b"nope");
    assert_eq!(a.exit, ExitStatus::Returned);
    assert!(diff_states(&a, &b, &b.default_ignore_ranges()).is_empty());

    let a = run(&img, b"SPD!");
    let b = run(&instr_img, b"SPD!");
    match (a.exit, b.exit) {
        (
            ExitStatus::Fault { kind: sandbox::FaultKind::Unmapped, addr: aa, .. },
            ExitStatus::Fault { kind: sandbox::FaultKind::Unmapped, addr: ba, .. },
        ) => assert_eq!(aa, ba),
        other => panic!("expected matching faults, got {other:?}"),
    }
}
