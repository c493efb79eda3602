use super::*;
use spot_testkit::{proggen, PeBuilder, Rng};

fn load32(code: &[u8]) -> SandboxState {
    let (bytes, _) = PeBuilder::new32().text(code).entry(0).build();
    let img = crate::pe::PeImage::parse(&bytes).unwrap();
    load_image(&img, img.opt.image_base, 1).unwrap()
}

#[test]
fn straight_line_with_branch() {
    let mut st = load32(&[0x31, 0xC0, 0x75, 0x02, 0x31, 0xC9, 0xC3]);
    let base = st.load_base;
    st.trace_points = [0x1000u64, 0x1004, 0x1006].iter().map(|r| base + r).collect();
    st.run(1000);
    assert_eq!(st.exit, ExitStatus::Returned);
    // xor sets ZF, jnz falls through, both xors and the ret-head execute
    let tr: Vec<u64> = st.trace.iter().map(|&(_, va)| va - base).collect();
    assert_eq!(tr, vec![0x1000, 0x1004, 0x1006]);
    assert_eq!(st.thread(0).regs[0], 0);
    assert_eq!(st.thread(0).regs[1], 0);
    assert!(st.thread(0).flags.zf);
}

#[test]
fn fuel_exhaustion() {
    let mut st = load32(&[0xEB, 0xFE]);
    st.run(100);
    assert_eq!(st.exit, ExitStatus::FuelExhausted);
    assert_eq!(st.fuel_used, 100);
}

#[test]
fn unmapped_read_faults() {
    // mov eax, [0xDEAD0000]; ret
    let mut st = load32(&[0xA1, 0x00, 0x00, 0xAD, 0xDE, 0xC3]);
    st.run(10);
    match st.exit {
        ExitStatus::Fault { kind: FaultKind::Unmapped, addr, .. } => assert_eq!(addr, 0xDEAD_0000),
        other => panic!("expected unmapped fault, got {other:?}"),
    }
}

#[test]
fn write_to_readonly_faults() {
    // mov [0x401000], eax — text is EXECUTE_READ
    let mut st = load32(&[0xA3, 0x00, 0x10, 0x40, 0x00, 0xC3]);
    st.run(10);
    assert!(matches!(st.exit, ExitStatus::Fault { kind: FaultKind::NotWritable, .. }));
}

#[test]
fn diff_states_self_empty() {
    let mut st = load32(&[0x31, 0xC0, 0xC3]);
    st.run(10);
    assert!(diff_states(&st, &st.clone(), &[]).is_empty());
}

#[test]
fn rebase_matches_reference_applier() {
    let (fix, _) = proggen::jump_table_fixture32(4);
    let img = crate::pe::PeImage::parse(&fix.bytes).unwrap();
    let base = img.opt.image_base + 0x10000;
    let st = load_image(&img, base, 1).unwrap();

    let mut oracle = fix.bytes.clone();
    spot_testkit::pe::apply_relocations(&mut oracle, base);
    let ope = spot_testkit::pe::parse_min(&oracle);
    for s in &ope.sections {
        let file = &oracle[s.raw_off as usize..(s.raw_off + s.raw_size) as usize];
        let mem = st.read_region(base + s.va as u64, file.len()).unwrap();
        assert_eq!(mem, file, "section {:?} differs after rebase", s.name);
    }
}

#[test]
fn random_programs_terminate_deterministically() {
    let mut rng = Rng::new(99);
    for i in 0..20 {
        let mode =
            if i % 2 == 0 { spot_testkit::asm::Mode::Bits32 } else { spot_testkit::asm::Mode::Bits64 };
        let fix = proggen::random_program(&mut rng, mode, 48);
        let img = crate::pe::PeImage::parse(&fix.bytes).unwrap();
        let run = |tp: bool| {
            let mut st = load_image(&img, img.opt.image_base, 1).unwrap();
            if tp {
                st.trace_points.insert(st.load_base + 0x1000);
            }
            st.thread_mut(0).regs[REG_SI] = st.load_base + fix.scratch_rva as u64;
            st.run(200_000);
            st
        };
        let a = run(false);
        assert_eq!(a.exit, ExitStatus::Returned, "fixture {i} did not return: {:?}", a.exit);
        let b = run(false);
        assert_eq!(a.fuel_used, b.fuel_used);
        assert_eq!(a.thread(0).regs, b.thread(0).regs);
        assert!(diff_states(&a, &b, &[]).is_empty());
    }
}

#[test]
fn jump_table_dispatch_executes() {
    let (fix, _) = proggen::jump_table_fixture32(4);
    let img = crate::pe::PeImage::parse(&fix.bytes).unwrap();
    for idx in 0..4u8 {
        let mut st = load_image(&img, img.opt.image_base, 1).unwrap();
        let scratch = st.load_base + fix.scratch_rva as u64;
        st.write_region(scratch, &[idx]);
        st.run(10_000);
        assert_eq!(st.exit, ExitStatus::Returned);
        let cell = st.read_region(scratch + 8 + 4 * idx as u64, 4).unwrap();
        assert_eq!(u32::from_le_bytes(cell.try_into().unwrap()), 0x100 + idx as u32);
    }
}

#[test]
fn jump_table_64_dispatch_executes() {
    let (fix, _) = proggen::jump_table_fixture64(4);
    let img = crate::pe::PeImage::parse(&fix.bytes).unwrap();
    for idx in 0..4u8 {
        let mut st = load_image(&img, img.opt.image_base, 1).unwrap();
        let scratch = st.load_base + fix.scratch_rva as u64;
        st.write_region(scratch, &[idx]);
        st.run(10_000);
        assert_eq!(st.exit, ExitStatus::Returned);
        let cell = st.read_region(scratch + 8 + 4 * idx as u64, 4).unwrap();
        assert_eq!(u32::from_le_bytes(cell.try_into().unwrap()), 0x200 + idx as u32);
    }
}

#[test]
fn tls_blocks_isolated_per_thread() {
    // image with a TLS directory; loader yields per-thread blocks reachable
    // through the emulated TEB
    let (bytes, layout) = PeBuilder::new32().text(&[0xC3]).tls(&[0xAB; 8], &[]).build();
    let img = crate::pe::PeImage::parse(&bytes).unwrap();
    let st = load_image(&img, img.opt.image_base, 2).unwrap();
    assert_eq!(st.threads.len(), 2);
    let index_va = st.load_base + layout.tls_index_rva.unwrap() as u64;
    assert_eq!(st.mem.read_uint(index_va, 4).unwrap(), 0);
    for t in 0..2 {
        let teb = st.threads[t].seg_base[0];
        assert_ne!(teb, 0);
        let array = st.mem.read_uint(teb + 0x2C, 4).unwrap();
        let block = st.mem.read_uint(array, 4).unwrap();
        let raw = st.mem.read_bytes(block, 8).unwrap();
        assert_eq!(raw, vec![0xAB; 8]);
    }
    assert_ne!(st.threads[0].seg_base[0], st.threads[1].seg_base[0]);
}

#[test]
fn two_threads_run_to_completion() {
    let mut rng = Rng::new(123);
    let fix = proggen::random_program(&mut rng, spot_testkit::asm::Mode::Bits32, 40);
    let img = crate::pe::PeImage::parse(&fix.bytes).unwrap();
    let mut st = load_image(&img, img.opt.image_base, 2).unwrap();
    st.thread_mut(0).regs[REG_SI] = st.load_base + fix.scratch_rva as u64;
    st.thread_mut(1).regs[REG_SI] = st.load_base + fix.scratch_rva as u64 + 0x400;
    st.run(400_000);
    assert_eq!(st.exit, ExitStatus::Returned);
    assert!(st.threads.iter().all(|t| t.finished));
}
