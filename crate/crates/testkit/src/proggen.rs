//! Generators for sandbox-executable fixture programs.
//!
//! Programs draw only from the instruction subset the sandbox interprets and
//! are built so every path terminates: branches between segments only go
//! forward, loops are counter-bounded, and calls target ret-terminated
//! functions. Memory writes go through the ESI window so two logical threads
//! with distinct ESI values never race.

use crate::asm::*;
use crate::pe::{PeBuilder, PeLayout, CHARS_DATA};
use crate::rng::Rng;

/// Writable bytes reserved per thread for generated programs.
pub const SCRATCH_SIZE: u32 = 0x400;
/// .text lands here in every fixture.
pub const TEXT_RVA: u32 = 0x1000;
/// Fixtures without .rdata place .data here.
pub const DATA_RVA: u32 = 0x2000;

pub struct Fixture {
    pub bytes: Vec<u8>,
    pub layout: PeLayout,
    /// rva of the per-thread write window (callers put it in ESI).
    pub scratch_rva: u32,
}

pub struct JumpTableMeta {
    pub jmp_rva: u32,
    pub table_rva: u32,
    pub targets: Vec<u32>,
}

fn builder(mode: Mode) -> PeBuilder {
    match mode {
        Mode::Bits32 => PeBuilder::new32(),
        Mode::Bits64 => PeBuilder::new64(),
    }
}

fn fixture_from_code(mode: Mode, code: Vec<u8>, abs_offsets: Vec<usize>) -> Fixture {
    assert!(code.len() < 0x1000, "generated text overflows its page");
    let relocs: Vec<u32> = abs_offsets.iter().map(|&o| TEXT_RVA + o as u32).collect();
    // two disjoint per-thread windows
    let (bytes, layout) = builder(mode)
        .text(&code)
        .data(&[0u8; 2 * SCRATCH_SIZE as usize])
        .relocs(&relocs)
        .entry(0)
        .build();
    assert_eq!(layout.data_rva, DATA_RVA);
    Fixture { bytes, layout, scratch_rva: DATA_RVA }
}

/// Register pool for generated code. ESI is the data window, ECX is reserved
/// for loop counters, ESP/EBP stay untouched.
fn pool(mode: Mode) -> &'static [u8] {
    match mode {
        Mode::Bits32 => &[EAX, EDX, EBX, EDI],
        Mode::Bits64 => &[EAX, EDX, EBX, EDI, 8, 9, 10],
    }
}

fn emit_random_op(a: &mut Asm, rng: &mut Rng, regs: &[u8]) {
    let r = regs[rng.below(regs.len())];
    let s = regs[rng.below(regs.len())];
    let dword_disp = (4 * rng.below((SCRATCH_SIZE as usize - 8) / 4)) as i32;
    match rng.below(14) {
        0 => a.mov_ri32(r, rng.next_u32() & 0xFFFF),
        1 => a.mov_rr(r, s),
        2 => a.add_rr(r, s),
        3 => a.sub_rr(r, s),
        4 => a.xor_rr(r, s),
        5 => a.and_rr(r, s),
        6 => a.or_rr(r, s),
        7 => match rng.below(4) {
            0 => a.add_ri(r, rng.below(0x100) as u32),
            1 => a.sub_ri(r, rng.below(0x100) as u32),
            2 => a.xor_ri(r, rng.next_u32() & 0xFFFF),
            _ => a.and_ri(r, 0xFF),
        },
        8 => {
            if rng.chance(50) {
                a.inc(r)
            } else {
                a.dec(r)
            }
        }
        9 => a.store(ESI, dword_disp, r),
        10 => a.load(r, ESI, dword_disp),
        11 => a.movzx8(r, ESI, rng.below(SCRATCH_SIZE as usize - 1) as i32),
        12 => match rng.below(2) {
            0 => a.store8_imm(ESI, rng.below(SCRATCH_SIZE as usize - 1) as i32, rng.byte()),
            _ => a.store32_imm(ESI, dword_disp, rng.next_u32()),
        },
        _ => {
            // balanced push/op/pop triple
            a.push(r);
            a.add_ri(r, 1);
            a.pop(r);
        }
    }
}

/// A short intra-segment skip: cmp + jcc over one or two ops. Keeps rel8 in
/// range and plants small blocks for the patch-site planner to chew on.
fn emit_short_skip(a: &mut Asm, rng: &mut Rng, regs: &[u8]) {
    let r = regs[rng.below(regs.len())];
    let s = regs[rng.below(regs.len())];
    let cc = [CC_E, CC_NE, CC_B, CC_AE, CC_L, CC_GE, CC_S, CC_NS][rng.below(8)];
    let skip = a.label();
    if rng.chance(50) {
        a.cmp_rr(r, s);
    } else {
        a.test_rr(r, s);
    }
    a.jcc8(cc, skip);
    emit_random_op(a, rng, regs);
    if rng.chance(40) {
        emit_random_op(a, rng, regs);
    }
    a.bind(skip);
}

/// jmp over int3 padding: exercises dead-code handling and neighbor
/// expansion in the rewriter.
fn emit_dead_pad(a: &mut Asm, rng: &mut Rng) {
    let skip = a.label();
    a.jmp8(skip);
    for _ in 0..rng.range(1, 4) {
        a.int3();
    }
    a.bind(skip);
}

/// Random terminating program over the sandbox subset. `budget` roughly caps
/// the instruction count.
pub fn random_program(rng: &mut Rng, mode: Mode, budget: usize) -> Fixture {
    let (code, abs) = random_code(rng, mode, budget);
    fixture_from_code(mode, code, abs)
}

pub fn random_code(rng: &mut Rng, mode: Mode, budget: usize) -> (Vec<u8>, Vec<usize>) {
    let mut a = Asm::new(mode);
    let regs = pool(mode);
    let nseg = rng.range(3, 3 + (budget / 8).min(5));
    let nfunc = rng.range(0, 2);
    let segs: Vec<Label> = (0..nseg).map(|_| a.label()).collect();
    let funcs: Vec<Label> = (0..nfunc).map(|_| a.label()).collect();

    for i in 0..nseg {
        a.bind(segs[i]);
        for _ in 0..rng.range(1, 4) {
            match rng.below(10) {
                0 | 1 => emit_short_skip(&mut a, rng, regs),
                2 => emit_dead_pad(&mut a, rng),
                3 => {
                    // absolute / rip-relative read of the data window
                    let r = regs[rng.below(regs.len())];
                    let target = DATA_RVA + 4 * rng.below(64) as u32;
                    match mode {
                        Mode::Bits32 => a.load32_abs(r, 0x40_0000 + target),
                        Mode::Bits64 => a.load32_rip_rva(r, target, TEXT_RVA),
                    }
                }
                _ => emit_random_op(&mut a, rng, regs),
            }
        }
        if i + 1 == nseg {
            a.ret();
            continue;
        }
        let j = rng.range(i + 1, nseg - 1);
        match rng.below(100) {
            0..=29 => {
                let r = regs[rng.below(regs.len())];
                let s = regs[rng.below(regs.len())];
                let cc = [CC_E, CC_NE, CC_B, CC_AE, CC_L, CC_GE][rng.below(6)];
                a.cmp_rr(r, s);
                a.jcc(cc, segs[j]);
            }
            30..=44 => a.jmp(segs[j]),
            45..=59 if !funcs.is_empty() => a.call(funcs[rng.below(funcs.len())]),
            60..=74 => {
                // bounded counter loop; ECX is reserved for this
                let top = a.label();
                a.mov_ri32(ECX, rng.range(2, 4) as u32);
                a.bind(top);
                emit_random_op(&mut a, rng, regs);
                a.dec(ECX);
                a.jcc8(CC_NE, top);
            }
            _ => {} // fall through into next segment
        }
    }
    for f in &funcs {
        a.bind(*f);
        for _ in 0..rng.range(1, 3) {
            emit_random_op(&mut a, rng, regs);
        }
        a.ret();
    }
    a.finish()
}

/// Corpus for skip accounting: a chain of calls to functions where a good
/// share of bodies are under 5 bytes and sit flush against the next function
/// entry, so neighbor expansion can never apply.
pub fn small_block_program(rng: &mut Rng, mode: Mode) -> Fixture {
    let mut a = Asm::new(mode);
    let regs = pool(mode);
    let nfunc = rng.range(8, 14);
    let funcs: Vec<Label> = (0..nfunc).map(|_| a.label()).collect();
    for f in &funcs {
        a.call(*f);
    }
    a.ret();
    for (i, f) in funcs.iter().enumerate() {
        a.bind(*f);
        match i % 4 {
            // 1-byte and 3-byte bodies: too small, follower is a call target
            0 => {}
            1 => a.xor_rr32(EAX, EAX),
            // exactly 5 bytes
            2 => a.mov_ri32(EAX, 7),
            // roomy body
            _ => {
                emit_random_op(&mut a, rng, regs);
                emit_random_op(&mut a, rng, regs);
            }
        }
        a.ret();
    }
    let (code, abs) = a.finish();
    fixture_from_code(mode, code, abs)
}

/// 32-bit jump-table dispatch: `jmp [eax*4 + table]` with absolute entries,
/// each backed by a relocation. Entry selects one of `n` case bodies.
pub fn jump_table_fixture32(n: usize) -> (Fixture, JumpTableMeta) {
    assert!(n >= 2);
    let image_base = 0x40_0000u32;
    // .rdata holds the table right after .text; .data moves one page later
    let table_rva = 0x2000u32;
    let scratch = 0x3000u32;

    let mut a = Asm::new(Mode::Bits32);
    let cases: Vec<Label> = (0..n).map(|_| a.label()).collect();
    let done = a.label();
    a.mov_ri32_abs(ESI, image_base + scratch);
    a.movzx8(EAX, ESI, 0); // index byte from scratch
    a.and_ri(EAX, n as u32 - 1);
    let jmp_off = a.here();
    a.jmp_table32(EAX, image_base + table_rva);
    let mut case_offs = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        a.bind(*c);
        case_offs.push(a.here());
        a.store32_imm(ESI, 8 + 4 * i as i32, 0x100 + i as u32);
        a.jmp(done);
    }
    a.bind(done);
    a.ret();
    let (code, abs) = a.finish();
    assert!(code.len() < 0x1000);

    let mut rdata = Vec::new();
    let mut relocs: Vec<u32> = abs.iter().map(|&o| TEXT_RVA + o as u32).collect();
    let mut targets = Vec::new();
    for off in &case_offs {
        let rva = TEXT_RVA + *off as u32;
        relocs.push(table_rva + rdata.len() as u32);
        rdata.extend_from_slice(&(image_base + rva).to_le_bytes());
        targets.push(rva);
    }
    let (bytes, layout) = PeBuilder::new32()
        .text(&code)
        .rdata(&rdata)
        .data(&[0u8; SCRATCH_SIZE as usize])
        .relocs(&relocs)
        .entry(0)
        .build();
    assert_eq!(layout.rdata_rva, table_rva);
    assert_eq!(layout.data_rva, scratch);
    let meta = JumpTableMeta { jmp_rva: TEXT_RVA + jmp_off as u32, table_rva, targets };
    (Fixture { bytes, layout, scratch_rva: scratch }, meta)
}

/// 64-bit jump-table dispatch: lea base, [rip+table]; movsxd; add; jmp reg.
/// Entries are 32-bit offsets relative to the lea target.
pub fn jump_table_fixture64(n: usize) -> (Fixture, JumpTableMeta) {
    assert!(n >= 2);
    let table_rva = 0x2000u32;
    let scratch = 0x3000u32;
    let mut a = Asm::new(Mode::Bits64);
    let cases: Vec<Label> = (0..n).map(|_| a.label()).collect();
    let done = a.label();

    a.lea_rip_rva(ESI, scratch, TEXT_RVA);
    a.movzx8(EAX, ESI, 0);
    a.and_ri(EAX, n as u32 - 1);
    a.lea_rip_rva(EBX, table_rva, TEXT_RVA);
    a.movsxd_table(EDX, EBX, EAX); // movsxd rdx, dword [rbx + rax*4]
    a.add_rr(EDX, EBX);
    let jmp_off = a.here();
    a.jmp_reg(EDX);
    let mut case_offs = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        a.bind(*c);
        case_offs.push(a.here());
        a.store32_imm(ESI, 8 + 4 * i as i32, 0x200 + i as u32);
        a.jmp(done);
    }
    a.bind(done);
    // the dispatch register held a code address; clear it so final state
    // comparisons are meaningful when the code moves
    a.xor_rr(EDX, EDX);
    a.ret();
    let (code, abs) = a.finish();
    assert!(abs.is_empty());
    assert!(code.len() < 0x1000);

    let mut rdata = Vec::new();
    let mut targets = Vec::new();
    for off in &case_offs {
        let rva = TEXT_RVA + *off as u32;
        rdata.extend_from_slice(&((rva as i64 - table_rva as i64) as i32).to_le_bytes());
        targets.push(rva);
    }
    let (bytes, layout) = PeBuilder::new64()
        .text(&code)
        .rdata(&rdata)
        .data(&[0u8; SCRATCH_SIZE as usize])
        .entry(0)
        .build();
    assert_eq!(layout.rdata_rva, table_rva);
    assert_eq!(layout.data_rva, scratch);
    let meta = JumpTableMeta { jmp_rva: TEXT_RVA + jmp_off as u32, table_rva, targets };
    (
        Fixture { bytes, layout, scratch_rva: scratch },
        meta,
    )
}

/// The planted-bug fuzzing target: crashes on an unmapped write iff the
/// input starts with "SPD", one conditional per byte, so coverage feedback
/// can discover the prefix byte by byte. Input lives in the `.fuzzin`
/// section as u32 length + data.
pub fn guarded_crash_fixture() -> Fixture {
    let image_base = 0x40_0000u32;
    let scratch = DATA_RVA; // .data
    let input = 0x3000u32; // .fuzzin
    let mut a = Asm::new(Mode::Bits32);
    let miss = a.label();
    let out = a.label();

    a.mov_ri32_abs(ESI, image_base + input);
    a.mov_ri32_abs(EDI, image_base + scratch);
    a.movzx8(EAX, ESI, 4);
    a.cmp_ri(EAX, b'S' as u32);
    a.jcc(CC_NE, miss);
    a.store(EDI, 0, EAX);
    a.movzx8(EAX, ESI, 5);
    a.cmp_ri(EAX, b'P' as u32);
    a.jcc(CC_NE, miss);
    a.store(EDI, 4, EAX);
    a.movzx8(EAX, ESI, 6);
    a.cmp_ri(EAX, b'D' as u32);
    a.jcc(CC_NE, miss);
    // all three guards passed: fault on an unmapped page
    a.mov_ri32(EBX, 0xDEAD_0000);
    a.store(EBX, 0, EAX);
    a.bind(miss);
    // benign variety: bucket input byte 7 into a few paths
    a.movzx8(EDX, ESI, 7);
    a.and_ri(EDX, 3);
    a.cmp_ri(EDX, 2);
    a.jcc(CC_B, out);
    a.store(EDI, 8, EDX);
    a.bind(out);
    a.ret();

    let (code, abs) = a.finish();
    let relocs: Vec<u32> = abs.iter().map(|&o| TEXT_RVA + o as u32).collect();
    let (bytes, layout) = PeBuilder::new32()
        .text(&code)
        .data(&[0u8; SCRATCH_SIZE as usize])
        .section(".fuzzin", CHARS_DATA, &[0u8; 0x1000])
        .relocs(&relocs)
        .entry(0)
        .build();
    assert_eq!(layout.data_rva, scratch);
    Fixture { bytes, layout, scratch_rva: scratch }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_programs_build() {
        let mut rng = Rng::new(42);
        for i in 0..8 {
            let mode = if i % 2 == 0 { Mode::Bits32 } else { Mode::Bits64 };
            let f = random_program(&mut rng, mode, 40);
            crate::pe::parse_min(&f.bytes);
        }
    }

    #[test]
    fn jump_table_fixture_has_reloc_backed_entries() {
        let (f, meta) = jump_table_fixture32(4);
        let relocs = crate::pe::read_relocs(&f.bytes);
        for i in 0..4u32 {
            assert!(relocs.iter().any(|(rva, _)| *rva == meta.table_rva + 4 * i));
        }
        assert_eq!(meta.targets.len(), 4);
    }

    #[test]
    fn crash_fixture_sections() {
        let f = guarded_crash_fixture();
        let pe = crate::pe::parse_min(&f.bytes);
        assert!(pe.section(".fuzzin").is_some());
        assert_eq!(pe.section(".fuzzin").unwrap().va, 0x3000);
    }
}
