use super::*;
use iced_x86::{Decoder, DecoderOptions, FlowControl, OpKind};
use spot_testkit::Rng;

fn d32(bytes: &[u8], rva: u64) -> DecodedInsn {
    decode_one(bytes, rva, Mode::Bits32).unwrap()
}

#[test]
fn call_rel32_zero_disp() {
    let d = d32(&[0xE8, 0, 0, 0, 0], 0x1000);
    assert_eq!(d.kind, InsnKind::CallDirect);
    assert_eq!(d.length, 5);
    assert_eq!(d.target, Some(0x1005));
}

#[test]
fn jcc_near_with_target() {
    let d = d32(&[0x0F, 0x84, 0x10, 0, 0, 0], 0x2000);
    assert_eq!(d.kind, InsnKind::Jcc);
    assert_eq!(d.length, 6);
    assert_eq!(d.target, Some(0x2016));
}

#[test]
fn jmp_indirect_reg() {
    let d = d32(&[0xFF, 0xE1], 0);
    assert_eq!(d.kind, InsnKind::JmpIndirectReg);
    assert_eq!(d.modrm_rm, 1);
    let d = decode_one(&[0xFF, 0xE1], 0, Mode::Bits64).unwrap();
    assert_eq!(d.kind, InsnKind::JmpIndirectReg);
}

#[test]
fn mov_store_marks_write() {
    let d = d32(&[0x89, 0x08], 0); // mov [eax], ecx
    assert_eq!(d.kind, InsnKind::Plain);
    assert!(d.writes_memory);
    assert!(!d.reads_memory);
    let m = d.mem.unwrap();
    assert_eq!(m.base, Some(0));
    assert!(!m.is_absolute());
}

#[test]
fn mov_load_marks_read() {
    let d = d32(&[0x8B, 0x08], 0);
    assert!(d.reads_memory);
    assert!(!d.writes_memory);
}

#[test]
fn lea_touches_nothing() {
    let d = d32(&[0x8D, 0x40, 0x10], 0); // lea eax, [eax+0x10]
    assert!(!d.reads_memory && !d.writes_memory);
    assert!(d.mem.is_some());
}

#[test]
fn absolute_store_descriptor() {
    let d = d32(&[0xC7, 0x05, 0x00, 0x30, 0x40, 0x00, 1, 0, 0, 0], 0);
    assert!(d.writes_memory);
    assert!(d.mem.unwrap().is_absolute());
}

#[test]
fn rip_relative_in_64bit() {
    let d = decode_one(&[0x48, 0x8B, 0x05, 0x10, 0, 0, 0], 0x1000, Mode::Bits64).unwrap();
    let m = d.mem.unwrap();
    assert!(m.rip_relative);
    assert_eq!(m.disp, 0x10);
    assert_eq!(d.disp_off, 3);
    assert_eq!(d.disp_len, 4);
}

#[test]
fn sweep_fixture() {
    let code = [0x31, 0xC0, 0x75, 0x02, 0x31, 0xC9, 0xC3];
    let (insns, regions) = sweep(&code, 0x1000, Mode::Bits32);
    assert!(regions.is_empty());
    let lens: Vec<u8> = insns.iter().map(|i| i.length).collect();
    assert_eq!(lens, vec![2, 2, 2, 1]);
    assert_eq!(insns[1].kind, InsnKind::Jcc);
    assert_eq!(insns[1].target, Some(0x1006));
    assert_eq!(insns[3].kind, InsnKind::Ret);
}

#[test]
fn sweep_empty() {
    let (insns, regions) = sweep(&[], 0, Mode::Bits32);
    assert!(insns.is_empty() && regions.is_empty());
}

#[test]
fn vex_prefix_undecodable_region() {
    // 0xC4 is always a VEX escape in 64-bit mode
    let (insns, regions) = sweep(&[0xC4, 0xC4, 0xC4, 0xC4], 0x1000, Mode::Bits64);
    assert!(insns.is_empty());
    assert_eq!(regions, vec![UndecodableRegion { start: 0x1000, len: 4 }]);
}

#[test]
fn x87_is_undecodable() {
    assert_eq!(decode_one(&[0xD8, 0xC1], 0, Mode::Bits32), Err(DecodeError::Undecodable));
}

#[test]
fn truncated_reports() {
    assert_eq!(decode_one(&[0xE8, 0x00], 0, Mode::Bits32), Err(DecodeError::Truncated));
    assert_eq!(decode_one(&[], 0, Mode::Bits32), Err(DecodeError::Truncated));
}

#[test]
fn rel8_target_arithmetic() {
    for disp in [-128i8, -1, 0, 1, 127] {
        let d = d32(&[0x74, disp as u8], 0x5000);
        assert_eq!(d.target.unwrap(), (0x5002i64 + disp as i64) as u64 & 0xFFFF_FFFF);
    }
}

#[test]
fn loop_and_jcxz_are_jcc() {
    for op in 0xE0..=0xE3u8 {
        let d = d32(&[op, 0x05], 0x100);
        assert_eq!(d.kind, InsnKind::Jcc, "op {op:#x}");
        assert_eq!(d.target, Some(0x107));
    }
}

// ---- differential against the reference disassembler ----

fn iced_view(bytes: &[u8], rva: u64, bitness: u32) -> Option<(usize, bool, Option<u64>)> {
    let mut dec = Decoder::with_ip(bitness, bytes, rva, DecoderOptions::NONE);
    let instr = dec.decode();
    if instr.is_invalid() {
        return None;
    }
    let is_transfer = !matches!(
        instr.flow_control(),
        FlowControl::Next | FlowControl::Interrupt | FlowControl::Exception | FlowControl::XbeginXabortXend
    );
    let target = match instr.op0_kind() {
        OpKind::NearBranch16 | OpKind::NearBranch32 | OpKind::NearBranch64 => {
            Some(instr.near_branch_target())
        }
        _ => None,
    };
    Some((instr.len(), is_transfer, if is_transfer { target } else { None }))
}

/// Generate a random candidate encoding: optional prefixes, a random
/// opcode, then random tail bytes.
pub(super) fn random_encoding(rng: &mut Rng, is64: bool) -> Vec<u8> {
    let mut v = Vec::new();
    let legacy: &[u8] = &[0x66, 0x67, 0xF2, 0xF3, 0x2E, 0x36, 0x3E, 0x26, 0x64, 0x65];
    for _ in 0..rng.below(3) {
        v.push(legacy[rng.below(legacy.len())]);
    }
    if is64 && rng.chance(40) {
        v.push(0x40 | (rng.below(16) as u8));
    }
    if rng.chance(25) {
        v.push(0x0F);
    }
    v.push(rng.byte());
    for _ in 0..12 {
        v.push(rng.byte());
    }
    v
}

#[test]
fn differential_sample_against_iced() {
    let count: usize = std::env::var("SPOT_DIFF_COUNT")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(4000);
    let mut rng = Rng::new(0xDEC0DE);
    let mut checked = 0usize;
    let mut attempts = 0usize;
    while checked < count {
        attempts += 1;
        assert!(attempts < count * 50, "generator starved");
        let is64 = rng.chance(50);
        let mode = if is64 { Mode::Bits64 } else { Mode::Bits32 };
        let bytes = random_encoding(&mut rng, is64);
        let rva = (rng.next_u32() as u64) & 0x7FFF_FFFF;
        let Ok(mine) = decode_one(&bytes, rva, mode) else { continue };
        let theirs = iced_view(&bytes, rva, if is64 { 64 } else { 32 });
        let my_view = (mine.length as usize, mine.kind.is_transfer(), mine.target);
        match theirs {
            None => panic!(
                "iced rejects bytes we decode: {:02X?} mode64={} -> {:?}",
                &bytes[..mine.length as usize],
                is64,
                mine
            ),
            Some(t) => assert_eq!(
                my_view, t,
                "mismatch on {:02X?} mode64={} (ours vs iced)",
                &bytes[..(mine.length as usize).max(t.0)],
                is64
            ),
        }
        checked += 1;
    }
    eprintln!("differential: {checked} encodings agreed ({attempts} candidates)");
}
