//! x86/x64 instruction-length decoder with control-transfer classification.
//!
//! Covers the one-byte and two-byte opcode maps with legacy prefixes and
//! REX. The decoder never needs full semantics: it recovers the length,
//! operand layout (ModRM/SIB/displacement/immediate positions), whether the
//! instruction reads or writes its memory operand, and for direct branches
//! the flat target. Everything outside the supported set is `Undecodable`,
//! which downstream consumers treat as a no-instrumentation zone.

mod tables;

use tables::{Imm, MEMO, MRM, RD, REGO, SIMD_PFX, TWO_BYTE, V32, V64, WR};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Bits32,
    Bits64,
}

impl Mode {
    pub fn is64(self) -> bool {
        self == Mode::Bits64
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum InsnKind {
    Plain,
    CallDirect,
    CallIndirect,
    JmpDirect,
    JmpIndirectReg,
    JmpIndirectMem,
    Jcc,
    Ret,
}

impl InsnKind {
    pub fn is_transfer(self) -> bool {
        self != InsnKind::Plain
    }

    /// Ends a basic block with no fall-through edge.
    pub fn is_unconditional(self) -> bool {
        matches!(
            self,
            InsnKind::JmpDirect | InsnKind::JmpIndirectReg | InsnKind::JmpIndirectMem | InsnKind::Ret
        )
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Opcode {
    One(u8),
    Two(u8),
}

/// ModRM memory operand summary. `base`/`index` are extended register
/// numbers (REX applied). An operand with neither base nor index nor
/// rip-relative addressing is an absolute address.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct MemOperand {
    pub base: Option<u8>,
    pub index: Option<u8>,
    pub scale: u8,
    pub disp: i64,
    pub rip_relative: bool,
    pub seg: Option<u8>,
}

impl MemOperand {
    pub fn is_absolute(&self) -> bool {
        self.base.is_none() && self.index.is_none() && !self.rip_relative
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedInsn {
    pub rva: u64,
    pub length: u8,
    pub kind: InsnKind,
    /// Flat target for CallDirect/JmpDirect/Jcc.
    pub target: Option<u64>,
    pub reads_memory: bool,
    pub writes_memory: bool,
    pub mem: Option<MemOperand>,
    pub opcode: Opcode,
    pub modrm: Option<u8>,
    /// reg field of ModRM, REX.R applied.
    pub modrm_reg: u8,
    /// rm field when mod == 3, REX.B applied.
    pub modrm_rm: u8,
    /// Immediate value, sign-extended; rel displacement for direct branches.
    pub imm: i64,
    /// Offset/length of the ModRM displacement field within the encoding.
    pub disp_off: u8,
    pub disp_len: u8,
    /// Offset/length of the immediate (the rel field for branches).
    pub imm_off: u8,
    pub imm_len: u8,
    pub rex: u8,
    pub has66: bool,
    pub has67: bool,
    pub f2: bool,
    pub f3: bool,
}

impl DecodedInsn {
    pub fn end_rva(&self) -> u64 {
        self.rva + self.length as u64
    }

    /// Effective operand size in bytes for "v"-width operations.
    pub fn operand_size(&self) -> u8 {
        if self.rex & 8 != 0 {
            8
        } else if self.has66 {
            2
        } else {
            4
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("undecodable opcode")]
    Undecodable,
    #[error("truncated instruction")]
    Truncated,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct UndecodableRegion {
    pub start: u64,
    pub len: u64,
}

struct Prefixes {
    has66: bool,
    has67: bool,
    f2: bool,
    f3: bool,
    lock: bool,
    /// Last of F2/F3 wins SIMD instruction selection.
    last_rep: Option<u8>,
    seg: Option<u8>,
    rex: u8,
}

/// LOCK is only encodable on read-modify-write instructions with a memory
/// destination.
fn lock_allowed(opcode: Opcode, reg: u8, has_mem: bool) -> bool {
    if !has_mem {
        return false;
    }
    match opcode {
        Opcode::One(op) => match op {
            0x00 | 0x01 | 0x08 | 0x09 | 0x10 | 0x11 | 0x18 | 0x19 | 0x20 | 0x21 | 0x28 | 0x29
            | 0x30 | 0x31 => true,
            0x80 | 0x81 | 0x83 => reg != 7,
            0x86 | 0x87 => true,
            0xF6 | 0xF7 => matches!(reg, 2 | 3),
            0xFE | 0xFF => reg <= 1,
            _ => false,
        },
        Opcode::Two(op) => match op {
            0xAB | 0xB3 | 0xBB | 0xB0 | 0xB1 | 0xC0 | 0xC1 => true,
            0xBA => reg >= 5,
            0xC7 => reg == 1,
            _ => false,
        },
    }
}

pub fn decode_one(code: &[u8], rva: u64, mode: Mode) -> Result<DecodedInsn, DecodeError> {
    let is64 = mode.is64();
    let mut i = 0usize;
    let mut p = Prefixes {
        has66: false,
        has67: false,
        f2: false,
        f3: false,
        lock: false,
        last_rep: None,
        seg: None,
        rex: 0,
    };

    let opcode1 = loop {
        if i >= 15 {
            return Err(DecodeError::Undecodable);
        }
        let b = *code.get(i).ok_or(DecodeError::Truncated)?;
        match b {
            0x66 => {
                p.has66 = true;
                p.rex = 0;
            }
            0x67 => {
                p.has67 = true;
                p.rex = 0;
            }
            0xF0 => {
                p.lock = true;
                p.rex = 0;
            }
            0xF2 => {
                p.f2 = true;
                p.last_rep = Some(b);
                p.rex = 0;
            }
            0xF3 => {
                p.f3 = true;
                p.last_rep = Some(b);
                p.rex = 0;
            }
            0x26 | 0x2E | 0x36 | 0x3E | 0x64 | 0x65 => {
                p.seg = Some(b);
                p.rex = 0;
            }
            0x40..=0x4F if is64 => p.rex = b,
            _ => break b,
        }
        i += 1;
    };
    i += 1;

    let (opcode, mut ent) = if opcode1 == 0x0F {
        let b2 = *code.get(i).ok_or(DecodeError::Truncated)?;
        i += 1;
        if matches!(b2, 0x38 | 0x3A | 0x0F) {
            return Err(DecodeError::Undecodable); // three-byte maps / 3DNow
        }
        (Opcode::Two(b2), TWO_BYTE[b2 as usize])
    } else {
        (Opcode::One(opcode1), tables::ONE_BYTE[opcode1 as usize])
    };

    let valid_flag = if is64 { V64 } else { V32 };
    if ent & valid_flag == 0 {
        return Err(DecodeError::Undecodable);
    }

    // SIMD-prefix selection: reject #UD prefix/opcode combinations.
    if let Opcode::Two(op2) = opcode {
        let mask = SIMD_PFX[op2 as usize];
        if mask != 0 {
            let bit = match p.last_rep {
                Some(0xF2) => 8,
                Some(_) => 4,
                None if p.has66 => 2,
                None => 1,
            };
            if mask & bit == 0 {
                return Err(DecodeError::Undecodable);
            }
            // movq2dq / movdq2q are the register-only selections of 0F D6
            if op2 == 0xD6 && p.last_rep.is_some() {
                ent |= REGO;
            }
            // movlpd/movhpd (the 66 selections) have no register form,
            // unlike movhlps/movlhps in the same slots
            if matches!(op2, 0x12 | 0x16) && bit == 2 {
                ent |= MEMO;
            }
        }
    }

    let mut imm_kind = Imm::from_bits(ent);
    let mut reads = ent & RD != 0;
    let mut writes = ent & WR != 0;
    let mut mem: Option<MemOperand> = None;
    let mut modrm: Option<u8> = None;
    let mut modrm_reg = 0u8;
    let mut modrm_rm = 0u8;
    let mut disp_off = 0u8;
    let mut disp_len = 0u8;

    if ent & MRM != 0 {
        let m = *code.get(i).ok_or(DecodeError::Truncated)?;
        modrm = Some(m);
        i += 1;
        let md = m >> 6;
        let reg = (m >> 3) & 7;
        let rm = m & 7;
        modrm_reg = reg | ((p.rex & 4) << 1); // REX.R
        if md == 3 {
            modrm_rm = rm | ((p.rex & 1) << 3); // REX.B
        }
        if md == 3 && ent & MEMO != 0 {
            return Err(DecodeError::Undecodable);
        }
        if md != 3 && ent & REGO != 0 {
            return Err(DecodeError::Undecodable);
        }

        // group validity and per-group operand adjustments
        match opcode {
            Opcode::One(0x8C) => {
                if reg > 5 {
                    return Err(DecodeError::Undecodable);
                }
            }
            Opcode::One(0x8E) => {
                if reg == 1 || reg > 5 {
                    return Err(DecodeError::Undecodable);
                }
            }
            Opcode::One(0x8F) | Opcode::One(0xC6) | Opcode::One(0xC7) => {
                if reg != 0 {
                    return Err(DecodeError::Undecodable);
                }
            }
            Opcode::One(op @ (0xF6 | 0xF7)) => match reg {
                0 => {
                    imm_kind = if op == 0xF6 { Imm::B } else { Imm::Z };
                    reads = true;
                    writes = false;
                }
                1 => return Err(DecodeError::Undecodable),
                2 | 3 => {
                    reads = true;
                    writes = true;
                }
                _ => {
                    reads = true;
                    writes = false;
                }
            },
            Opcode::One(0xFE) => {
                if reg > 1 {
                    return Err(DecodeError::Undecodable);
                }
            }
            Opcode::One(0xFF) => match reg {
                0 | 1 => {
                    reads = true;
                    writes = true;
                }
                2 | 4 | 6 => {
                    reads = true;
                    writes = false;
                }
                3 | 5 => {
                    if md == 3 {
                        return Err(DecodeError::Undecodable); // far forms need memory
                    }
                    reads = true;
                    writes = false;
                }
                _ => return Err(DecodeError::Undecodable),
            },
            Opcode::Two(0x71) | Opcode::Two(0x72) => {
                if !matches!(reg, 2 | 4 | 6) {
                    return Err(DecodeError::Undecodable);
                }
            }
            Opcode::Two(0x73) => {
                let ok = matches!(reg, 2 | 6) || (p.has66 && matches!(reg, 3 | 7));
                if !ok {
                    return Err(DecodeError::Undecodable);
                }
            }
            Opcode::Two(0xBA) => match reg {
                4 => {
                    reads = true;
                    writes = false;
                }
                5 | 6 | 7 => {
                    reads = true;
                    writes = true;
                }
                _ => return Err(DecodeError::Undecodable),
            },
            Opcode::Two(0xC7) => {
                if reg != 1 {
                    return Err(DecodeError::Undecodable);
                }
            }
            _ => {}
        }

        if md != 3 {
            let use16 = !is64 && p.has67;
            if use16 {
                // 16-bit addressing forms
                let (base, index) = match rm {
                    0 => (Some(3u8), Some(6u8)), // [bx+si]
                    1 => (Some(3), Some(7)),
                    2 => (Some(5), Some(6)),
                    3 => (Some(5), Some(7)),
                    4 => (Some(6), None),
                    5 => (Some(7), None),
                    6 => (Some(5), None), // [bp], or disp16 when mod == 0
                    _ => (Some(3), None),
                };
                let (b, x, dl) = match (md, rm) {
                    (0, 6) => (None, None, 2u8),
                    (0, _) => (base, index, 0),
                    (1, _) => (base, index, 1),
                    _ => (base, index, 2),
                };
                disp_off = i as u8;
                disp_len = dl;
                let disp = read_disp(code, &mut i, dl as usize)?;
                mem = Some(MemOperand { base: b, index: x, scale: 1, disp, rip_relative: false, seg: p.seg });
            } else {
                let base: Option<u8>;
                let mut index = None;
                let mut scale = 1u8;
                let mut rip = false;
                let dl: u8;
                match (md, rm) {
                    (0, 5) => {
                        base = None;
                        dl = 4;
                        rip = is64;
                    }
                    (_, 4) => {
                        let sib = *code.get(i).ok_or(DecodeError::Truncated)?;
                        i += 1;
                        scale = 1 << (sib >> 6);
                        let idx = ((sib >> 3) & 7) | ((p.rex & 2) << 2); // REX.X
                        let bse = (sib & 7) | ((p.rex & 1) << 3); // REX.B
                        index = if idx == 4 { None } else { Some(idx) };
                        if md == 0 && sib & 7 == 5 {
                            base = None;
                            dl = 4;
                        } else {
                            base = Some(bse);
                            dl = match md {
                                0 => 0,
                                1 => 1,
                                _ => 4,
                            };
                        }
                    }
                    _ => {
                        base = Some(rm | ((p.rex & 1) << 3));
                        dl = match md {
                            0 => 0,
                            1 => 1,
                            _ => 4,
                        };
                    }
                }
                disp_off = i as u8;
                disp_len = dl;
                let disp = read_disp(code, &mut i, dl as usize)?;
                mem = Some(MemOperand { base, index, scale, disp, rip_relative: rip, seg: p.seg });
            }
            if matches!(opcode, Opcode::One(0x8D)) {
                // lea computes the address without touching memory
                reads = false;
                writes = false;
            }
        } else {
            reads = false;
            writes = false;
        }
    }

    // implicit-memory instructions (no ModRM operand)
    if let Opcode::One(op) = opcode {
        match op {
            0xA4 | 0xA5 => {
                reads = true;
                writes = true;
            }
            0xA6 | 0xA7 | 0xAC | 0xAD | 0xAE | 0xAF | 0x6E | 0x6F | 0xD7 => reads = true,
            0xAA | 0xAB | 0x6C | 0x6D => writes = true,
            0xA0 | 0xA1 => reads = true,
            0xA2 | 0xA3 => writes = true,
            _ => {}
        }
    }

    // 0x63: arpl (32-bit, writes r/m) vs movsxd (64-bit, reads r/m)
    if matches!(opcode, Opcode::One(0x63)) && mem.is_some() {
        reads = true;
        writes = !is64;
    }

    let rexw = p.rex & 8 != 0;
    let imm_len: u8 = match imm_kind {
        Imm::None => 0,
        Imm::B | Imm::Rel8 => 1,
        Imm::W => 2,
        Imm::Z => {
            if p.has66 && !rexw {
                2
            } else {
                4
            }
        }
        // near branches in 64-bit mode keep a 32-bit displacement
        Imm::RelZ => {
            if p.has66 && !rexw && !is64 {
                2
            } else {
                4
            }
        }
        Imm::V => {
            if rexw {
                8
            } else if p.has66 {
                2
            } else {
                4
            }
        }
        Imm::FarP => {
            if p.has66 {
                4
            } else {
                6
            }
        }
        Imm::Moffs => {
            if is64 {
                if p.has67 {
                    4
                } else {
                    8
                }
            } else if p.has67 {
                2
            } else {
                4
            }
        }
        Imm::Enter => 3,
    };
    let imm_off = i as u8;
    let imm_bytes = code.get(i..i + imm_len as usize).ok_or(DecodeError::Truncated)?;
    i += imm_len as usize;

    if i > 15 {
        return Err(DecodeError::Undecodable);
    }

    let imm: i64 = match imm_len {
        0 => 0,
        1 => imm_bytes[0] as i8 as i64,
        2 => i16::from_le_bytes(imm_bytes[..2].try_into().unwrap()) as i64,
        3 => i16::from_le_bytes(imm_bytes[..2].try_into().unwrap()) as i64, // enter frame size
        4 => i32::from_le_bytes(imm_bytes[..4].try_into().unwrap()) as i64,
        6 => i32::from_le_bytes(imm_bytes[..4].try_into().unwrap()) as i64,
        _ => i64::from_le_bytes(imm_bytes[..8].try_into().unwrap()),
    };

    // moffs forms: absolute memory operand held in the immediate
    if matches!(opcode, Opcode::One(0xA0..=0xA3)) {
        let addr = match imm_len {
            2 => u16::from_le_bytes(imm_bytes[..2].try_into().unwrap()) as i64,
            4 => u32::from_le_bytes(imm_bytes[..4].try_into().unwrap()) as i64,
            _ => i64::from_le_bytes(imm_bytes[..8].try_into().unwrap()),
        };
        mem = Some(MemOperand { base: None, index: None, scale: 1, disp: addr, rip_relative: false, seg: p.seg });
    }

    if p.lock {
        let raw_reg = modrm.map(|m| (m >> 3) & 7).unwrap_or(0);
        if !lock_allowed(opcode, raw_reg, mem.is_some()) {
            return Err(DecodeError::Undecodable);
        }
    }

    let length = i as u8;
    let kind = classify(opcode, modrm);
    let target = match kind {
        InsnKind::CallDirect | InsnKind::JmpDirect | InsnKind::Jcc => {
            let t = (rva as i64 + length as i64 + imm) as u64;
            // 16-bit operand size truncates the instruction pointer; in
            // 64-bit mode near branches ignore the 66 prefix for targets.
            let trunc16 = p.has66 && !rexw && !is64;
            Some(if trunc16 {
                t & 0xFFFF
            } else if !is64 {
                t & 0xFFFF_FFFF
            } else {
                t
            })
        }
        _ => None,
    };

    Ok(DecodedInsn {
        rva,
        length,
        kind,
        target,
        reads_memory: reads,
        writes_memory: writes,
        mem,
        opcode,
        modrm,
        modrm_reg,
        modrm_rm,
        imm,
        disp_off,
        disp_len,
        imm_off,
        imm_len,
        rex: p.rex,
        has66: p.has66,
        has67: p.has67,
        f2: p.f2,
        f3: p.f3,
    })
}

fn read_disp(code: &[u8], i: &mut usize, len: usize) -> Result<i64, DecodeError> {
    let bytes = code.get(*i..*i + len).ok_or(DecodeError::Truncated)?;
    *i += len;
    Ok(match len {
        0 => 0,
        1 => bytes[0] as i8 as i64,
        2 => i16::from_le_bytes(bytes.try_into().unwrap()) as i64,
        _ => i32::from_le_bytes(bytes.try_into().unwrap()) as i64,
    })
}

fn classify(opcode: Opcode, modrm: Option<u8>) -> InsnKind {
    match opcode {
        Opcode::One(0xE8) => InsnKind::CallDirect,
        // far direct forms have no flat target; classified with the indirect kinds
        Opcode::One(0x9A) => InsnKind::CallIndirect,
        Opcode::One(0xE9) | Opcode::One(0xEB) => InsnKind::JmpDirect,
        Opcode::One(0xEA) => InsnKind::JmpIndirectMem,
        Opcode::One(0x70..=0x7F) | Opcode::One(0xE0..=0xE3) | Opcode::Two(0x80..=0x8F) => InsnKind::Jcc,
        Opcode::One(0xC2 | 0xC3 | 0xCA | 0xCB | 0xCF) => InsnKind::Ret,
        Opcode::One(0xFF) => {
            let m = modrm.unwrap_or(0);
            match (m >> 3) & 7 {
                2 | 3 => InsnKind::CallIndirect,
                4 => {
                    if m >> 6 == 3 {
                        InsnKind::JmpIndirectReg
                    } else {
                        InsnKind::JmpIndirectMem
                    }
                }
                5 => InsnKind::JmpIndirectMem,
                _ => InsnKind::Plain,
            }
        }
        _ => InsnKind::Plain,
    }
}

/// Linear sweep: decode from `base_rva` to the end, collecting undecodable
/// byte runs (merged when adjacent). The sweep resumes at the next byte that
/// decodes; conservative consumers drop blocks that touch the regions.
pub fn sweep(code: &[u8], base_rva: u64, mode: Mode) -> (Vec<DecodedInsn>, Vec<UndecodableRegion>) {
    let mut insns = Vec::new();
    let mut regions: Vec<UndecodableRegion> = Vec::new();
    let mut i = 0usize;
    while i < code.len() {
        match decode_one(&code[i..], base_rva + i as u64, mode) {
            Ok(d) => {
                i += d.length as usize;
                insns.push(d);
            }
            Err(_) => {
                let at = base_rva + i as u64;
                match regions.last_mut() {
                    Some(r) if r.start + r.len == at => r.len += 1,
                    _ => regions.push(UndecodableRegion { start: at, len: 1 }),
                }
                i += 1;
            }
        }
    }
    (insns, regions)
}

#[cfg(test)]
mod tests;
