//! Opcode attribute tables for the one-byte and two-byte (0x0F) maps.
//!
//! Each entry packs validity, ModRM presence, mod-field restrictions,
//! memory read/write direction for the r/m operand, and the immediate
//! class. Opcodes whose decode rules are unstable across references
//! (x87 escapes, three-byte maps, system groups, prefix-selected SSE
//! slots we don't need) are left invalid: the sweep treats them as
//! undecodable regions and instrumentation conservatively skips them.

pub(crate) const V32: u16 = 1 << 0;
pub(crate) const V64: u16 = 1 << 1;
pub(crate) const MRM: u16 = 1 << 2;
/// mod != 3 required (memory operand only)
pub(crate) const MEMO: u16 = 1 << 3;
/// mod == 3 required (register operand only)
pub(crate) const REGO: u16 = 1 << 4;
/// reads its r/m memory operand
pub(crate) const RD: u16 = 1 << 5;
/// writes its r/m memory operand
pub(crate) const WR: u16 = 1 << 6;

pub(crate) const VANY: u16 = V32 | V64;

/// Immediate classes (bits 8..12 of an entry).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum Imm {
    None = 0,
    /// imm8
    B,
    /// imm16
    W,
    /// imm16/32 by operand size (REX.W keeps 32)
    Z,
    /// imm16/32/64 by operand size (B8+r with REX.W takes imm64)
    V,
    /// rel8 branch
    Rel8,
    /// rel16/32 branch by operand size
    RelZ,
    /// far pointer 16:16/16:32 by operand size
    FarP,
    /// absolute moffs, address-size wide
    Moffs,
    /// enter: imm16 + imm8
    Enter,
}

impl Imm {
    pub(crate) fn from_bits(v: u16) -> Imm {
        match (v >> 8) & 0xF {
            0 => Imm::None,
            1 => Imm::B,
            2 => Imm::W,
            3 => Imm::Z,
            4 => Imm::V,
            5 => Imm::Rel8,
            6 => Imm::RelZ,
            7 => Imm::FarP,
            8 => Imm::Moffs,
            _ => Imm::Enter,
        }
    }
}

const fn e(flags: u16, imm: Imm) -> u16 {
    flags | ((imm as u16) << 8)
}

const fn n(flags: u16) -> u16 {
    e(flags, Imm::None)
}

pub(crate) static ONE_BYTE: [u16; 256] = build_one_byte();
pub(crate) static TWO_BYTE: [u16; 256] = build_two_byte();

/// SIMD-prefix selection masks for two-byte opcodes where 66/F2/F3 pick the
/// instruction and unassigned combinations are #UD. Bit 0 = no prefix,
/// bit 1 = 66, bit 2 = F3, bit 3 = F2. Zero means "not a selecting slot":
/// stray repeat prefixes are tolerated there, as hardware does.
pub(crate) static SIMD_PFX: [u8; 256] = build_simd_pfx();

const fn build_simd_pfx() -> [u8; 256] {
    let mut m = [0u8; 256];
    const P: u8 = 1; // plain
    const P66: u8 = 2;
    const PF3: u8 = 4;
    const PF2: u8 = 8;
    const ALL: u8 = P | P66 | PF3 | PF2;
    m[0x10] = ALL;
    m[0x11] = ALL;
    m[0x12] = ALL;
    m[0x13] = P | P66;
    m[0x14] = P | P66;
    m[0x15] = P | P66;
    m[0x16] = P | P66 | PF3;
    m[0x17] = P | P66;
    m[0x28] = P | P66;
    m[0x29] = P | P66;
    m[0x2A] = ALL;
    m[0x2B] = P | P66;
    m[0x2C] = ALL;
    m[0x2D] = ALL;
    m[0x2E] = P | P66;
    m[0x2F] = P | P66;
    m[0x50] = P | P66;
    m[0x51] = ALL;
    m[0x52] = P | PF3;
    m[0x53] = P | PF3;
    m[0x54] = P | P66;
    m[0x55] = P | P66;
    m[0x56] = P | P66;
    m[0x57] = P | P66;
    m[0x58] = ALL;
    m[0x59] = ALL;
    m[0x5A] = ALL;
    m[0x5B] = P | P66 | PF3;
    m[0x5C] = ALL;
    m[0x5D] = ALL;
    m[0x5E] = ALL;
    m[0x5F] = ALL;
    let mut i = 0x60;
    while i <= 0x6E {
        m[i] = P | P66;
        i += 1;
    }
    m[0x6C] = P66; // punpcklqdq has no MMX form
    m[0x6D] = P66;
    m[0x6F] = P | P66 | PF3;
    m[0x70] = ALL;
    m[0x71] = P | P66;
    m[0x72] = P | P66;
    m[0x73] = P | P66;
    m[0x74] = P | P66;
    m[0x75] = P | P66;
    m[0x76] = P | P66;
    m[0x77] = P;
    m[0x7E] = P | P66 | PF3;
    m[0x7F] = P | P66 | PF3;
    m[0xB8] = PF3; // popcnt
    m[0xC2] = ALL;
    m[0xC3] = P; // movnti takes no mandatory prefix
    m[0xC4] = P | P66;
    m[0xC5] = P | P66;
    m[0xC6] = P | P66;
    let mut i = 0xD1;
    while i <= 0xD5 {
        m[i] = P | P66;
        i += 1;
    }
    m[0xD6] = P66 | PF3 | PF2;
    m[0xD7] = P | P66;
    let mut i = 0xD8;
    while i <= 0xE5 {
        m[i] = P | P66;
        i += 1;
    }
    m[0xE6] = P66 | PF3 | PF2;
    m[0xE7] = P | P66;
    let mut i = 0xE8;
    while i <= 0xEF {
        m[i] = P | P66;
        i += 1;
    }
    m[0xF0] = PF2; // lddqu
    let mut i = 0xF1;
    while i <= 0xF7 {
        m[i] = P | P66;
        i += 1;
    }
    let mut i = 0xF8;
    while i <= 0xFE {
        m[i] = P | P66;
        i += 1;
    }
    m
}

const fn build_one_byte() -> [u16; 256] {
    let mut t = [0u16; 256];

    // 0x00-0x3F: the eight ALU groups (add or adc sbb and sub xor cmp),
    // with push/pop seg and BCD ops on the x6/x7/xE/xF columns.
    let mut g = 0;
    while g < 8 {
        let base = g * 8;
        let rw = if g == 7 { RD } else { RD | WR }; // cmp does not write
        t[base] = e(VANY | MRM | rw, Imm::None);
        t[base + 1] = e(VANY | MRM | rw, Imm::None);
        t[base + 2] = e(VANY | MRM | RD, Imm::None);
        t[base + 3] = e(VANY | MRM | RD, Imm::None);
        t[base + 4] = e(VANY, Imm::B);
        t[base + 5] = e(VANY, Imm::Z);
        g += 1;
    }
    t[0x06] = n(V32); // push es
    t[0x07] = n(V32); // pop es
    t[0x0E] = n(V32); // push cs
    // 0x0F is the two-byte escape
    t[0x16] = n(V32);
    t[0x17] = n(V32);
    t[0x1E] = n(V32);
    t[0x1F] = n(V32);
    t[0x27] = n(V32); // daa
    t[0x2F] = n(V32); // das
    t[0x37] = n(V32); // aaa
    t[0x3F] = n(V32); // aas

    // 0x40-0x4F: inc/dec r in 32-bit mode; REX prefixes in 64-bit mode
    // (the prefix scanner consumes them before table lookup).
    let mut i = 0x40;
    while i <= 0x4F {
        t[i] = n(V32);
        i += 1;
    }
    // 0x50-0x5F push/pop r
    let mut i = 0x50;
    while i <= 0x5F {
        t[i] = n(VANY);
        i += 1;
    }
    t[0x60] = n(V32); // pusha
    t[0x61] = n(V32); // popa
    t[0x62] = n(V32 | MRM | MEMO | RD); // bound
    t[0x63] = n(VANY | MRM); // arpl (32) / movsxd (64); direction fixed up in code
    // 0x64-0x67: segment/size prefixes
    t[0x68] = e(VANY, Imm::Z); // push
    t[0x69] = e(VANY | MRM | RD, Imm::Z); // imul Gv,Ev,Iz
    t[0x6A] = e(VANY, Imm::B);
    t[0x6B] = e(VANY | MRM | RD, Imm::B);
    t[0x6C] = n(VANY); // ins/outs: implicit string memory, flagged in code
    t[0x6D] = n(VANY);
    t[0x6E] = n(VANY);
    t[0x6F] = n(VANY);
    // 0x70-0x7F Jcc rel8
    let mut i = 0x70;
    while i <= 0x7F {
        t[i] = e(VANY, Imm::Rel8);
        i += 1;
    }
    t[0x80] = e(VANY | MRM | RD | WR, Imm::B); // grp1 Eb,Ib (cmp fixed in code)
    t[0x81] = e(VANY | MRM | RD | WR, Imm::Z);
    // 0x82: undocumented grp1 alias, left undecodable
    t[0x83] = e(VANY | MRM | RD | WR, Imm::B);
    t[0x84] = n(VANY | MRM | RD); // test
    t[0x85] = n(VANY | MRM | RD);
    t[0x86] = n(VANY | MRM | RD | WR); // xchg
    t[0x87] = n(VANY | MRM | RD | WR);
    t[0x88] = n(VANY | MRM | WR); // mov Eb,Gb
    t[0x89] = n(VANY | MRM | WR);
    t[0x8A] = n(VANY | MRM | RD);
    t[0x8B] = n(VANY | MRM | RD);
    t[0x8C] = n(VANY | MRM | WR); // mov Ev,Sw (sreg checked in code)
    t[0x8D] = n(VANY | MRM | MEMO); // lea: address only, no access
    t[0x8E] = n(VANY | MRM | RD); // mov Sw,Ew
    t[0x8F] = n(VANY | MRM | WR); // pop Ev (grp1a /0)
    let mut i = 0x90;
    while i <= 0x97 {
        t[i] = n(VANY); // nop / xchg eAX,r
        i += 1;
    }
    t[0x98] = n(VANY); // cbw/cwde/cdqe
    t[0x99] = n(VANY); // cwd/cdq/cqo
    t[0x9A] = e(V32, Imm::FarP); // call far ptr16:z
    t[0x9B] = n(VANY); // wait
    t[0x9C] = n(VANY); // pushf
    t[0x9D] = n(VANY); // popf
    t[0x9E] = n(VANY); // sahf
    t[0x9F] = n(VANY); // lahf
    t[0xA0] = e(VANY, Imm::Moffs); // mov AL, moffs
    t[0xA1] = e(VANY, Imm::Moffs);
    t[0xA2] = e(VANY, Imm::Moffs);
    t[0xA3] = e(VANY, Imm::Moffs);
    t[0xA4] = n(VANY); // movs
    t[0xA5] = n(VANY);
    t[0xA6] = n(VANY); // cmps
    t[0xA7] = n(VANY);
    t[0xA8] = e(VANY, Imm::B); // test AL, Ib
    t[0xA9] = e(VANY, Imm::Z);
    t[0xAA] = n(VANY); // stos
    t[0xAB] = n(VANY);
    t[0xAC] = n(VANY); // lods
    t[0xAD] = n(VANY);
    t[0xAE] = n(VANY); // scas
    t[0xAF] = n(VANY);
    let mut i = 0xB0;
    while i <= 0xB7 {
        t[i] = e(VANY, Imm::B); // mov r8, imm8
        i += 1;
    }
    let mut i = 0xB8;
    while i <= 0xBF {
        t[i] = e(VANY, Imm::V); // mov r, imm (imm64 with REX.W)
        i += 1;
    }
    t[0xC0] = e(VANY | MRM | RD | WR, Imm::B); // grp2 shifts
    t[0xC1] = e(VANY | MRM | RD | WR, Imm::B);
    t[0xC2] = e(VANY, Imm::W); // ret imm16
    t[0xC3] = n(VANY); // ret
    t[0xC4] = n(V32 | MRM | MEMO | RD); // les (VEX escape in 64-bit)
    t[0xC5] = n(V32 | MRM | MEMO | RD); // lds
    t[0xC6] = e(VANY | MRM | WR, Imm::B); // grp11 /0 mov Eb,Ib
    t[0xC7] = e(VANY | MRM | WR, Imm::Z);
    t[0xC8] = e(VANY, Imm::Enter);
    t[0xC9] = n(VANY); // leave
    t[0xCA] = e(VANY, Imm::W); // retf imm16
    t[0xCB] = n(VANY); // retf
    t[0xCC] = n(VANY); // int3
    t[0xCD] = e(VANY, Imm::B); // int imm8
    t[0xCE] = n(V32); // into
    t[0xCF] = n(VANY); // iret
    t[0xD0] = n(VANY | MRM | RD | WR); // grp2, shift by 1
    t[0xD1] = n(VANY | MRM | RD | WR);
    t[0xD2] = n(VANY | MRM | RD | WR); // shift by cl
    t[0xD3] = n(VANY | MRM | RD | WR);
    t[0xD4] = e(V32, Imm::B); // aam
    t[0xD5] = e(V32, Imm::B); // aad
    // 0xD6 salc: undocumented, left undecodable
    t[0xD7] = n(VANY); // xlat (implicit [rBX+AL] read, flagged in code)
    // 0xD8-0xDF x87 escapes: undecodable in v1
    t[0xE0] = e(VANY, Imm::Rel8); // loopne
    t[0xE1] = e(VANY, Imm::Rel8); // loope
    t[0xE2] = e(VANY, Imm::Rel8); // loop
    t[0xE3] = e(VANY, Imm::Rel8); // jcxz/jecxz/jrcxz
    t[0xE4] = e(VANY, Imm::B); // in AL, imm8
    t[0xE5] = e(VANY, Imm::B);
    t[0xE6] = e(VANY, Imm::B); // out imm8, AL
    t[0xE7] = e(VANY, Imm::B);
    t[0xE8] = e(VANY, Imm::RelZ); // call rel
    t[0xE9] = e(VANY, Imm::RelZ); // jmp rel
    t[0xEA] = e(V32, Imm::FarP); // jmp far
    t[0xEB] = e(VANY, Imm::Rel8); // jmp rel8
    t[0xEC] = n(VANY); // in AL, dx
    t[0xED] = n(VANY);
    t[0xEE] = n(VANY);
    t[0xEF] = n(VANY);
    // 0xF0/F2/F3 prefixes
    t[0xF1] = n(VANY); // int1
    t[0xF4] = n(VANY); // hlt
    t[0xF5] = n(VANY); // cmc
    t[0xF6] = n(VANY | MRM); // grp3 Eb (imm + direction by /reg)
    t[0xF7] = n(VANY | MRM);
    t[0xF8] = n(VANY); // clc
    t[0xF9] = n(VANY); // stc
    t[0xFA] = n(VANY); // cli
    t[0xFB] = n(VANY); // sti
    t[0xFC] = n(VANY); // cld
    t[0xFD] = n(VANY); // std
    t[0xFE] = n(VANY | MRM | RD | WR); // grp4 inc/dec Eb
    t[0xFF] = n(VANY | MRM); // grp5 (flags by /reg)
    t
}

const fn build_two_byte() -> [u16; 256] {
    let mut t = [0u16; 256];
    t[0x02] = n(VANY | MRM | RD); // lar
    t[0x03] = n(VANY | MRM | RD); // lsl
    t[0x06] = n(VANY); // clts
    t[0x08] = n(VANY); // invd
    t[0x09] = n(VANY); // wbinvd
    t[0x0B] = n(VANY); // ud2
    t[0x10] = n(VANY | MRM | RD); // movups/movss/movupd/movsd load
    t[0x11] = n(VANY | MRM | WR); // store form
    t[0x12] = n(VANY | MRM | RD);
    t[0x13] = n(VANY | MRM | MEMO | WR);
    t[0x14] = n(VANY | MRM | RD);
    t[0x15] = n(VANY | MRM | RD);
    t[0x16] = n(VANY | MRM | RD);
    t[0x17] = n(VANY | MRM | MEMO | WR);
    t[0x1F] = n(VANY | MRM); // long nop
    t[0x28] = n(VANY | MRM | RD); // movaps load
    t[0x29] = n(VANY | MRM | WR);
    t[0x2A] = n(VANY | MRM | RD); // cvtsi2ss etc
    t[0x2B] = n(VANY | MRM | MEMO | WR); // movntps
    t[0x2C] = n(VANY | MRM | RD);
    t[0x2D] = n(VANY | MRM | RD);
    t[0x2E] = n(VANY | MRM | RD); // ucomiss
    t[0x2F] = n(VANY | MRM | RD); // comiss
    t[0x30] = n(VANY); // wrmsr
    t[0x31] = n(VANY); // rdtsc
    t[0x32] = n(VANY); // rdmsr
    t[0x33] = n(VANY); // rdpmc
    let mut i = 0x40;
    while i <= 0x4F {
        t[i] = n(VANY | MRM | RD); // cmovcc
        i += 1;
    }
    t[0x50] = n(VANY | MRM | REGO); // movmskps
    let mut i = 0x51;
    while i <= 0x5F {
        t[i] = n(VANY | MRM | RD); // sse arithmetic
        i += 1;
    }
    let mut i = 0x60;
    while i <= 0x6F {
        t[i] = n(VANY | MRM | RD); // punpck/movd/movq/movdqa loads
        i += 1;
    }
    t[0x70] = e(VANY | MRM | RD, Imm::B); // pshufw
    t[0x71] = e(VANY | MRM | REGO, Imm::B); // grp12 (reg field checked)
    t[0x72] = e(VANY | MRM | REGO, Imm::B); // grp13
    t[0x73] = e(VANY | MRM | REGO, Imm::B); // grp14
    t[0x74] = n(VANY | MRM | RD); // pcmpeq
    t[0x75] = n(VANY | MRM | RD);
    t[0x76] = n(VANY | MRM | RD);
    t[0x77] = n(VANY); // emms
    t[0x7E] = n(VANY | MRM | WR); // movd Ed,Pd store form
    t[0x7F] = n(VANY | MRM | WR); // movq/movdqa store
    let mut i = 0x80;
    while i <= 0x8F {
        t[i] = e(VANY, Imm::RelZ); // Jcc rel32
        i += 1;
    }
    let mut i = 0x90;
    while i <= 0x9F {
        t[i] = n(VANY | MRM | WR); // setcc Eb
        i += 1;
    }
    t[0xA0] = n(VANY); // push fs
    t[0xA1] = n(VANY); // pop fs
    t[0xA2] = n(VANY); // cpuid
    t[0xA3] = n(VANY | MRM | RD); // bt Ev,Gv
    t[0xA4] = e(VANY | MRM | RD | WR, Imm::B); // shld Ev,Gv,Ib
    t[0xA5] = n(VANY | MRM | RD | WR); // shld Ev,Gv,CL
    t[0xA8] = n(VANY); // push gs
    t[0xA9] = n(VANY); // pop gs
    t[0xAB] = n(VANY | MRM | RD | WR); // bts
    t[0xAC] = e(VANY | MRM | RD | WR, Imm::B); // shrd
    t[0xAD] = n(VANY | MRM | RD | WR);
    t[0xAF] = n(VANY | MRM | RD); // imul Gv,Ev
    t[0xB0] = n(VANY | MRM | RD | WR); // cmpxchg Eb
    t[0xB1] = n(VANY | MRM | RD | WR);
    t[0xB2] = n(VANY | MRM | MEMO | RD); // lss
    t[0xB3] = n(VANY | MRM | RD | WR); // btr
    t[0xB4] = n(VANY | MRM | MEMO | RD); // lfs
    t[0xB5] = n(VANY | MRM | MEMO | RD); // lgs
    t[0xB6] = n(VANY | MRM | RD); // movzx Gv,Eb
    t[0xB7] = n(VANY | MRM | RD); // movzx Gv,Ew
    t[0xB8] = n(VANY | MRM | RD); // popcnt (F3-selected via the prefix mask)
    t[0xBA] = e(VANY | MRM, Imm::B); // grp8 bt/bts/btr/btc (reg checked)
    t[0xBB] = n(VANY | MRM | RD | WR); // btc
    t[0xBC] = n(VANY | MRM | RD); // bsf / tzcnt
    t[0xBD] = n(VANY | MRM | RD); // bsr / lzcnt
    t[0xBE] = n(VANY | MRM | RD); // movsx Gv,Eb
    t[0xBF] = n(VANY | MRM | RD);
    t[0xC0] = n(VANY | MRM | RD | WR); // xadd Eb
    t[0xC1] = n(VANY | MRM | RD | WR);
    t[0xC2] = e(VANY | MRM | RD, Imm::B); // cmpps
    t[0xC3] = n(VANY | MRM | MEMO | WR); // movnti (no mandatory prefix allowed)
    t[0xC4] = e(VANY | MRM | RD, Imm::B); // pinsrw
    t[0xC5] = e(VANY | MRM | REGO, Imm::B); // pextrw
    t[0xC6] = e(VANY | MRM | RD, Imm::B); // shufps
    t[0xC7] = n(VANY | MRM | MEMO | RD | WR); // grp9 /1 cmpxchg8b/16b
    let mut i = 0xC8;
    while i <= 0xCF {
        t[i] = n(VANY); // bswap r
        i += 1;
    }
    let mut i = 0xD1;
    while i <= 0xD5 {
        t[i] = n(VANY | MRM | RD);
        i += 1;
    }
    // 0xD6 movq store: requires 66/F3/F2, fixed up in code
    t[0xD6] = n(VANY | MRM | WR);
    t[0xD7] = n(VANY | MRM | REGO | RD); // pmovmskb
    let mut i = 0xD8;
    while i <= 0xE5 {
        t[i] = n(VANY | MRM | RD);
        i += 1;
    }
    // 0xE6 cvt family requires a mandatory prefix, fixed up in code
    t[0xE6] = n(VANY | MRM | RD);
    t[0xE7] = n(VANY | MRM | MEMO | WR); // movntq
    let mut i = 0xE8;
    while i <= 0xEF {
        t[i] = n(VANY | MRM | RD);
        i += 1;
    }
    // 0xF0 lddqu requires F2
    t[0xF0] = n(VANY | MRM | MEMO | RD);
    let mut i = 0xF1;
    while i <= 0xF6 {
        t[i] = n(VANY | MRM | RD);
        i += 1;
    }
    t[0xF7] = n(VANY | MRM | REGO | RD); // maskmovq
    let mut i = 0xF8;
    while i <= 0xFE {
        t[i] = n(VANY | MRM | RD);
        i += 1;
    }
    t
}
