//! A tiny hand-rolled x86/x64 assembler for building test programs. Encodes
//! straight from the instruction-set reference; shares nothing with the
//! production decoder so the two can be played against each other.

use std::collections::HashMap;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Bits32,
    Bits64,
}

pub const EAX: u8 = 0;
pub const ECX: u8 = 1;
pub const EDX: u8 = 2;
pub const EBX: u8 = 3;
pub const ESP: u8 = 4;
pub const EBP: u8 = 5;
pub const ESI: u8 = 6;
pub const EDI: u8 = 7;

// condition codes (tttn), used as jcc opcode low nibble
pub const CC_O: u8 = 0x0;
pub const CC_NO: u8 = 0x1;
pub const CC_B: u8 = 0x2;
pub const CC_AE: u8 = 0x3;
pub const CC_E: u8 = 0x4;
pub const CC_NE: u8 = 0x5;
pub const CC_BE: u8 = 0x6;
pub const CC_A: u8 = 0x7;
pub const CC_S: u8 = 0x8;
pub const CC_NS: u8 = 0x9;
pub const CC_L: u8 = 0xC;
pub const CC_GE: u8 = 0xD;
pub const CC_LE: u8 = 0xE;
pub const CC_G: u8 = 0xF;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Label(usize);

enum Fixup {
    Rel32 { at: usize, label: Label },
    Rel8 { at: usize, label: Label },
    /// 32-bit absolute cell that holds `va`; recorded so callers can emit
    /// relocation entries for it.
    Abs32 { at: usize },
}

pub struct Asm {
    pub mode: Mode,
    code: Vec<u8>,
    labels: HashMap<Label, usize>,
    next_label: usize,
    fixups: Vec<Fixup>,
    abs_offsets: Vec<usize>,
}

impl Asm {
    pub fn new(mode: Mode) -> Self {
        Asm {
            mode,
            code: Vec::new(),
            labels: HashMap::new(),
            next_label: 0,
            fixups: Vec::new(),
            abs_offsets: Vec::new(),
        }
    }

    pub fn is64(&self) -> bool {
        self.mode == Mode::Bits64
    }

    pub fn label(&mut self) -> Label {
        self.next_label += 1;
        Label(self.next_label - 1)
    }

    pub fn bind(&mut self, l: Label) {
        let here = self.code.len();
        assert!(self.labels.insert(l, here).is_none(), "label bound twice");
    }

    pub fn here(&self) -> usize {
        self.code.len()
    }

    fn u8(&mut self, b: u8) {
        self.code.push(b);
    }

    fn u32(&mut self, v: u32) {
        self.code.extend_from_slice(&v.to_le_bytes());
    }

    fn u64v(&mut self, v: u64) {
        self.code.extend_from_slice(&v.to_le_bytes());
    }

    /// REX prefix when needed; `w` forces REX.W, `r`/`b`/`x` are extended-register bits.
    fn rex(&mut self, w: bool, r: u8, x: u8, b: u8) {
        if self.mode == Mode::Bits64 {
            let mut v = 0x40u8;
            if w {
                v |= 8;
            }
            if r >= 8 {
                v |= 4;
            }
            if x >= 8 {
                v |= 2;
            }
            if b >= 8 {
                v |= 1;
            }
            if v != 0x40 || w {
                self.u8(v);
            }
        } else {
            assert!(r < 8 && x < 8 && b < 8, "extended register in 32-bit mode");
        }
    }

    fn modrm(&mut self, md: u8, reg: u8, rm: u8) {
        self.u8((md << 6) | ((reg & 7) << 3) | (rm & 7));
    }

    /// [base + disp32] with mod=10. Avoids rsp/r12 base SIB handling by
    /// emitting the SIB form for those.
    fn mem_base_disp(&mut self, reg: u8, base: u8, disp: i32) {
        if base & 7 == 4 {
            self.modrm(2, reg, 4);
            self.u8(0x24); // SIB: scale 0, no index, base = rsp/r12
        } else {
            self.modrm(2, reg, base);
        }
        self.u32(disp as u32);
    }

    // ---- moves ----

    /// mov r32, imm32 (zero-extends in 64-bit mode).
    pub fn mov_ri32(&mut self, r: u8, imm: u32) {
        self.rex(false, 0, 0, r);
        self.u8(0xB8 + (r & 7));
        self.u32(imm);
    }

    /// mov r32, imm32 where the immediate is an absolute VA needing a reloc.
    pub fn mov_ri32_abs(&mut self, r: u8, va: u32) {
        assert_eq!(self.mode, Mode::Bits32);
        self.u8(0xB8 + r);
        let at = self.code.len();
        self.fixups.push(Fixup::Abs32 { at });
        self.u32(va);
    }

    pub fn mov_ri64(&mut self, r: u8, imm: u64) {
        assert_eq!(self.mode, Mode::Bits64);
        self.rex(true, 0, 0, r);
        self.u8(0xB8 + (r & 7));
        self.u64v(imm);
    }

    /// mov dst, src at native width.
    pub fn mov_rr(&mut self, dst: u8, src: u8) {
        self.rex(self.is64(), src, 0, dst);
        self.u8(0x89);
        self.modrm(3, src, dst);
    }

    /// mov [base+disp], src (native width)
    pub fn store(&mut self, base: u8, disp: i32, src: u8) {
        self.rex(self.is64(), src, 0, base);
        self.u8(0x89);
        self.mem_base_disp(src, base, disp);
    }

    /// mov dst, [base+disp] (native width)
    pub fn load(&mut self, dst: u8, base: u8, disp: i32) {
        self.rex(self.is64(), dst, 0, base);
        self.u8(0x8B);
        self.mem_base_disp(dst, base, disp);
    }

    /// mov byte [base+disp], imm8
    pub fn store8_imm(&mut self, base: u8, disp: i32, imm: u8) {
        self.rex(false, 0, 0, base);
        self.u8(0xC6);
        self.mem_base_disp(0, base, disp);
        self.u8(imm);
    }

    /// mov dword [base+disp], imm32
    pub fn store32_imm(&mut self, base: u8, disp: i32, imm: u32) {
        self.rex(false, 0, 0, base);
        self.u8(0xC7);
        self.mem_base_disp(0, base, disp);
        self.u32(imm);
    }

    /// movzx dst, byte [base+disp]
    pub fn movzx8(&mut self, dst: u8, base: u8, disp: i32) {
        self.rex(false, dst, 0, base);
        self.u8(0x0F);
        self.u8(0xB6);
        self.mem_base_disp(dst, base, disp);
    }

    /// lea dst, [rip + label] (64-bit only)
    pub fn lea_rip(&mut self, dst: u8, label: Label) {
        assert_eq!(self.mode, Mode::Bits64);
        self.rex(true, dst, 0, 0);
        self.u8(0x8D);
        self.modrm(0, dst, 5);
        let at = self.code.len();
        self.fixups.push(Fixup::Rel32 { at, label });
        self.u32(0);
    }

    /// lea dst, [rip + disp] targeting an rva outside the text bytes.
    /// `text_rva` is where these code bytes will be placed.
    pub fn lea_rip_rva(&mut self, dst: u8, target_rva: u32, text_rva: u32) {
        assert_eq!(self.mode, Mode::Bits64);
        self.rex(true, dst, 0, 0);
        self.u8(0x8D);
        self.modrm(0, dst, 5);
        let next_rva = text_rva as i64 + self.code.len() as i64 + 4;
        self.u32((target_rva as i64 - next_rva) as i32 as u32);
    }

    /// mov dst32, [rip + disp] load from an rva (64-bit only).
    pub fn load32_rip_rva(&mut self, dst: u8, target_rva: u32, text_rva: u32) {
        assert_eq!(self.mode, Mode::Bits64);
        self.rex(false, dst, 0, 0);
        self.u8(0x8B);
        self.modrm(0, dst, 5);
        let next_rva = text_rva as i64 + self.code.len() as i64 + 4;
        self.u32((target_rva as i64 - next_rva) as i32 as u32);
    }

    /// mov dst32, [abs32] (32-bit only); the cell address is recorded for
    /// relocation.
    pub fn load32_abs(&mut self, dst: u8, va: u32) {
        assert_eq!(self.mode, Mode::Bits32);
        self.u8(0x8B);
        self.modrm(0, dst, 5);
        let at = self.code.len();
        self.fixups.push(Fixup::Abs32 { at });
        self.u32(va);
    }

    /// movsxd dst64, dword [base + index*4] (64-bit only)
    pub fn movsxd_table(&mut self, dst: u8, base: u8, index: u8) {
        assert_eq!(self.mode, Mode::Bits64);
        self.rex(true, dst, index, base);
        self.u8(0x63);
        self.modrm(0, dst, 4);
        self.u8((2 << 6) | ((index & 7) << 3) | (base & 7));
    }

    // ---- alu ----

    fn alu_rr(&mut self, op: u8, dst: u8, src: u8) {
        self.rex(self.is64(), src, 0, dst);
        self.u8(op);
        self.modrm(3, src, dst);
    }

    fn alu_ri(&mut self, grp: u8, dst: u8, imm: u32) {
        self.rex(self.is64(), 0, 0, dst);
        self.u8(0x81);
        self.modrm(3, grp, dst);
        self.u32(imm);
    }

    pub fn add_rr(&mut self, d: u8, s: u8) {
        self.alu_rr(0x01, d, s);
    }
    pub fn sub_rr(&mut self, d: u8, s: u8) {
        self.alu_rr(0x29, d, s);
    }
    pub fn xor_rr(&mut self, d: u8, s: u8) {
        self.alu_rr(0x31, d, s);
    }
    pub fn and_rr(&mut self, d: u8, s: u8) {
        self.alu_rr(0x21, d, s);
    }
    pub fn or_rr(&mut self, d: u8, s: u8) {
        self.alu_rr(0x09, d, s);
    }
    pub fn cmp_rr(&mut self, d: u8, s: u8) {
        self.alu_rr(0x39, d, s);
    }
    pub fn test_rr(&mut self, d: u8, s: u8) {
        self.alu_rr(0x85, d, s);
    }
    pub fn add_ri(&mut self, d: u8, imm: u32) {
        self.alu_ri(0, d, imm);
    }
    pub fn or_ri(&mut self, d: u8, imm: u32) {
        self.alu_ri(1, d, imm);
    }
    pub fn and_ri(&mut self, d: u8, imm: u32) {
        self.alu_ri(4, d, imm);
    }
    pub fn sub_ri(&mut self, d: u8, imm: u32) {
        self.alu_ri(5, d, imm);
    }
    pub fn xor_ri(&mut self, d: u8, imm: u32) {
        self.alu_ri(6, d, imm);
    }
    pub fn cmp_ri(&mut self, d: u8, imm: u32) {
        self.alu_ri(7, d, imm);
    }

    pub fn inc(&mut self, r: u8) {
        self.rex(self.is64(), 0, 0, r);
        self.u8(0xFF);
        self.modrm(3, 0, r);
    }

    pub fn dec(&mut self, r: u8) {
        self.rex(self.is64(), 0, 0, r);
        self.u8(0xFF);
        self.modrm(3, 1, r);
    }

    /// Two-byte xor r32, r32 — handy for making sub-5-byte blocks.
    pub fn xor_rr32(&mut self, d: u8, s: u8) {
        self.u8(0x31);
        self.modrm(3, s, d);
    }

    pub fn push(&mut self, r: u8) {
        self.rex(false, 0, 0, r);
        self.u8(0x50 + (r & 7));
    }

    pub fn pop(&mut self, r: u8) {
        self.rex(false, 0, 0, r);
        self.u8(0x58 + (r & 7));
    }

    pub fn nop(&mut self) {
        self.u8(0x90);
    }

    pub fn int3(&mut self) {
        self.u8(0xCC);
    }

    pub fn ret(&mut self) {
        self.u8(0xC3);
    }

    // ---- control flow ----

    pub fn jmp(&mut self, l: Label) {
        self.u8(0xE9);
        let at = self.code.len();
        self.fixups.push(Fixup::Rel32 { at, label: l });
        self.u32(0);
    }

    pub fn jmp8(&mut self, l: Label) {
        self.u8(0xEB);
        let at = self.code.len();
        self.fixups.push(Fixup::Rel8 { at, label: l });
        self.u8(0);
    }

    pub fn jcc(&mut self, cc: u8, l: Label) {
        self.u8(0x0F);
        self.u8(0x80 + cc);
        let at = self.code.len();
        self.fixups.push(Fixup::Rel32 { at, label: l });
        self.u32(0);
    }

    pub fn jcc8(&mut self, cc: u8, l: Label) {
        self.u8(0x70 + cc);
        let at = self.code.len();
        self.fixups.push(Fixup::Rel8 { at, label: l });
        self.u8(0);
    }

    pub fn call(&mut self, l: Label) {
        self.u8(0xE8);
        let at = self.code.len();
        self.fixups.push(Fixup::Rel32 { at, label: l });
        self.u32(0);
    }

    pub fn jmp_reg(&mut self, r: u8) {
        self.rex(false, 0, 0, r);
        self.u8(0xFF);
        self.modrm(3, 4, r);
    }

    /// jmp [index*4 + table_va] — the 32-bit jump-table dispatch. The table
    /// address is absolute and recorded for relocation.
    pub fn jmp_table32(&mut self, index: u8, table_va: u32) {
        assert_eq!(self.mode, Mode::Bits32);
        self.u8(0xFF);
        self.modrm(0, 4, 4);
        self.u8((2 << 6) | (index << 3) | 5);
        let at = self.code.len();
        self.fixups.push(Fixup::Abs32 { at });
        self.u32(table_va);
    }

    /// Resolve fixups; returns (code, offsets of absolute 32-bit cells).
    pub fn finish(mut self) -> (Vec<u8>, Vec<usize>) {
        for f in &self.fixups {
            match *f {
                Fixup::Rel32 { at, label } => {
                    let target = *self.labels.get(&label).expect("unbound label");
                    let rel = target as i64 - (at as i64 + 4);
                    self.code[at..at + 4].copy_from_slice(&(rel as i32).to_le_bytes());
                }
                Fixup::Rel8 { at, label } => {
                    let target = *self.labels.get(&label).expect("unbound label");
                    let rel = target as i64 - (at as i64 + 1);
                    assert!((-128..=127).contains(&rel), "rel8 out of range");
                    self.code[at] = rel as i8 as u8;
                }
                Fixup::Abs32 { at } => self.abs_offsets.push(at),
            }
        }
        (self.code, self.abs_offsets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_branch_resolves() {
        let mut a = Asm::new(Mode::Bits32);
        let done = a.label();
        a.xor_rr32(EAX, EAX);
        a.jcc8(CC_E, done);
        a.inc(ECX);
        a.bind(done);
        a.ret();
        let (code, _) = a.finish();
        assert_eq!(code, vec![0x31, 0xC0, 0x74, 0x02, 0xFF, 0xC1, 0xC3]);
    }

    #[test]
    fn abs_cells_reported() {
        let mut a = Asm::new(Mode::Bits32);
        a.mov_ri32_abs(ESI, 0x40_3000);
        a.ret();
        let (code, abs) = a.finish();
        assert_eq!(code[0], 0xBE);
        assert_eq!(abs, vec![1]);
    }

    #[test]
    fn rex_store_64() {
        let mut a = Asm::new(Mode::Bits64);
        a.store(ESI, 8, EAX); // mov [rsi+8], rax
        let (code, _) = a.finish();
        assert_eq!(code, vec![0x48, 0x89, 0x86, 0x08, 0x00, 0x00, 0x00]);
    }
}
