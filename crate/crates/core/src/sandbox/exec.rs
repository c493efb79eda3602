//! One-instruction interpreter step over the fixture subset: mov, lea,
//! add/sub/xor/and/or/cmp/test, inc/dec, push/pop, pushf/popf,
//! movzx/movsx/movsxd, and the near control transfers. Flag modeling
//! covers ZF/SF/CF/OF; parity-dependent branches fault.

use super::{FaultKind, SandboxState};
use crate::decode::{DecodedInsn, MemOperand, Mode, Opcode};

type Fault = (FaultKind, u64);

fn mask(size: u8) -> u64 {
    match size {
        1 => 0xFF,
        2 => 0xFFFF,
        4 => 0xFFFF_FFFF,
        _ => u64::MAX,
    }
}

fn msb(v: u64, size: u8) -> bool {
    v >> (size * 8 - 1) & 1 != 0
}

fn sext(v: u64, size: u8) -> u64 {
    match size {
        1 => v as u8 as i8 as i64 as u64,
        2 => v as u16 as i16 as i64 as u64,
        4 => v as u32 as i32 as i64 as u64,
        _ => v,
    }
}

struct Cpu<'a> {
    st: &'a mut SandboxState,
    t: usize,
}

impl Cpu<'_> {
    fn is64(&self) -> bool {
        self.st.mode == Mode::Bits64
    }

    fn ptr(&self) -> u8 {
        if self.is64() { 8 } else { 4 }
    }

    fn reg_read(&self, idx: u8, size: u8, rex: u8) -> u64 {
        let regs = &self.st.threads[self.t].regs;
        if size == 1 && rex == 0 && (4..8).contains(&idx) {
            // legacy high-byte registers AH/CH/DH/BH
            return (regs[(idx - 4) as usize] >> 8) & 0xFF;
        }
        regs[idx as usize] & mask(size)
    }

    fn reg_write(&mut self, idx: u8, size: u8, rex: u8, val: u64) {
        let regs = &mut self.st.threads[self.t].regs;
        if size == 1 && rex == 0 && (4..8).contains(&idx) {
            let r = &mut regs[(idx - 4) as usize];
            *r = (*r & !0xFF00) | ((val & 0xFF) << 8);
            return;
        }
        let r = &mut regs[idx as usize];
        match size {
            1 => *r = (*r & !0xFF) | (val & 0xFF),
            2 => *r = (*r & !0xFFFF) | (val & 0xFFFF),
            // 32-bit register writes clear the upper half in long mode and
            // are full width in 32-bit mode
            4 => *r = val & 0xFFFF_FFFF,
            _ => *r = val,
        }
    }

    fn addr_of(&self, insn: &DecodedInsn, mem: &MemOperand) -> Result<u64, Fault> {
        if insn.has67 {
            return Err((FaultKind::UnsupportedInsn, insn.rva));
        }
        let th = &self.st.threads[self.t];
        let amask = if self.is64() { u64::MAX } else { 0xFFFF_FFFF };
        let mut addr = mem.disp as u64;
        if let Some(b) = mem.base {
            addr = addr.wrapping_add(th.regs[b as usize]);
        }
        if let Some(i) = mem.index {
            addr = addr.wrapping_add(th.regs[i as usize].wrapping_mul(mem.scale as u64));
        }
        if mem.rip_relative {
            addr = addr.wrapping_add(insn.end_rva());
        }
        match mem.seg {
            Some(0x64) => addr = addr.wrapping_add(th.seg_base[0]),
            Some(0x65) => addr = addr.wrapping_add(th.seg_base[1]),
            _ => {}
        }
        Ok(addr & amask)
    }

    fn read_rm(&self, insn: &DecodedInsn, size: u8) -> Result<u64, Fault> {
        match insn.mem {
            Some(m) => {
                let addr = self.addr_of(insn, &m)?;
                self.st.mem.read_uint(addr, size as usize)
            }
            None => Ok(self.reg_read(insn.modrm_rm, size, insn.rex)),
        }
    }

    fn write_rm(&mut self, insn: &DecodedInsn, size: u8, val: u64) -> Result<(), Fault> {
        match insn.mem {
            Some(m) => {
                let addr = self.addr_of(insn, &m)?;
                self.st.mem.write_uint(addr, val, size as usize)
            }
            None => {
                self.reg_write(insn.modrm_rm, size, insn.rex, val);
                Ok(())
            }
        }
    }

    fn push(&mut self, val: u64) -> Result<(), Fault> {
        let p = self.ptr() as u64;
        let th = &mut self.st.threads[self.t];
        th.regs[super::REG_SP] = th.regs[super::REG_SP].wrapping_sub(p);
        let sp = th.regs[super::REG_SP];
        self.st.mem.write_uint(sp, val, p as usize)
    }

    fn pop(&mut self) -> Result<u64, Fault> {
        let p = self.ptr() as u64;
        let sp = self.st.threads[self.t].regs[super::REG_SP];
        let v = self.st.mem.read_uint(sp, p as usize)?;
        self.st.threads[self.t].regs[super::REG_SP] = sp.wrapping_add(p);
        Ok(v)
    }

    fn flags(&mut self) -> &mut super::Flags {
        &mut self.st.threads[self.t].flags
    }

    fn set_logic_flags(&mut self, res: u64, size: u8) {
        let f = self.flags();
        f.zf = res & mask(size) == 0;
        f.sf = msb(res & mask(size), size);
        f.cf = false;
        f.of = false;
    }

    fn set_add_flags(&mut self, a: u64, b: u64, size: u8) -> u64 {
        let m = mask(size);
        let res = a.wrapping_add(b) & m;
        let f = self.flags();
        f.zf = res == 0;
        f.sf = msb(res, size);
        f.cf = res < (a & m);
        f.of = msb((a ^ res) & (b ^ res), size);
        res
    }

    fn set_sub_flags(&mut self, a: u64, b: u64, size: u8) -> u64 {
        let m = mask(size);
        let res = a.wrapping_sub(b) & m;
        let f = self.flags();
        f.zf = res == 0;
        f.sf = msb(res, size);
        f.cf = (a & m) < (b & m);
        f.of = msb((a ^ b) & (a ^ res), size);
        res
    }

    /// Condition evaluation; parity conditions are outside the model.
    fn cond(&self, cc: u8, at: u64) -> Result<bool, Fault> {
        let f = &self.st.threads[self.t].flags;
        let base = match cc >> 1 {
            0 => f.of,
            1 => f.cf,
            2 => f.zf,
            3 => f.cf || f.zf,
            4 => f.sf,
            5 => return Err((FaultKind::UnsupportedInsn, at)),
            6 => f.sf != f.of,
            _ => f.zf || (f.sf != f.of),
        };
        Ok(if cc & 1 == 0 { base } else { !base })
    }
}

/// Apply an ALU group op (add/or/and/sub/xor/cmp); returns the result to
/// store, or None for cmp.
fn alu_apply(cpu: &mut Cpu, group: u8, a: u64, b: u64, size: u8) -> Option<u64> {
    match group {
        0 => Some(cpu.set_add_flags(a, b, size)),
        1 => {
            let res = (a | b) & mask(size);
            cpu.set_logic_flags(res, size);
            Some(res)
        }
        4 => {
            let res = a & b & mask(size);
            cpu.set_logic_flags(res, size);
            Some(res)
        }
        5 => Some(cpu.set_sub_flags(a, b, size)),
        6 => {
            let res = (a ^ b) & mask(size);
            cpu.set_logic_flags(res, size);
            Some(res)
        }
        _ => {
            cpu.set_sub_flags(a, b, size);
            None
        }
    }
}

pub(super) fn step(st: &mut SandboxState, insn: &DecodedInsn) -> Result<(), Fault> {
    let t = st.cur;
    let mut cpu = Cpu { st, t };
    let next = insn.end_rva();
    let vsize = if cpu.is64() && insn.rex & 8 != 0 {
        8
    } else if insn.has66 {
        2
    } else {
        4
    };
    let unsupported: Fault = (FaultKind::UnsupportedInsn, insn.rva);
    let mut pc = next;

    match insn.opcode {
        Opcode::One(0x88) => {
            let v = cpu.reg_read(insn.modrm_reg, 1, insn.rex);
            cpu.write_rm(insn, 1, v)?;
        }
        Opcode::One(0x89) => {
            let v = cpu.reg_read(insn.modrm_reg, vsize, insn.rex);
            cpu.write_rm(insn, vsize, v)?;
        }
        Opcode::One(0x8A) => {
            let v = cpu.read_rm(insn, 1)?;
            cpu.reg_write(insn.modrm_reg, 1, insn.rex, v);
        }
        Opcode::One(0x8B) => {
            let v = cpu.read_rm(insn, vsize)?;
            cpu.reg_write(insn.modrm_reg, vsize, insn.rex, v);
        }
        Opcode::One(op @ 0xB8..=0xBF) => {
            let reg = (op - 0xB8) | ((insn.rex & 1) << 3);
            let size = if insn.rex & 8 != 0 {
                8
            } else if insn.has66 {
                2
            } else {
                4
            };
            cpu.reg_write(reg, size, insn.rex, insn.imm as u64);
        }
        Opcode::One(op @ 0xB0..=0xB7) => {
            let reg = (op - 0xB0) | ((insn.rex & 1) << 3);
            cpu.reg_write(reg, 1, insn.rex, insn.imm as u64);
        }
        Opcode::One(0xC6) => cpu.write_rm(insn, 1, insn.imm as u64)?,
        Opcode::One(0xC7) => cpu.write_rm(insn, vsize, insn.imm as u64)?,
        // mov AL/eAX <-> moffs
        Opcode::One(op @ 0xA0..=0xA3) => {
            let size = if op & 1 == 0 { 1 } else { vsize };
            let m = insn.mem.ok_or(unsupported)?;
            let addr = cpu.addr_of(insn, &m)?;
            if op < 0xA2 {
                let v = cpu.st.mem.read_uint(addr, size as usize)?;
                cpu.reg_write(0, size, insn.rex, v);
            } else {
                let v = cpu.reg_read(0, size, insn.rex);
                cpu.st.mem.write_uint(addr, v, size as usize)?;
            }
        }
        Opcode::One(0x8D) => {
            let m = insn.mem.ok_or(unsupported)?;
            let m = MemOperand { seg: None, ..m };
            let addr = cpu.addr_of(insn, &m)?;
            cpu.reg_write(insn.modrm_reg, vsize, insn.rex, addr);
        }
        Opcode::One(0x63) if cpu.is64() => {
            let v = cpu.read_rm(insn, 4)?;
            let size = if insn.rex & 8 != 0 { 8 } else { 4 };
            cpu.reg_write(insn.modrm_reg, size, insn.rex, sext(v, 4));
        }
        Opcode::Two(op @ (0xB6 | 0xB7 | 0xBE | 0xBF)) => {
            let ssize = if op & 1 == 0 { 1 } else { 2 };
            let v = cpu.read_rm(insn, ssize)?;
            let v = if op >= 0xBE { sext(v, ssize) } else { v };
            cpu.reg_write(insn.modrm_reg, vsize, insn.rex, v);
        }
        Opcode::One(op @ 0x00..=0x3D)
            if matches!(op & 7, 0..=5) && matches!(op >> 3, 0 | 1 | 4 | 5 | 6 | 7) =>
        {
            let group = op >> 3;
            match op & 7 {
                form @ (0 | 1) => {
                    let size = if form == 0 { 1 } else { vsize };
                    let a = cpu.read_rm(insn, size)?;
                    let b = cpu.reg_read(insn.modrm_reg, size, insn.rex);
                    if let Some(res) = alu_apply(&mut cpu, group, a, b, size) {
                        cpu.write_rm(insn, size, res)?;
                    }
                }
                form @ (2 | 3) => {
                    let size = if form == 2 { 1 } else { vsize };
                    let a = cpu.reg_read(insn.modrm_reg, size, insn.rex);
                    let b = cpu.read_rm(insn, size)?;
                    if let Some(res) = alu_apply(&mut cpu, group, a, b, size) {
                        cpu.reg_write(insn.modrm_reg, size, insn.rex, res);
                    }
                }
                form => {
                    let size = if form == 4 { 1 } else { vsize };
                    let a = cpu.reg_read(0, size, insn.rex);
                    if let Some(res) = alu_apply(&mut cpu, group, a, insn.imm as u64, size) {
                        cpu.reg_write(0, size, insn.rex, res);
                    }
                }
            }
        }
        Opcode::One(op @ (0x80 | 0x81 | 0x83)) => {
            let group = insn.modrm_reg & 7;
            if matches!(group, 2 | 3) {
                return Err(unsupported); // adc/sbb not modeled
            }
            let size = if op == 0x80 { 1 } else { vsize };
            let a = cpu.read_rm(insn, size)?;
            if let Some(res) = alu_apply(&mut cpu, group, a, insn.imm as u64, size) {
                cpu.write_rm(insn, size, res)?;
            }
        }
        Opcode::One(op @ (0x84 | 0x85)) => {
            let size = if op == 0x84 { 1 } else { vsize };
            let a = cpu.read_rm(insn, size)?;
            let b = cpu.reg_read(insn.modrm_reg, size, insn.rex);
            cpu.set_logic_flags(a & b, size);
        }
        Opcode::One(op @ (0xA8 | 0xA9)) => {
            let size = if op == 0xA8 { 1 } else { vsize };
            let a = cpu.reg_read(0, size, insn.rex);
            cpu.set_logic_flags(a & (insn.imm as u64), size);
        }
        Opcode::One(0xF6) | Opcode::One(0xF7) => {
            let size = if matches!(insn.opcode, Opcode::One(0xF6)) { 1 } else { vsize };
            if insn.modrm_reg & 7 != 0 {
                return Err(unsupported);
            }
            let a = cpu.read_rm(insn, size)?;
            cpu.set_logic_flags(a & (insn.imm as u64), size);
        }
        Opcode::One(op @ 0x40..=0x4F) if !cpu.is64() => {
            let reg = op & 7;
            let cf = cpu.flags().cf;
            let a = cpu.reg_read(reg, 4, 0);
            let res = if op < 0x48 {
                cpu.set_add_flags(a, 1, 4)
            } else {
                cpu.set_sub_flags(a, 1, 4)
            };
            cpu.flags().cf = cf;
            cpu.reg_write(reg, 4, 0, res);
        }
        Opcode::One(fe @ (0xFE | 0xFF)) if matches!(insn.modrm_reg & 7, 0 | 1) => {
            let size = if fe == 0xFE { 1 } else { vsize };
            let cf = cpu.flags().cf;
            let a = cpu.read_rm(insn, size)?;
            let res = if insn.modrm_reg & 7 == 0 {
                cpu.set_add_flags(a, 1, size)
            } else {
                cpu.set_sub_flags(a, 1, size)
            };
            cpu.flags().cf = cf;
            cpu.write_rm(insn, size, res)?;
        }
        Opcode::One(op @ 0x50..=0x57) => {
            let reg = (op - 0x50) | ((insn.rex & 1) << 3);
            let v = cpu.reg_read(reg, cpu.ptr(), insn.rex);
            cpu.push(v)?;
        }
        Opcode::One(op @ 0x58..=0x5F) => {
            let reg = (op - 0x58) | ((insn.rex & 1) << 3);
            let v = cpu.pop()?;
            cpu.reg_write(reg, cpu.ptr(), insn.rex, v);
        }
        Opcode::One(0x68) | Opcode::One(0x6A) => {
            cpu.push(sext(insn.imm as u64, 4))?;
        }
        Opcode::One(0x9C) => {
            let f = cpu.st.threads[t].flags;
            let w = 0x2u64
                | (f.cf as u64)
                | ((f.zf as u64) << 6)
                | ((f.sf as u64) << 7)
                | ((f.of as u64) << 11);
            cpu.push(w)?;
        }
        Opcode::One(0x9D) => {
            let w = cpu.pop()?;
            let f = cpu.flags();
            f.cf = w & 1 != 0;
            f.zf = w & (1 << 6) != 0;
            f.sf = w & (1 << 7) != 0;
            f.of = w & (1 << 11) != 0;
        }
        Opcode::One(0x90) | Opcode::Two(0x1F) => {}
        Opcode::One(0xCC) => return Err((FaultKind::Breakpoint, insn.rva)),
        Opcode::One(0xE9) | Opcode::One(0xEB) => pc = insn.target.unwrap(),
        Opcode::One(op @ 0x70..=0x7F) => {
            if cpu.cond(op & 0xF, insn.rva)? {
                pc = insn.target.unwrap();
            }
        }
        Opcode::Two(op @ 0x80..=0x8F) => {
            if cpu.cond(op & 0xF, insn.rva)? {
                pc = insn.target.unwrap();
            }
        }
        Opcode::One(0xE8) => {
            cpu.push(next)?;
            pc = insn.target.unwrap();
        }
        Opcode::One(0xC3) => pc = cpu.pop()?,
        Opcode::One(0xC2) => {
            pc = cpu.pop()?;
            let sp = &mut cpu.st.threads[t].regs[super::REG_SP];
            *sp = sp.wrapping_add(insn.imm as u64 & 0xFFFF);
        }
        Opcode::One(0xFF) => match insn.modrm_reg & 7 {
            2 => {
                let target = cpu.read_rm(insn, cpu.ptr())?;
                cpu.push(next)?;
                pc = target;
            }
            4 => pc = cpu.read_rm(insn, cpu.ptr())?,
            6 => {
                let v = cpu.read_rm(insn, cpu.ptr())?;
                cpu.push(v)?;
            }
            _ => return Err(unsupported),
        },
        _ => return Err(unsupported),
    }

    cpu.st.threads[t].pc = if cpu.is64() { pc } else { pc & 0xFFFF_FFFF };
    Ok(())
}
