//! Coverage-payload machine code.
//!
//! The stub preserves every register and the flags it touches, loads the
//! previous-location value (a fixed feedback cell in single-thread mode, a
//! per-thread TLS slot in multi-thread mode), bumps
//! `bitmap[id ^ prev]`, stores `prev = id >> 1`, and optionally sets the
//! point's bit in the linear bitset. 32-bit encodings address the feedback
//! cells absolutely (relocation-backed); 64-bit encodings are rip-relative
//! and need no relocations.

use crate::select::ThreadMode;

#[derive(Clone, Copy, Debug)]
pub struct StubCtx {
    pub is64: bool,
    pub thread_mode: ThreadMode,
    pub linear: bool,
    pub image_base: u64,
    /// rva of the previous-location cell in the feedback section.
    pub prev_cell_rva: u64,
    /// rva of the edge bitmap.
    pub bitmap_rva: u64,
    /// rva of the linear bitset (meaningful when `linear`).
    pub linear_rva: u64,
    /// rva of the TLS-index cell (multi-thread mode).
    pub tls_index_rva: u64,
    /// Offset of the previous-location slot inside each thread's TLS block.
    pub tls_slot_off: u32,
}

pub struct StubCode {
    pub bytes: Vec<u8>,
    /// Offsets of absolute 32-bit cells needing HIGHLOW relocations.
    pub reloc_offsets: Vec<u32>,
}

impl StubCtx {
    pub fn stub_len(&self) -> usize {
        // length is independent of id/index/placement
        self.emit(0, 0, 0).bytes.len()
    }

    pub fn emit(&self, id: u32, point_index: usize, stub_rva: u64) -> StubCode {
        let mut b = Vec::with_capacity(64);
        let mut relocs = Vec::new();
        let va = |rva: u64| (self.image_base + rva) as u32;
        let mut abs32 = |b: &mut Vec<u8>, v: u32, relocs: &mut Vec<u32>| {
            relocs.push(b.len() as u32);
            b.extend_from_slice(&v.to_le_bytes());
        };
        // rel32 to an rva from the next-instruction position
        let rip = |b: &mut Vec<u8>, target: u64, stub_rva: u64, tail: usize| {
            let next = stub_rva + b.len() as u64 + 4 + tail as u64;
            let rel = target as i64 - next as i64;
            i32::try_from(rel).expect("stub rip reach").to_le_bytes()
        };

        b.push(0x9C); // pushf
        b.push(0x50); // push rax/eax
        if !self.is64 {
            match self.thread_mode {
                ThreadMode::Single => {
                    // mov eax, [prev]
                    b.extend_from_slice(&[0x8B, 0x05]);
                    abs32(&mut b, va(self.prev_cell_rva), &mut relocs);
                    // xor eax, id
                    b.push(0x35);
                    b.extend_from_slice(&id.to_le_bytes());
                    // inc byte [eax + bitmap]
                    b.extend_from_slice(&[0xFE, 0x80]);
                    abs32(&mut b, va(self.bitmap_rva), &mut relocs);
                    // mov dword [prev], id >> 1
                    b.extend_from_slice(&[0xC7, 0x05]);
                    abs32(&mut b, va(self.prev_cell_rva), &mut relocs);
                    b.extend_from_slice(&(id >> 1).to_le_bytes());
                }
                ThreadMode::Multi => {
                    b.push(0x53); // push ebx
                    // mov ebx, fs:[0x2C]  (TLS array from the TEB)
                    b.extend_from_slice(&[0x64, 0x8B, 0x1D, 0x2C, 0x00, 0x00, 0x00]);
                    // mov eax, [tls_index]
                    b.extend_from_slice(&[0x8B, 0x05]);
                    abs32(&mut b, va(self.tls_index_rva), &mut relocs);
                    // mov ebx, [ebx + eax*4]
                    b.extend_from_slice(&[0x8B, 0x1C, 0x83]);
                    // mov eax, [ebx + slot]
                    b.extend_from_slice(&[0x8B, 0x83]);
                    b.extend_from_slice(&self.tls_slot_off.to_le_bytes());
                    // xor eax, id
                    b.push(0x35);
                    b.extend_from_slice(&id.to_le_bytes());
                    // inc byte [eax + bitmap]
                    b.extend_from_slice(&[0xFE, 0x80]);
                    abs32(&mut b, va(self.bitmap_rva), &mut relocs);
                    // mov dword [ebx + slot], id >> 1
                    b.extend_from_slice(&[0xC7, 0x83]);
                    b.extend_from_slice(&self.tls_slot_off.to_le_bytes());
                    b.extend_from_slice(&(id >> 1).to_le_bytes());
                }
            }
            if self.linear {
                // or byte [linear + index/8], 1 << (index % 8)
                b.extend_from_slice(&[0x80, 0x0D]);
                abs32(&mut b, va(self.linear_rva + point_index as u64 / 8), &mut relocs);
                b.push(1 << (point_index % 8));
            }
            if self.thread_mode == ThreadMode::Multi {
                b.push(0x5B); // pop ebx
            }
        } else {
            b.push(0x53); // push rbx
            match self.thread_mode {
                ThreadMode::Single => {
                    // mov rax, [rip + prev]
                    b.extend_from_slice(&[0x48, 0x8B, 0x05]);
                    let r = rip(&mut b, self.prev_cell_rva, stub_rva, 0);
                    b.extend_from_slice(&r);
                    // xor rax, id
                    b.extend_from_slice(&[0x48, 0x35]);
                    b.extend_from_slice(&id.to_le_bytes());
                    // lea rbx, [rip + bitmap]
                    b.extend_from_slice(&[0x48, 0x8D, 0x1D]);
                    let r = rip(&mut b, self.bitmap_rva, stub_rva, 0);
                    b.extend_from_slice(&r);
                    // inc byte [rax + rbx]
                    b.extend_from_slice(&[0xFE, 0x04, 0x18]);
                    // mov qword [rip + prev], id >> 1
                    b.extend_from_slice(&[0x48, 0xC7, 0x05]);
                    let r = rip(&mut b, self.prev_cell_rva, stub_rva, 4);
                    b.extend_from_slice(&r);
                    b.extend_from_slice(&(id >> 1).to_le_bytes());
                }
                ThreadMode::Multi => {
                    b.push(0x51); // push rcx
                    // mov rbx, gs:[0x58]  (TLS array)
                    b.extend_from_slice(&[0x65, 0x48, 0x8B, 0x1C, 0x25, 0x58, 0x00, 0x00, 0x00]);
                    // mov eax, [rip + tls_index]
                    b.extend_from_slice(&[0x8B, 0x05]);
                    let r = rip(&mut b, self.tls_index_rva, stub_rva, 0);
                    b.extend_from_slice(&r);
                    // mov rbx, [rbx + rax*8]
                    b.extend_from_slice(&[0x48, 0x8B, 0x1C, 0xC3]);
                    // mov rax, [rbx + slot]
                    b.extend_from_slice(&[0x48, 0x8B, 0x83]);
                    b.extend_from_slice(&self.tls_slot_off.to_le_bytes());
                    // xor rax, id
                    b.extend_from_slice(&[0x48, 0x35]);
                    b.extend_from_slice(&id.to_le_bytes());
                    // lea rcx, [rip + bitmap]
                    b.extend_from_slice(&[0x48, 0x8D, 0x0D]);
                    let r = rip(&mut b, self.bitmap_rva, stub_rva, 0);
                    b.extend_from_slice(&r);
                    // inc byte [rax + rcx]
                    b.extend_from_slice(&[0xFE, 0x04, 0x08]);
                    // mov qword [rbx + slot], id >> 1
                    b.extend_from_slice(&[0x48, 0xC7, 0x83]);
                    b.extend_from_slice(&self.tls_slot_off.to_le_bytes());
                    b.extend_from_slice(&(id >> 1).to_le_bytes());
                }
            }
            if self.linear {
                // or byte [rip + linear + index/8], 1 << (index % 8)
                b.extend_from_slice(&[0x80, 0x0D]);
                let r = rip(&mut b, self.linear_rva + point_index as u64 / 8, stub_rva, 1);
                b.extend_from_slice(&r);
                b.push(1 << (point_index % 8));
            }
            if self.thread_mode == ThreadMode::Multi {
                b.push(0x59); // pop rcx
            }
            b.push(0x5B); // pop rbx
        }
        b.push(0x58); // pop rax/eax
        b.push(0x9D); // popf
        StubCode { bytes: b, reloc_offsets: relocs }
    }
}
