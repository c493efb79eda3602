//! A deterministic interpreter for the fixture x86 subset over a flat
//! memory image. It exists to prove rewrites preserve behavior: load an
//! image, run it, compare final states, and hand the fuzzer a desk-scale
//! execution backend. Multi-thread targets are simulated by round-robin
//! interleaving logical threads at control-transfer boundaries, each with
//! its own stack and TLS block.

mod exec;

use std::collections::{BTreeMap, BTreeSet};

use crate::decode::Mode;
use crate::pe::{PeImage, RelocKind};

pub const PAGE_SIZE: u64 = 0x1000;

/// Executing this address means "the program returned to the loader".
pub fn return_sentinel(mode: Mode) -> u64 {
    match mode {
        Mode::Bits32 => 0x00DE_AD00,
        Mode::Bits64 => 0x7FFF_DEAD_0000,
    }
}

fn stack_top(mode: Mode, thread: usize) -> u64 {
    match mode {
        Mode::Bits32 => 0x0030_0000 + thread as u64 * 0x4_0000,
        Mode::Bits64 => 0x2000_0000 + thread as u64 * 0x10_0000,
    }
}

pub const STACK_SIZE: u64 = 0x8000;

/// Fixed homes for the emulated TEB, TLS array and TLS block of each
/// logical thread; one page each.
fn teb_base(mode: Mode, thread: usize) -> u64 {
    match mode {
        Mode::Bits32 => 0x0040_0000 - 0x1_0000 + thread as u64 * 0x3000,
        Mode::Bits64 => 0x3000_0000 + thread as u64 * 0x3000,
    }
}

pub const PERM_R: u8 = 1;
pub const PERM_W: u8 = 2;
pub const PERM_X: u8 = 4;

#[derive(Clone)]
struct Page {
    data: Box<[u8; PAGE_SIZE as usize]>,
    perms: u8,
}

#[derive(Clone, Default)]
pub struct Memory {
    pages: BTreeMap<u64, Page>,
    /// Page keys written since the last reset; lets a fuzzing backend undo
    /// a run by copying back only what changed.
    dirty: Vec<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FaultKind {
    Unmapped,
    NotWritable,
    NotExecutable,
    UnsupportedInsn,
    Breakpoint,
}

impl Memory {
    pub fn map(&mut self, va: u64, len: u64, perms: u8) {
        let first = va / PAGE_SIZE;
        let last = (va + len.max(1) - 1) / PAGE_SIZE;
        for p in first..=last {
            self.pages
                .entry(p)
                .or_insert_with(|| Page { data: Box::new([0; PAGE_SIZE as usize]), perms })
                .perms |= perms;
        }
    }

    pub fn is_mapped(&self, va: u64) -> bool {
        self.pages.contains_key(&(va / PAGE_SIZE))
    }

    fn page_perms(&self, va: u64) -> u8 {
        self.pages.get(&(va / PAGE_SIZE)).map(|p| p.perms).unwrap_or(0)
    }

    /// Loader store: ignores permissions, target must be mapped.
    pub fn poke(&mut self, va: u64, bytes: &[u8]) {
        for (i, &b) in bytes.iter().enumerate() {
            let a = va + i as u64;
            let key = a / PAGE_SIZE;
            if a == va || a % PAGE_SIZE == 0 {
                self.dirty.push(key);
            }
            let page = self.pages.get_mut(&key).expect("poke target mapped");
            page.data[(a % PAGE_SIZE) as usize] = b;
        }
    }

    pub fn read_bytes(&self, va: u64, len: usize) -> Result<Vec<u8>, (FaultKind, u64)> {
        let mut out = Vec::with_capacity(len);
        for i in 0..len as u64 {
            let a = va + i;
            let page = self.pages.get(&(a / PAGE_SIZE)).ok_or((FaultKind::Unmapped, a))?;
            if page.perms & PERM_R == 0 {
                return Err((FaultKind::Unmapped, a));
            }
            out.push(page.data[(a % PAGE_SIZE) as usize]);
        }
        Ok(out)
    }

    pub fn read_uint(&self, va: u64, len: usize) -> Result<u64, (FaultKind, u64)> {
        // fast path: within one page
        let off = (va % PAGE_SIZE) as usize;
        if off + len <= PAGE_SIZE as usize {
            let page = self.pages.get(&(va / PAGE_SIZE)).ok_or((FaultKind::Unmapped, va))?;
            if page.perms & PERM_R == 0 {
                return Err((FaultKind::Unmapped, va));
            }
            let mut v = 0u64;
            for i in (0..len).rev() {
                v = (v << 8) | page.data[off + i] as u64;
            }
            return Ok(v);
        }
        let mut v = 0u64;
        for i in 0..len as u64 {
            let a = va + i;
            let page = self.pages.get(&(a / PAGE_SIZE)).ok_or((FaultKind::Unmapped, a))?;
            if page.perms & PERM_R == 0 {
                return Err((FaultKind::Unmapped, a));
            }
            v |= (page.data[(a % PAGE_SIZE) as usize] as u64) << (8 * i);
        }
        Ok(v)
    }

    pub fn write_uint(&mut self, va: u64, val: u64, len: usize) -> Result<(), (FaultKind, u64)> {
        let off = (va % PAGE_SIZE) as usize;
        if off + len <= PAGE_SIZE as usize {
            let key = va / PAGE_SIZE;
            let page = self.pages.get_mut(&key).ok_or((FaultKind::Unmapped, va))?;
            if page.perms & PERM_W == 0 {
                return Err((FaultKind::NotWritable, va));
            }
            self.dirty.push(key);
            for i in 0..len {
                page.data[off + i] = (val >> (8 * i)) as u8;
            }
            return Ok(());
        }
        for i in 0..len as u64 {
            let a = va + i;
            let key = a / PAGE_SIZE;
            let page = self.pages.get_mut(&key).ok_or((FaultKind::Unmapped, a))?;
            if page.perms & PERM_W == 0 {
                return Err((FaultKind::NotWritable, a));
            }
            self.dirty.push(key);
            page.data[(a % PAGE_SIZE) as usize] = (val >> (8 * i)) as u8;
        }
        Ok(())
    }

    /// Bytes for instruction fetch into a fixed buffer; shorter reads at
    /// region ends are fine.
    fn fetch<'b>(&self, va: u64, buf: &'b mut [u8; 15]) -> Result<&'b [u8], (FaultKind, u64)> {
        let page = self.pages.get(&(va / PAGE_SIZE)).ok_or((FaultKind::Unmapped, va))?;
        if page.perms & PERM_X == 0 {
            return Err((FaultKind::NotExecutable, va));
        }
        let off = (va % PAGE_SIZE) as usize;
        let take = buf.len().min(PAGE_SIZE as usize - off);
        buf[..take].copy_from_slice(&page.data[off..off + take]);
        let mut n = take;
        if n < buf.len() {
            if let Some(next) = self.pages.get(&(va / PAGE_SIZE + 1)) {
                if next.perms & PERM_X != 0 {
                    let rest = buf.len() - n;
                    buf[n..].copy_from_slice(&next.data[..rest]);
                    n = buf.len();
                }
            }
        }
        Ok(&buf[..n])
    }
}

#[derive(Clone, Copy, Default, PartialEq, Eq, Debug)]
pub struct Flags {
    pub zf: bool,
    pub sf: bool,
    pub cf: bool,
    pub of: bool,
}

#[derive(Clone, Debug)]
pub struct ThreadCtx {
    pub regs: [u64; 16],
    pub flags: Flags,
    pub pc: u64,
    pub finished: bool,
    /// fs (index 0) and gs (index 1) base addresses.
    pub seg_base: [u64; 2],
}

pub const REG_SP: usize = 4;
pub const REG_SI: usize = 6;
pub const REG_DI: usize = 7;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ExitStatus {
    Running,
    Returned,
    Fault { kind: FaultKind, addr: u64, pc: u64 },
    FuelExhausted,
}

#[derive(Clone, Copy, Debug)]
pub struct SectionSpan {
    pub va: u64,
    pub size: u64,
    pub perms: u8,
    pub spot: bool,
}

#[derive(Clone)]
pub struct SandboxState {
    pub mode: Mode,
    pub mem: Memory,
    pub threads: Vec<ThreadCtx>,
    cur: usize,
    pub exit: ExitStatus,
    /// (thread, va) entries, recorded whenever execution dispatches an
    /// instruction whose address is in `trace_points`.
    pub trace: Vec<(usize, u64)>,
    pub trace_points: BTreeSet<u64>,
    pub fuel_used: u64,
    pub load_base: u64,
    pub sections: Vec<SectionSpan>,
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("relocation outside mapped sections at rva {0:#x}")]
    RelocOutOfRange(u64),
    #[error(transparent)]
    Pe(#[from] crate::pe::PeError),
}

/// Map an image at `base`, apply relocations if the base differs from the
/// preferred one, set up stacks (and TLS blocks when the image has a TLS
/// directory) for `nthreads` logical threads.
pub fn load_image(img: &PeImage, base: u64, nthreads: usize) -> Result<SandboxState, LoadError> {
    assert!(nthreads >= 1);
    let mode = if img.arch.is64() { Mode::Bits64 } else { Mode::Bits32 };
    let mut mem = Memory::default();
    let mut sections = Vec::new();

    for s in &img.sections {
        let mut perms = 0u8;
        if s.is_readable() {
            perms |= PERM_R;
        }
        if s.is_writable() {
            perms |= PERM_W;
        }
        if s.is_executable() {
            perms |= PERM_X;
        }
        let va = base + s.virtual_address as u64;
        let vsize = s.virtual_size.max(s.raw_size) as u64;
        mem.map(va, vsize, perms);
        mem.poke(va, &s.data);
        sections.push(SectionSpan { va, size: vsize, perms, spot: s.name_str().starts_with(".spot") });
    }

    let delta = base.wrapping_sub(img.opt.image_base);
    if delta != 0 {
        if let Some(table) = img.relocations() {
            for e in &table.entries {
                let va = base + e.rva as u64;
                if !mem.is_mapped(va) {
                    return Err(LoadError::RelocOutOfRange(e.rva as u64));
                }
                match e.kind {
                    RelocKind::HighLow => {
                        let v = mem.read_uint(va, 4).map_err(|_| LoadError::RelocOutOfRange(e.rva as u64))?;
                        mem.poke(va, &((v as u32).wrapping_add(delta as u32)).to_le_bytes());
                    }
                    RelocKind::Dir64 => {
                        let v = mem.read_uint(va, 8).map_err(|_| LoadError::RelocOutOfRange(e.rva as u64))?;
                        mem.poke(va, &v.wrapping_add(delta).to_le_bytes());
                    }
                    RelocKind::Abs => {}
                }
            }
        }
    }

    let sentinel = return_sentinel(mode);
    let ptr = if mode.is64() { 8 } else { 4 };
    let mut threads = Vec::new();
    for t in 0..nthreads {
        let top = stack_top(mode, t);
        mem.map(top - STACK_SIZE, STACK_SIZE, PERM_R | PERM_W);
        let sp = top - 64;
        mem.poke(sp, &sentinel.to_le_bytes()[..ptr]);
        let mut ctx = ThreadCtx {
            regs: [0; 16],
            flags: Flags::default(),
            pc: base + img.opt.address_of_entry_point as u64,
            finished: false,
            seg_base: [0, 0],
        };
        ctx.regs[REG_SP] = sp;
        threads.push(ctx);
    }

    // TLS: emulate the loader's per-thread block setup.
    if let Some(dir) = img.dir(crate::pe::DIR_TLS) {
        if dir.rva != 0 {
            let d = base + dir.rva as u64;
            let (start, end, index_cell) = if mode.is64() {
                (
                    mem.read_uint(d, 8).map_err(|_| LoadError::RelocOutOfRange(dir.rva as u64))?,
                    mem.read_uint(d + 8, 8).unwrap_or(0),
                    mem.read_uint(d + 16, 8).unwrap_or(0),
                )
            } else {
                (
                    mem.read_uint(d, 4).map_err(|_| LoadError::RelocOutOfRange(dir.rva as u64))?,
                    mem.read_uint(d + 4, 4).unwrap_or(0),
                    mem.read_uint(d + 8, 4).unwrap_or(0),
                )
            };
            let raw_len = end.saturating_sub(start);
            if index_cell != 0 {
                mem.poke(index_cell, &0u32.to_le_bytes());
            }
            let raw = if raw_len > 0 { mem.read_bytes(start, raw_len as usize).unwrap_or_default() } else { Vec::new() };
            for (t, th) in threads.iter_mut().enumerate() {
                let teb = teb_base(mode, t);
                let array = teb + PAGE_SIZE;
                let block = teb + 2 * PAGE_SIZE;
                mem.map(teb, 3 * PAGE_SIZE, PERM_R | PERM_W);
                let tls_array_off = if mode.is64() { 0x58 } else { 0x2C };
                mem.poke(teb + tls_array_off, &array.to_le_bytes()[..ptr]);
                mem.poke(array, &block.to_le_bytes()[..ptr]);
                if !raw.is_empty() {
                    mem.poke(block, &raw);
                }
                th.seg_base = [teb, teb];
            }
        }
    }

    Ok(SandboxState {
        mode,
        mem,
        threads,
        cur: 0,
        exit: ExitStatus::Running,
        trace: Vec::new(),
        trace_points: BTreeSet::new(),
        fuel_used: 0,
        load_base: base,
        sections,
    })
}

impl SandboxState {
    pub fn thread(&self, t: usize) -> &ThreadCtx {
        &self.threads[t]
    }

    pub fn thread_mut(&mut self, t: usize) -> &mut ThreadCtx {
        &mut self.threads[t]
    }

    /// Interpret until every thread returns, a fault occurs, or `fuel`
    /// instructions have executed.
    pub fn run(&mut self, fuel: u64) -> &ExitStatus {
        if self.exit != ExitStatus::Running {
            return &self.exit;
        }
        let sentinel = return_sentinel(self.mode);
        let mut left = fuel;
        'outer: loop {
            if self.threads.iter().all(|t| t.finished) {
                self.exit = ExitStatus::Returned;
                break;
            }
            if self.threads[self.cur].finished {
                self.cur = (self.cur + 1) % self.threads.len();
                continue;
            }
            let pc = self.threads[self.cur].pc;
            if pc == sentinel {
                self.threads[self.cur].finished = true;
                self.cur = (self.cur + 1) % self.threads.len();
                continue;
            }
            if left == 0 {
                self.exit = ExitStatus::FuelExhausted;
                break;
            }
            if self.trace_points.contains(&pc) {
                self.trace.push((self.cur, pc));
            }
            let mut fetch_buf = [0u8; 15];
            let code = match self.mem.fetch(pc, &mut fetch_buf) {
                Ok(c) => c,
                Err((kind, addr)) => {
                    self.exit = ExitStatus::Fault { kind, addr, pc };
                    break;
                }
            };
            let insn = match crate::decode::decode_one(code, pc, self.mode) {
                Ok(i) => i,
                Err(_) => {
                    self.exit = ExitStatus::Fault { kind: FaultKind::UnsupportedInsn, addr: pc, pc };
                    break 'outer;
                }
            };
            left -= 1;
            self.fuel_used += 1;
            let transfer = insn.kind.is_transfer();
            if let Err((kind, addr)) = exec::step(self, &insn) {
                self.exit = ExitStatus::Fault { kind, addr, pc };
                break;
            }
            if transfer && self.threads.len() > 1 {
                self.cur = (self.cur + 1) % self.threads.len();
            }
        }
        &self.exit
    }

    /// Section span by image section name, if present.
    pub fn section_span(&self, img: &PeImage, name: &str) -> Option<(u64, u64)> {
        img.section_by_name(name)
            .map(|s| (self.load_base + s.virtual_address as u64, s.virtual_size.max(s.raw_size) as u64))
    }

    pub fn read_region(&self, va: u64, len: usize) -> Option<Vec<u8>> {
        self.mem.read_bytes(va, len).ok()
    }

    pub fn write_region(&mut self, va: u64, bytes: &[u8]) {
        self.mem.poke(va, bytes);
    }

    /// Restore this state to `template` by undoing only the pages written
    /// since the last reset. Both states must come from the same load.
    pub fn reset_from(&mut self, template: &SandboxState) {
        self.mem.dirty.sort_unstable();
        self.mem.dirty.dedup();
        for key in std::mem::take(&mut self.mem.dirty) {
            match template.mem.pages.get(&key) {
                Some(p) => {
                    self.mem.pages.insert(key, p.clone());
                }
                None => {
                    self.mem.pages.remove(&key);
                }
            }
        }
        self.threads.clone_from(&template.threads);
        self.cur = template.cur;
        self.exit = ExitStatus::Running;
        self.trace.clear();
        self.fuel_used = 0;
    }

    /// Ranges diffing should skip: instrumentation sections, non-writable
    /// sections (their bytes can differ statically after rewriting but are
    /// immutable at runtime — writes fault), dead stack below each thread's
    /// final stack pointer, and the TLS emulation machinery.
    pub fn default_ignore_ranges(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        for s in &self.sections {
            if s.spot || s.perms & PERM_W == 0 {
                out.push((s.va, s.va + s.size));
            }
        }
        for (t, th) in self.threads.iter().enumerate() {
            let top = stack_top(self.mode, t);
            out.push((top - STACK_SIZE, th.regs[REG_SP]));
        }
        let teb0 = teb_base(self.mode, 0);
        out.push((teb0, teb0 + 3 * PAGE_SIZE * self.threads.len() as u64));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Difference {
    Exit(String),
    Reg { thread: usize, reg: usize, a: u64, b: u64 },
    Flags { thread: usize },
    Mem { va: u64, a: u8, b: u8 },
}

/// Compare two terminated states, ignoring the given address ranges.
/// Returns at most 64 differences.
pub fn diff_states(a: &SandboxState, b: &SandboxState, ignore: &[(u64, u64)]) -> Vec<Difference> {
    let mut out = Vec::new();
    if a.exit != b.exit {
        out.push(Difference::Exit(format!("{:?} vs {:?}", a.exit, b.exit)));
    }
    for (t, (ta, tb)) in a.threads.iter().zip(&b.threads).enumerate() {
        for r in 0..16 {
            if ta.regs[r] != tb.regs[r] {
                out.push(Difference::Reg { thread: t, reg: r, a: ta.regs[r], b: tb.regs[r] });
            }
        }
        if ta.flags != tb.flags {
            out.push(Difference::Flags { thread: t });
        }
    }
    let ignored = |va: u64| ignore.iter().any(|&(lo, hi)| va >= lo && va < hi);
    let keys: BTreeSet<u64> =
        a.mem.pages.keys().chain(b.mem.pages.keys()).copied().collect();
    'pages: for key in keys {
        let pa = a.mem.pages.get(&key);
        let pb = b.mem.pages.get(&key);
        for off in 0..PAGE_SIZE {
            let va = key * PAGE_SIZE + off;
            let ba = pa.map(|p| p.data[off as usize]).unwrap_or(0);
            let bb = pb.map(|p| p.data[off as usize]).unwrap_or(0);
            if ba != bb && !ignored(va) {
                out.push(Difference::Mem { va, a: ba, b: bb });
                if out.len() >= 64 {
                    break 'pages;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
