//! Patch-site planning and displaced-instruction re-encoding.
//!
//! A jump-mode patch replaces the first >=5 bytes of whole instructions at
//! a block head with a rel32 jump; the displaced instructions move into
//! the trampoline and any position-dependent fields (rel8/rel32 branches,
//! rip-relative displacements) are re-targeted.

use std::collections::{BTreeMap, BTreeSet};

use crate::cfg::BasicBlock;
use crate::decode::{DecodedInsn, InsnKind, Opcode};

pub const PATCH_JUMP_LEN: u64 = 5;
/// Filler for patch-site bytes after the jump: faults loudly if reached.
pub const PATCH_FILL: u8 = 0xCC;

#[derive(Debug, PartialEq, Eq)]
pub enum SiteError {
    /// Block under 5 bytes with a leader (or nothing decodable) right after.
    TooSmall,
    /// A displaced instruction has no re-encodable relocated form.
    Unrelocatable(&'static str),
}

#[derive(Clone, Debug)]
pub struct PatchSite {
    pub displaced: Vec<DecodedInsn>,
    pub site_size: u64,
    pub expanded: bool,
}

/// Accumulate whole instructions from the block head until the site holds
/// the 5-byte jump. Blocks shorter than 5 bytes may extend into following
/// non-leader instructions (dead padding after an unconditional exit).
pub fn plan_patch_site(
    block: &BasicBlock,
    insn_index: &BTreeMap<u64, DecodedInsn>,
    leaders: &BTreeSet<u64>,
) -> Result<PatchSite, SiteError> {
    let mut displaced = Vec::new();
    let mut size = 0u64;
    let mut rva = block.start_rva;
    let mut expanded = false;
    while size < PATCH_JUMP_LEN {
        if rva >= block.end_rva() {
            if leaders.contains(&rva) {
                return Err(SiteError::TooSmall);
            }
            expanded = true;
        }
        let insn = insn_index.get(&rva).ok_or(SiteError::TooSmall)?;
        if insn.rva != rva {
            return Err(SiteError::TooSmall);
        }
        size += insn.length as u64;
        rva = insn.end_rva();
        displaced.push(insn.clone());
    }
    Ok(PatchSite { displaced, site_size: size, expanded })
}

/// Emit the 5-byte jump plus fault padding for a planned site.
pub fn encode_patch(site_rva: u64, site_size: u64, trampoline_rva: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(site_size as usize);
    out.push(0xE9);
    let rel = trampoline_rva as i64 - (site_rva as i64 + 5);
    out.extend_from_slice(&(i32::try_from(rel).expect("patch jump reach")).to_le_bytes());
    out.resize(site_size as usize, PATCH_FILL);
    out
}

/// A displaced or cloned instruction re-encoded for a new location.
pub struct Reencoded {
    pub bytes: Vec<u8>,
    /// Offsets (within `bytes`) of cells that carried relocations in the
    /// original encoding, paired with their original offsets.
    pub moved_fields: MovedFields,
}

/// How the original byte positions map into the re-encoded instruction:
/// identical except for promoted rel8 branches, where only the opcode
/// moved.
#[derive(Clone, Copy, Debug)]
pub enum MovedFields {
    Verbatim,
    Promoted,
}

/// Re-encode one instruction at `new_rva`, mapping direct branch targets
/// through `map_target` (identity keeps original control flow). Returns the
/// new bytes. rel8 branches grow to their rel32 forms; loop/jcxz have no
/// rel32 form and are rejected.
pub fn reencode_at(
    insn: &DecodedInsn,
    src: &[u8],
    new_rva: u64,
    map_target: impl Fn(u64) -> u64,
) -> Result<Reencoded, SiteError> {
    let orig = &src[..insn.length as usize];
    match insn.kind {
        InsnKind::CallDirect | InsnKind::JmpDirect | InsnKind::Jcc => {
            let target = map_target(insn.target.expect("direct branch has target"));
            let (mut bytes, promoted) = match (insn.opcode, insn.imm_len) {
                // already rel32
                (_, 4) => (orig.to_vec(), false),
                (Opcode::One(0xEB), 1) => (vec![0xE9, 0, 0, 0, 0], true),
                (Opcode::One(op @ 0x70..=0x7F), 1) => (vec![0x0F, 0x80 + (op & 0xF), 0, 0, 0, 0], true),
                (Opcode::One(0xE0..=0xE3), _) => {
                    return Err(SiteError::Unrelocatable("loop/jcxz has no rel32 form"))
                }
                _ => return Err(SiteError::Unrelocatable("unsupported branch form")),
            };
            let rel_off = if promoted {
                bytes.len() - 4
            } else {
                insn.imm_off as usize
            };
            let rel = target as i64 - (new_rva as i64 + bytes.len() as i64);
            let rel = i32::try_from(rel).map_err(|_| SiteError::Unrelocatable("branch out of rel32 range"))?;
            bytes[rel_off..rel_off + 4].copy_from_slice(&rel.to_le_bytes());
            Ok(Reencoded {
                bytes,
                moved_fields: if promoted { MovedFields::Promoted } else { MovedFields::Verbatim },
            })
        }
        _ => {
            let mut bytes = orig.to_vec();
            if let Some(mem) = insn.mem {
                if mem.rip_relative {
                    let target = map_target((insn.end_rva() as i64 + mem.disp) as u64);
                    let rel = target as i64 - (new_rva as i64 + insn.length as i64);
                    let rel = i32::try_from(rel)
                        .map_err(|_| SiteError::Unrelocatable("rip-relative operand out of range"))?;
                    let off = insn.disp_off as usize;
                    bytes[off..off + 4].copy_from_slice(&rel.to_le_bytes());
                }
            }
            Ok(Reencoded { bytes, moved_fields: MovedFields::Verbatim })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::Terminator;
    use crate::decode::{decode_one, sweep, Mode};

    fn index_of(code: &[u8], base: u64) -> BTreeMap<u64, DecodedInsn> {
        sweep(code, base, Mode::Bits32).0.into_iter().map(|i| (i.rva, i)).collect()
    }

    fn block(start: u64, size: u64) -> BasicBlock {
        BasicBlock {
            start_rva: start,
            size,
            insns: 0,
            terminator: Terminator::Ret,
            function_name: None,
            relocs_inside: vec![],
        }
    }

    #[test]
    fn exact_five_byte_instruction() {
        let idx = index_of(&[0xB8, 1, 0, 0, 0, 0xC3], 0x1000);
        let site = plan_patch_site(&block(0x1000, 6), &idx, &BTreeSet::new()).unwrap();
        assert_eq!(site.site_size, 5);
        assert_eq!(site.displaced.len(), 1);
        assert!(!site.expanded);
    }

    #[test]
    fn accumulates_three_instructions() {
        // xor(2) + xor(2) + ret(1)
        let idx = index_of(&[0x31, 0xC0, 0x31, 0xC9, 0xC3], 0x1000);
        let site = plan_patch_site(&block(0x1000, 5), &idx, &BTreeSet::new()).unwrap();
        assert_eq!(site.site_size, 5);
        assert_eq!(site.displaced.len(), 3);
    }

    #[test]
    fn small_block_with_leader_after_is_too_small() {
        let idx = index_of(&[0x31, 0xC0, 0xC3], 0x1000);
        let leaders: BTreeSet<u64> = [0x1003u64].into_iter().collect();
        // only 3 bytes available before the next leader
        let err = plan_patch_site(&block(0x1000, 3), &idx, &leaders).unwrap_err();
        assert_eq!(err, SiteError::TooSmall);
    }

    #[test]
    fn small_block_expands_into_padding() {
        // ret followed by int3 padding that nothing targets
        let idx = index_of(&[0xC3, 0xCC, 0xCC, 0xCC, 0xCC, 0x90], 0x1000);
        let site = plan_patch_site(&block(0x1000, 1), &idx, &BTreeSet::new()).unwrap();
        assert!(site.expanded);
        assert_eq!(site.site_size, 5);
        assert_eq!(site.displaced.len(), 5);
    }

    #[test]
    fn patch_encoding_displacement() {
        // spec arithmetic: patch at 0x1000 jumping to 0x5000
        let bytes = encode_patch(0x1000, 5, 0x5000);
        assert_eq!(bytes, vec![0xE9, 0xFB, 0x3F, 0x00, 0x00]);
        let padded = encode_patch(0x1000, 7, 0x5000);
        assert_eq!(&padded[5..], &[0xCC, 0xCC]);
    }

    #[test]
    fn reencode_call_rel32() {
        // call with target 0x1005+2; moved to 0x5000: new disp = 0x1007 - 0x5005
        let insn = decode_one(&[0xE8, 0x02, 0, 0, 0], 0x1000, Mode::Bits32).unwrap();
        let out = reencode_at(&insn, &[0xE8, 0x02, 0, 0, 0], 0x5000, |t| t).unwrap();
        assert_eq!(out.bytes[0], 0xE8);
        let disp = i32::from_le_bytes(out.bytes[1..5].try_into().unwrap());
        assert_eq!(disp as i64, 0x1007 - 0x5005);
    }

    #[test]
    fn reencode_promotes_jcc8() {
        let insn = decode_one(&[0x74, 0x10], 0x1000, Mode::Bits32).unwrap();
        let out = reencode_at(&insn, &[0x74, 0x10], 0x5000, |t| t).unwrap();
        assert_eq!(&out.bytes[..2], &[0x0F, 0x84]);
        let disp = i32::from_le_bytes(out.bytes[2..6].try_into().unwrap());
        assert_eq!(disp as i64, 0x1012 - 0x5006);
    }

    #[test]
    fn reencode_rejects_jcxz() {
        let insn = decode_one(&[0xE3, 0x05], 0x1000, Mode::Bits32).unwrap();
        assert!(matches!(
            reencode_at(&insn, &[0xE3, 0x05], 0x5000, |t| t),
            Err(SiteError::Unrelocatable(_))
        ));
    }

    #[test]
    fn reencode_rip_relative() {
        // mov rax, [rip+0x10] at 0x1000, length 7, target 0x1017; moved to 0x9000
        let src = [0x48, 0x8B, 0x05, 0x10, 0, 0, 0];
        let insn = decode_one(&src, 0x1000, Mode::Bits64).unwrap();
        let out = reencode_at(&insn, &src, 0x9000, |t| t).unwrap();
        let disp = i32::from_le_bytes(out.bytes[3..7].try_into().unwrap());
        assert_eq!(disp as i64, 0x1017 - 0x9007);
    }
}
