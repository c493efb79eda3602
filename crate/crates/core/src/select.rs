//! Instrumentation-point selection: address/name filters over a block list
//! and the memory-sensitive reduction, producing the plan the rewriter
//! materializes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cfg::{BasicBlock, BlockList};
use crate::decode::{DecodedInsn, InsnKind};

#[derive(Debug, thiserror::Error)]
pub enum SelectError {
    #[error("bad filter pattern '{pattern}': {source}")]
    BadPattern {
        pattern: String,
        source: regex::Error,
    },
}

/// User-facing filter configuration. Empty include sets mean "include
/// everything"; excludes are applied afterwards.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FilterSpec {
    #[serde(default)]
    pub include_ranges: Vec<(u64, u64)>,
    #[serde(default)]
    pub exclude_ranges: Vec<(u64, u64)>,
    #[serde(default)]
    pub include_name_patterns: Vec<String>,
    #[serde(default)]
    pub exclude_name_patterns: Vec<String>,
    #[serde(default)]
    pub memory_sensitive: bool,
}

impl FilterSpec {
    pub fn is_empty(&self) -> bool {
        self.include_ranges.is_empty()
            && self.exclude_ranges.is_empty()
            && self.include_name_patterns.is_empty()
            && self.exclude_name_patterns.is_empty()
    }
}

fn compile(patterns: &[String]) -> Result<Vec<regex::Regex>, SelectError> {
    patterns
        .iter()
        .map(|p| {
            regex::Regex::new(p).map_err(|source| SelectError::BadPattern { pattern: p.clone(), source })
        })
        .collect()
}

fn in_any_range(ranges: &[(u64, u64)], b: &BasicBlock) -> bool {
    ranges.iter().any(|&(lo, hi)| b.start_rva >= lo && b.start_rva < hi)
}

fn matches_any(res: &[regex::Regex], b: &BasicBlock) -> bool {
    match &b.function_name {
        Some(name) => res.iter().any(|re| re.is_match(name)),
        None => false, // unnamed blocks never match name patterns
    }
}

/// Apply include/exclude filters; the result is a sub-list of the input
/// with order preserved.
pub fn apply_filters(blocks: &BlockList, spec: &FilterSpec) -> Result<BlockList, SelectError> {
    let inc_re = compile(&spec.include_name_patterns)?;
    let exc_re = compile(&spec.exclude_name_patterns)?;
    let has_includes = !spec.include_ranges.is_empty() || !inc_re.is_empty();
    let blocks_out = blocks
        .blocks
        .iter()
        .filter(|b| {
            if has_includes && !(in_any_range(&spec.include_ranges, b) || matches_any(&inc_re, b)) {
                return false;
            }
            !(in_any_range(&spec.exclude_ranges, b) || matches_any(&exc_re, b))
        })
        .cloned()
        .collect();
    Ok(BlockList { blocks: blocks_out, ..blocks.clone() })
}

/// Default routine names whose callers count as memory points.
pub const MEMORY_ROUTINES: &[&str] = &[
    "memcpy", "memmove", "memset", "strcpy", "strcat", "strncpy", "sprintf", "malloc", "free",
    "realloc", "HeapAlloc", "HeapFree",
];

/// Keep only blocks that either write memory through a computed (register
/// based or indexed) address, or call one of the known memory routines.
/// Plain rip-relative or absolute global writes do not qualify.
pub fn memory_sensitive_select(
    blocks: &BlockList,
    insns: &[DecodedInsn],
    imports: &[(u64, String)],
    routines: &[&str],
) -> BlockList {
    let import_map: BTreeMap<u64, &str> = imports.iter().map(|(rva, n)| (*rva, n.as_str())).collect();
    let by_rva: BTreeMap<u64, &DecodedInsn> = insns.iter().map(|i| (i.rva, i)).collect();
    let image_base = blocks.image_base;

    let is_memory_routine = |name: &str| routines.iter().any(|r| *r == name);
    // resolve a call to an IAT name, following one direct jump thunk
    let resolve_call = |insn: &DecodedInsn| -> Option<&str> {
        let iat_slot = |i: &DecodedInsn| -> Option<u64> {
            let mem = i.mem?;
            if i.kind != InsnKind::CallIndirect && i.kind != InsnKind::JmpIndirectMem {
                return None;
            }
            if mem.rip_relative {
                Some((i.end_rva() as i64 + mem.disp) as u64)
            } else if mem.is_absolute() {
                (mem.disp as u64).checked_sub(image_base)
            } else {
                None
            }
        };
        match insn.kind {
            InsnKind::CallIndirect => import_map.get(&iat_slot(insn)?).copied(),
            InsnKind::CallDirect => {
                let thunk = by_rva.get(&insn.target?)?;
                import_map.get(&iat_slot(thunk)?).copied()
            }
            _ => None,
        }
    };

    let keep = |b: &BasicBlock| -> bool {
        let mut rva = b.start_rva;
        while rva < b.end_rva() {
            let Some(insn) = by_rva.get(&rva) else { break };
            if insn.writes_memory {
                match insn.mem {
                    // computed address: any base or index register, not rip-relative
                    Some(m) if (m.base.is_some() || m.index.is_some()) && !m.rip_relative => {
                        return true;
                    }
                    // implicit string writes go through edi
                    None => return true,
                    _ => {}
                }
            }
            if matches!(insn.kind, InsnKind::CallDirect | InsnKind::CallIndirect) {
                if let Some(name) = resolve_call(insn) {
                    if is_memory_routine(name) {
                        return true;
                    }
                }
            }
            rva = insn.end_rva();
        }
        false
    };

    let blocks_out = blocks.blocks.iter().filter(|b| keep(b)).cloned().collect();
    BlockList { blocks: blocks_out, ..blocks.clone() }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThreadMode {
    Single,
    Multi,
}

#[derive(Clone, Debug)]
pub struct PlanPoint {
    pub block: BasicBlock,
    /// Low `map_size_log2` bits of the block-address hash; collisions are
    /// allowed, matching edge-bitmap semantics.
    pub id: u32,
}

#[derive(Clone, Debug)]
pub struct InstrumentationPlan {
    pub mode: crate::rewrite::InstrumentMode,
    pub thread_mode: ThreadMode,
    pub points: Vec<PlanPoint>,
    pub linear_coverage: bool,
    pub map_size_log2: u32,
}

/// splitmix64 finalizer: a fixed avalanche permutation, stable across runs
/// and machines.
pub fn avalanche64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Assign deterministic ids from block start addresses.
pub fn assign_ids(blocks: &BlockList, map_size_log2: u32) -> Vec<PlanPoint> {
    assert!((10..=20).contains(&map_size_log2), "map_size_log2 out of range");
    let mask = (1u64 << map_size_log2) - 1;
    blocks
        .blocks
        .iter()
        .map(|b| PlanPoint {
            block: b.clone(),
            id: (avalanche64(b.start_rva) & mask) as u32,
        })
        .collect()
}

pub fn build_plan(
    blocks: &BlockList,
    mode: crate::rewrite::InstrumentMode,
    thread_mode: ThreadMode,
    linear_coverage: bool,
    map_size_log2: u32,
) -> InstrumentationPlan {
    InstrumentationPlan {
        mode,
        thread_mode,
        points: assign_ids(blocks, map_size_log2),
        linear_coverage,
        map_size_log2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::Terminator;

    fn block(rva: u64, name: Option<&str>) -> BasicBlock {
        BasicBlock {
            start_rva: rva,
            size: 2,
            insns: 1,
            terminator: Terminator::FallThrough,
            function_name: name.map(String::from),
            relocs_inside: vec![],
        }
    }

    fn list(blocks: Vec<BasicBlock>) -> BlockList {
        BlockList { arch_is64: false, image_base: 0x40_0000, blocks, jump_tables: vec![] }
    }

    #[test]
    fn include_range_keeps_only_matching() {
        let l = list(vec![block(0x1000, None), block(0x1004, None), block(0x1006, None)]);
        let spec = FilterSpec { include_ranges: vec![(0x1004, 0x1006)], ..Default::default() };
        let out = apply_filters(&l, &spec).unwrap();
        assert_eq!(out.blocks.len(), 1);
        assert_eq!(out.blocks[0].start_rva, 0x1004);
    }

    #[test]
    fn exclude_everything_empties() {
        let l = list(vec![block(0x1000, None), block(0x1004, None)]);
        let spec = FilterSpec { exclude_ranges: vec![(0, u64::MAX)], ..Default::default() };
        assert!(apply_filters(&l, &spec).unwrap().blocks.is_empty());
    }

    #[test]
    fn name_pattern_include() {
        let l = list(vec![
            block(0x1000, Some("parse_hdr")),
            block(0x1010, Some("init")),
            block(0x1020, Some("parse_body")),
        ]);
        let spec = FilterSpec {
            include_name_patterns: vec!["^parse_.*".into()],
            ..Default::default()
        };
        let out = apply_filters(&l, &spec).unwrap();
        let names: Vec<_> = out.blocks.iter().filter_map(|b| b.function_name.as_deref()).collect();
        assert_eq!(names, vec!["parse_hdr", "parse_body"]);
    }

    #[test]
    fn unnamed_blocks_never_match_patterns() {
        let l = list(vec![block(0x1000, None)]);
        let inc = FilterSpec { include_name_patterns: vec![".*".into()], ..Default::default() };
        assert!(apply_filters(&l, &inc).unwrap().blocks.is_empty());
        let exc = FilterSpec { exclude_name_patterns: vec![".*".into()], ..Default::default() };
        assert_eq!(apply_filters(&l, &exc).unwrap().blocks.len(), 1);
    }

    #[test]
    fn bad_pattern_reports() {
        let l = list(vec![]);
        let spec = FilterSpec { include_name_patterns: vec!["(".into()], ..Default::default() };
        assert!(matches!(apply_filters(&l, &spec), Err(SelectError::BadPattern { .. })));
    }

    #[test]
    fn empty_spec_is_identity() {
        let l = list(vec![block(0x1000, None), block(0x1004, None)]);
        let out = apply_filters(&l, &FilterSpec::default()).unwrap();
        assert_eq!(out.blocks, l.blocks);
    }

    #[test]
    fn filters_idempotent_and_monotone() {
        let l = list(vec![block(0x1000, Some("a")), block(0x1004, Some("b")), block(0x1008, None)]);
        let spec = FilterSpec {
            include_ranges: vec![(0x1000, 0x1008)],
            exclude_name_patterns: vec!["^b$".into()],
            ..Default::default()
        };
        let once = apply_filters(&l, &spec).unwrap();
        let twice = apply_filters(&once, &spec).unwrap();
        assert_eq!(once.blocks, twice.blocks);
        assert!(once.blocks.len() <= l.blocks.len());
    }

    #[test]
    fn memory_select_keeps_register_writes() {
        // mov [eax], ecx ; ret   vs   xor eax,eax ; ret
        let code = [0x89, 0x08, 0xC3, 0x31, 0xC0, 0xC3];
        let (insns, _) = crate::decode::sweep(&code, 0x1000, crate::decode::Mode::Bits32);
        let l = list(vec![
            BasicBlock { start_rva: 0x1000, size: 3, insns: 2, terminator: Terminator::Ret, function_name: None, relocs_inside: vec![] },
            BasicBlock { start_rva: 0x1003, size: 3, insns: 2, terminator: Terminator::Ret, function_name: None, relocs_inside: vec![] },
        ]);
        let out = memory_sensitive_select(&l, &insns, &[], MEMORY_ROUTINES);
        assert_eq!(out.blocks.len(), 1);
        assert_eq!(out.blocks[0].start_rva, 0x1000);
    }

    #[test]
    fn memory_select_excludes_absolute_writes() {
        // mov [0x403000], eax ; ret
        let code = [0xA3, 0x00, 0x30, 0x40, 0x00, 0xC3];
        let (insns, _) = crate::decode::sweep(&code, 0x1000, crate::decode::Mode::Bits32);
        let l = list(vec![BasicBlock {
            start_rva: 0x1000,
            size: 6,
            insns: 2,
            terminator: Terminator::Ret,
            function_name: None,
            relocs_inside: vec![],
        }]);
        assert!(memory_sensitive_select(&l, &insns, &[], MEMORY_ROUTINES).blocks.is_empty());
    }

    #[test]
    fn memory_select_keeps_import_calls() {
        // call [0x402000] (IAT slot) ; ret
        let code = [0xFF, 0x15, 0x00, 0x20, 0x40, 0x00, 0xC3];
        let (insns, _) = crate::decode::sweep(&code, 0x1000, crate::decode::Mode::Bits32);
        let l = list(vec![BasicBlock {
            start_rva: 0x1000,
            size: 7,
            insns: 2,
            terminator: Terminator::Ret,
            function_name: None,
            relocs_inside: vec![],
        }]);
        let imports = vec![(0x2000u64, "memcpy".to_string())];
        assert_eq!(memory_sensitive_select(&l, &insns, &imports, MEMORY_ROUTINES).blocks.len(), 1);
        let other = vec![(0x2000u64, "GetLastError".to_string())];
        assert!(memory_sensitive_select(&l, &insns, &other, MEMORY_ROUTINES).blocks.is_empty());
    }

    #[test]
    fn memory_select_empty_input() {
        let l = list(vec![]);
        assert!(memory_sensitive_select(&l, &[], &[], MEMORY_ROUTINES).blocks.is_empty());
    }

    #[test]
    fn ids_deterministic_and_masked() {
        let l = list(vec![block(0x1000, None), block(0x2340, None)]);
        let a = assign_ids(&l, 16);
        let b = assign_ids(&l, 16);
        assert_eq!(a.iter().map(|p| p.id).collect::<Vec<_>>(), b.iter().map(|p| p.id).collect::<Vec<_>>());
        assert!(a.iter().all(|p| p.id < 65536));
        let c = assign_ids(&l, 10);
        assert!(c.iter().all(|p| p.id < 1024));
    }
}
