//! Static instrumentation for Windows PE binaries plus a coverage-guided
//! fuzzer over the resulting edge bitmap.
//!
//! The pipeline: [`pe`] parses and rewrites PE32/PE64 files byte-exactly,
//! [`decode`] recovers instruction lengths and control transfers, [`cfg`]
//! extracts basic blocks and jump tables, [`select`] filters them into an
//! instrumentation plan, [`rewrite`] materializes trampolines or an inline
//! clone plus the feedback sections, [`coverage`] is the reference bitmap
//! math, [`sandbox`] executes fixtures to prove rewrites preserve semantics,
//! and [`fuzz`] drives mutation campaigns against spawned, agent-attached or
//! sandboxed targets.

pub mod cfg;
pub mod coverage;
pub mod decode;
pub mod fuzz;
pub mod pe;
pub mod rewrite;
pub mod sandbox;
pub mod select;

pub use pe::{Arch, PeError, PeImage, Section};
