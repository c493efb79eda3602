//! Test-only fixtures and independent reference oracles.
//!
//! Everything in this crate is written from first principles against the
//! platform file-format documentation and the instruction-set reference,
//! deliberately sharing no code with the production crates. Tests compare
//! the production implementations against these oracles.

pub mod asm;
pub mod pe;
pub mod proggen;
pub mod rng;

pub use pe::{PeBuilder, PeLayout};
pub use rng::Rng;
