//! Desk-scale engine for many-shot in-context learning.
//!
//! The crate trains a small decoder-only language model on packed
//! multi-demonstration sequences with a differentiated many-/zero-shot
//! objective and advantage-based reweighting of demonstrations, and ships
//! an independent brute-force oracle for every piece of the objective
//! machinery.

pub mod checks;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod par;
pub mod trainer;

/// Derives a child seed from a base seed and a salt (splitmix64 over the
/// xor), so independent RNG streams never share state.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
