//! KRAKEN core: arithmetic, secret sharing, cryptography, usage policies,
//! the three-node computation engine, the market broker and wire formats.

pub mod crypto;
pub mod market;
pub mod math;
pub mod mpc;
pub mod policy;
pub mod sharing;
pub mod wire;
