//! Federated virtual learning with local-global dataset distillation.
//!
//! Clients distill class-balanced virtual datasets from their private data by
//! distribution matching in feature space; a server distills global virtual
//! anchor data by matching aggregated cross-entropy gradients; federated
//! training on the virtual data is regularized by a supervised contrastive
//! loss against the global anchors.
//!
//! Everything runs on a from-scratch 64-bit tensor engine with recorded
//! reverse-mode differentiation (gradients of gradients included, which the
//! server-side gradient matching needs), and every run is bit-reproducible
//! under a fixed seed regardless of worker count.
//!
//! Start with the runnable examples (`cargo run --release --example ...`) or
//! the `fedvirt` binary (`run`, `compare`, `distill`, `gradcheck`).

pub mod autodiff;
pub mod config;
pub mod container;
pub mod data;
pub mod distill;
pub mod error;
pub mod fed;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod runner;
pub mod tensor;
pub mod threads;

pub use error::{Error, Result};
pub use tensor::{NamedTensors, Tensor};

/// Derives a child seed from an ordered tuple of components, so per-client /
/// per-round randomness is independent of execution order.
pub fn derive_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the chained components
    let mut z = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        z ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(z << 6);
        z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z ^= z >> 27;
        z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}
