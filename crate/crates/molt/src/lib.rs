//! Desk-scale multi-task training of a toy decoder-only transformer whose
//! attention projections carry task-routed mixtures of low-rank experts,
//! trained jointly on contrastive (embedding) and token cross-entropy
//! (generative) objectives, with convergence-driven per-task batch
//! allocation and trim/sign-elect/mean checkpoint merging.

pub mod error;
pub mod numerics;

pub use error::{MoltError, Result};
