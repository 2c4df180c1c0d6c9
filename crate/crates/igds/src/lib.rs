//! Interpretability-guided data selection on a desk-scale transformer.
//!
//! The crate trains a small decoder-only transformer and per-layer sparse
//! autoencoders over its residual stream, identifies causally potent task
//! features (frequency recall plus amplification filtering), scores a
//! candidate pool by feature resonance, and compares the resulting
//! selection against Random/Loss/IFD/compression baselines end to end.

pub mod numcore;
pub mod sae;
pub mod tasks;
pub mod toymodel;
pub mod util;
