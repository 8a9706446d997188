//! Optimal-transport counterfactual regression.
//!
//! Discrete OT solvers (exact network simplex, Sinkhorn, fused
//! Gromov-Wasserstein by Frank-Wolfe), an informative subspace projector, a
//! small reverse-mode MLP stack and the two-head treatment-effect estimator
//! trained with a proximity-aware transport discrepancy.

pub mod datagen;
pub mod error;
pub mod estimator;
pub mod isp;
pub mod matstat;
pub mod metrics;
pub mod neural;
pub mod ot_entropic;
pub mod ot_exact;
pub mod ot_fgw;

pub use error::{Error, Result};
pub use matstat::{Matrix, SeededRng};
