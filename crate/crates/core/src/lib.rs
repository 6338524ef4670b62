//! Training-free width reduction for pre-norm decoder-only transformers.
//!
//! Neurons at every residual junction are merged onto a retained subset with
//! an entropic optimal-transport plan. The plan is QR-split so the
//! orthonormal factor commutes with RMSNorm, and the maps are fused into the
//! neighbouring weight matrices. Magnitude pruning and PCA slicing reuse the
//! same fusion path as baselines.

pub mod calib;
pub mod compress;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod ot;
