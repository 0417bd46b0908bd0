//! Point-cloud regression toolkit for plot-level forest biomass and wood volume.
//!
//! The crate covers the whole pipeline: point cloud loading, normalization and
//! augmentation (`cloud`), dataset filtering and splitting (`dataset`), height
//! statistics for the classical baselines (`features`), the baselines themselves
//! (`baselines`), a sparse voxel tensor engine (`sparse`), a reverse-mode
//! autodiff core with layers and optimizer (`nn`), the three point-cloud
//! regression architectures (`models`), and a synthetic-data training and
//! evaluation harness (`harness`).
//!
//! All operations are deterministic given their seeds: parallel sections (behind
//! the default `parallel` feature) are ordered maps of pure functions, so results
//! are bit-identical across thread counts.

pub mod baselines;
pub mod cloud;
pub mod container;
pub mod dataset;
pub mod error;
pub mod features;
pub mod harness;
pub mod models;
pub mod nn;
pub mod par;
pub mod sparse;

pub use error::CanopyError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CanopyError>;
