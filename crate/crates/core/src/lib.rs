//! Desk-scale toolkit for LiDAR-camera video panoptic segmentation.
//!
//! * [`depth`]: disparity conversion, beam-binned LiDAR simulation, ray-drop
//!   and morphological depth completion.
//! * [`fusion`]: gated image/depth feature fusion with analytic gradients.
//! * [`decoder`]: a toy masked-attention query decoder with location-aware
//!   and time-aware queries.
//! * [`tracking`]: cost matrices, Hungarian assignment and track-id propagation.
//! * [`metrics`]: PQ and VPQ evaluation.
//! * [`formats`]: on-disk tensors, PNGs, manifests and query sidecars.
//! * [`pipeline`]: the synthetic end-to-end demo.

pub mod decoder;
pub mod depth;
pub mod error;
pub mod formats;
pub mod fusion;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod tracking;

pub use error::{Error, Result};

/// Toolkit version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
