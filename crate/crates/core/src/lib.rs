//! Anchor-aligned 3D Gaussian splatting at desk scale.
//!
//! The crate turns posed RGB-D views into a sparse set of 3D anchors, grows a
//! fixed number of Gaussians from each anchor (either by direct optimization
//! or through a small trainable decoder), renders them with a differentiable
//! tile-based rasterizer and improves them with an error-driven refiner.
//!
//! Module map:
//! - [`cameras`]: pinhole model, back-projection, Plücker ray embeddings
//! - [`anchors`]: clipping, voxel budget, farthest point sampling
//! - [`scene`]: Gaussian parameterization, activations, PLY I/O
//! - [`raster`]: forward and backward splatting
//! - [`features`], [`decoder`], [`refiner`]: the learned path
//! - [`objectives`]: losses and metrics
//! - [`pipeline`]: fitting, training, rendering, evaluation, ablations

pub mod anchors;
pub mod autodiff;
pub mod cameras;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod error;
pub mod features;
pub mod image;
pub mod linalg;
pub mod manifest;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod raster;
pub mod refiner;
pub mod scene;
pub mod synth;

pub use error::{Error, Result};
