//! Sparse voxel fields with learnable vertex embeddings.
//!
//! A scene is a sparse set of voxels carrying feature vectors at their
//! corners. Points inside a voxel are featurized by trilinear interpolation
//! plus positional encoding and passed through a small shared MLP that
//! predicts density and view-dependent color. Images are formed by a
//! differentiable ray marcher that samples only inside occupied voxels,
//! and the whole pipeline is trained end to end from posed images with
//! periodic voxel pruning and subdivision.
//!
//! Modules:
//! - [`geom`]: cameras, rays, boxes, and sparse-grid traversal
//! - [`grid`]: the sparse voxel structure and its embedding table
//! - [`field`]: feature aggregation, the MLP, and analytic gradients
//! - [`render`]: ray marching forward and backward, image rendering
//! - [`train`]: losses, Adam, and the progressive training loop
//! - [`scene`]: voxel editing and multi-instance composition
//! - [`dataset`]: posed-image datasets and the analytic tracer that
//!   generates synthetic ones
//! - [`metrics`]: PSNR and SSIM
//! - [`checkpoint`]: the on-disk model container

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod field;
pub mod geom;
pub mod grid;
pub mod metrics;
pub mod raster;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
