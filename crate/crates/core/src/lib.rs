//! Core algorithms for a LiDAR-camera fusion detection pipeline.
//!
//! The crate is organised around a small dense-tensor engine with
//! reverse-mode gradients ([`graph`], [`tensor`], [`params`]) on top of
//! which the pipeline stages are built:
//!
//! * [`voxel`] — partition a range-cropped point cloud into voxels and
//!   scatter per-voxel features onto a bird's-eye-view grid,
//! * [`vlpm`] — per-voxel point attention and dynamic point weighting
//!   that turn raw points into one feature vector per voxel,
//! * [`streams`] — stand-in single-modal encoders for the LiDAR (BEV)
//!   and camera streams,
//! * [`mffm`] — pooled cross-attention fusion of the two streams,
//! * [`head`] — a one-stage anchor head with focal / smooth-L1 /
//!   direction losses,
//! * [`train`] — a plain gradient-descent loop for synthetic-scene
//!   overfitting,
//! * [`gradcheck`] — an independent central-difference gradient oracle.
//!
//! Everything here is pure computation over in-memory buffers; file
//! formats, the CLI and threading live in the companion `mmfusion`
//! crate. The crate builds without `std` (with `alloc`) so the kernels
//! can be reused in constrained environments.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cloud;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod kernels;
pub mod mffm;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod streams;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vlpm;
pub mod voxel;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::{FcBlockSpec, ParamStore};
pub use pipeline::{PipelineConfig, Precision};
pub use scalar::Scalar;
pub use tensor::Tensor;
