//! Trackerless freehand pose-chain reconstruction with privileged auxiliary
//! classification tasks whose branch locations are learned.
//!
//! Modules, bottom-up:
//! - [`geometry`]: rigid transforms, frame corners and pixel grids, pose chains
//! - [`phantom`]: procedural subjects, protocol trajectories, scan rendering
//! - [`dataset`]: splits, variance-reduction subsets, subsequence sampling
//! - [`model`]: convolutional backbone with tap points, heads, descriptor gating
//! - [`training`]: losses, first-order bi-level optimization, checkpoints
//! - [`evaluation`]: frame, accumulated, dice and drift metrics
//! - [`harness`]: experiment plans and the CLI commands

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod phantom;
pub mod seeds;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{FrameGeometry, PoseChain, RigidTransform};
