//! Foreground-sampled sparse-voxel sequence encoding.
//!
//! The pipeline voxelizes LiDAR-style point clouds, scores and samples
//! foreground voxels, serializes them along space-filling curves under
//! multiple Z-axis rotations, encodes the sequences with a selective
//! state-space model wrapped in a regional-to-global sliding window, and
//! fuses state variables across semantic groups and 3-D neighborhoods.
//! A synthetic-scene harness trains the whole stack end to end.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod params;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
