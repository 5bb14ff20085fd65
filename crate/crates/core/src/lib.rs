//! Connectivity-based parcellation of a voxel structure from streamline
//! cluster intersections.
//!
//! The pipeline: per-voxel cluster features ([`features`]), a dense
//! convolutional autoencoder ([`net`]) trained jointly with k-means
//! ([`train`]), and the evaluation metrics in [`metrics`]. [`phantom`]
//! generates synthetic subjects with known ground truth and [`io`] holds the
//! on-disk formats.

pub mod error;
pub mod features;
pub mod io;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod train;
pub mod voxelgrid;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
