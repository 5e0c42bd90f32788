//! Stereo obstacle detection and tracking on voxel grids.
//!
//! Two rectified images pass through a shared [`backbone`] into feature
//! pyramids. Voxel queries gather matching costs from both pyramids by
//! deformable cross-attention ([`costvolume`]), a 3D [`decoder`] turns the
//! cost volume into a four-level occupancy pyramid, and the [`tracker`]
//! matches finest-level voxels across frames within a motion-limited box.
//! [`synthdata`] renders scenes with exact ground truth, [`losses`] and
//! [`metrics`] score the outputs, and [`pipeline`] ties training,
//! evaluation and inference together.
//!
//! ```
//! use voxtrack::geometry::{bound_dims, VoxelGridSpec};
//!
//! let spec = VoxelGridSpec::paper();
//! assert_eq!(spec.dims(4), [48, 16, 80]);
//! let b = bound_dims(33.3, 26.0, spec.finest_size()).unwrap();
//! assert_eq!((b.x, b.y, b.z), (9, 3, 9));
//! ```

pub mod backbone;
pub mod costvolume;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
mod nn;
pub mod pipeline;
pub mod synthdata;
pub mod tracker;

pub use error::{Error, Result};
pub use voxtrack_tape as tape;

/// The guide's chapters, so `cargo test --doc` runs their snippets.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/grids.md")]
    mod grids {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/tracking.md")]
    mod tracking {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
