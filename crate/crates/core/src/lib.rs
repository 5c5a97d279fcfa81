//! Partial liver volume change between paired inspiration and expiration CT.
//!
//! The fixed (inspiration) scan is registered to the moving (expiration) scan
//! with an affine stage followed by a multi-resolution B-spline free-form
//! deformation. The Jacobian determinant of the resulting map is summed over
//! the liver mask, restricted to voxels that stay inside the moving scan's
//! field of view, giving the volume change of the visible part of the liver.
//!
//! ```no_run
//! use repeat_core::pipeline::{run_pipeline, PipelineConfig, PipelineInputs};
//! use std::path::Path;
//!
//! let inputs = PipelineInputs {
//!     fixed: Path::new("insp.nii.gz"),
//!     moving: Path::new("exp.nii.gz"),
//!     mask: Path::new("liver.nii.gz"),
//! };
//! let out = run_pipeline(&inputs, &PipelineConfig::default(), Path::new("run"), true)?;
//! println!("{:+.2}%", out.report.delta_percent);
//! # Ok::<(), repeat_core::Error>(())
//! ```

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod deformation_analysis;
mod error;
pub mod grid_ops;
mod parallel;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod volume_change;
pub mod volume_io;

pub use error::{Error, Result};
