//! Report-derived supervision for 3D tumor segmentation.
//!
//! Structured radiology findings (organ, tumor count, diameters) become
//! voxel-wise training signals for a tumor probability grid:
//!
//! * [`volume_loss`] matches the segmented tumor volume of each organ to the
//!   volume estimated from reported diameters, with a tolerance dead zone and
//!   a background term outside the organ.
//! * [`ball_loss`] localizes every reported tumor with a Gaussian-weighted
//!   ball convolution, builds a pseudo-mask with the reported count and
//!   volumes, and scores predictions against it with weighted CE + Dice.
//!
//! [`phantom`] renders synthetic organs and tumors with exact ground truth and
//! [`metrics`] provides Dice, NSD and case-level detection F1.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod ball_loss;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod metrics;
pub mod morphology;
pub mod phantom;
pub mod report;
pub mod sum;
pub mod volume_loss;

pub use error::{Error, Result};
pub use grid::{Coverage, Mask, OrganMaskSet, Patch, ProbGrid, Shape3, Spacing, VoxelGrid};
pub use report::{OrganVocabulary, OrganVolumeTarget, ReportFindings, TumorFinding};

/// Weight of the standard segmentation losses on mask-supervised samples.
pub const SEGMENTATION_LOSS_WEIGHT: f64 = 1.0;
/// Weight of the Volume and Ball losses on report-supervised samples.
pub const REPORT_LOSS_WEIGHT: f64 = 0.1;
