//! File formats, parallel drivers and CLI plumbing for `reportsup-core`.
//!
//! * [`grid_io`]: raw little-endian grids with a sidecar JSON header.
//! * [`report_io`]: JSON / JSONL report records with field-level diagnostics.
//! * [`vocab`]: organ vocabulary config files.
//! * [`phantom_io`]: phantom batch specs and their on-disk output.
//! * [`evaluate`]: cohort metrics over prediction / truth directories.
//! * [`parallel`]: multi-threaded kernels matching the serial results bit for bit.
//! * [`commands`]: the operations behind each CLI subcommand.

pub mod commands;
pub mod error;
pub mod evaluate;
pub mod grid_io;
pub mod parallel;
pub mod phantom_io;
pub mod report_io;
pub mod vocab;

pub use error::{IoError, Result};
pub use reportsup_core as core;
