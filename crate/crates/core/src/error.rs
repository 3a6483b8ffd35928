use alloc::string::String;

use crate::grid::Shape3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("tumor finding has no diameters")]
    SizeMissing,
    #[error("invalid diameter {0} mm (must be finite and > 0)")]
    InvalidDiameter(f64),
    #[error("at most 3 diameters per tumor, got {0}")]
    TooManyDiameters(usize),
    #[error("unknown organ `{0}`")]
    UnknownOrgan(String),
    #[error("report `{ct_id}`: {reason}")]
    InvalidReport { ct_id: String, reason: String },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Shape3, right: Shape3 },
    #[error("spacing mismatch: {left:?} vs {right:?}")]
    SpacingMismatch { left: [f64; 3], right: [f64; 3] },
    #[error("invalid spacing {0:?} (components must be finite and > 0)")]
    InvalidSpacing([f64; 3]),
    #[error("invalid shape {0:?} (extents must be > 0)")]
    InvalidShape([usize; 3]),
    #[error("data length {len} does not match shape product {expected}")]
    DataLength { len: usize, expected: usize },
    #[error("value {value} at index {index} outside [0, 1]")]
    ProbabilityRange { index: usize, value: f64 },
    #[error("mask value {value} at index {index} is not 0 or 1")]
    NonBinaryMask { index: usize, value: u8 },
    #[error("patch {origin:?}+{shape:?} does not fit parent {parent:?}")]
    PatchOutOfBounds { origin: [usize; 3], shape: [usize; 3], parent: [usize; 3] },
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
    #[error("organ `{0}` is not fully inside the patch")]
    CoverageViolation(String),
    #[error("organ `{0}` has tumors without reported sizes and is excluded")]
    ExcludedOrgan(String),
    #[error("organ mask is empty")]
    EmptyOrgan,
    #[error("target for organ `{0}` has no sized tumors")]
    NoTumors(String),
    #[error("kernel {kernel:?} larger than organ bounding box {bbox:?}")]
    KernelExceedsGrid { kernel: [usize; 3], bbox: [usize; 3] },
    #[error("tumor {0} lies (partly) outside its organ")]
    TumorOutsideOrgan(usize),
    #[error("phantom references undefined organ `{0}`")]
    PhantomOrgan(String),
    #[error("cohort needs at least one positive and one negative case")]
    DegenerateCohort,
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    CohortLength { scores: usize, labels: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
