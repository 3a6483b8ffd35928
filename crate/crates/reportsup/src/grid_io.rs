//! Raw voxel grids with a sidecar JSON header.
//!
//! A grid stored at `name.bin` consists of the little-endian payload in
//! `name.bin` and a header in `name.bin.json`:
//!
//! ```json
//! {"shape":[H,W,L],"spacing_mm":[sh,sw,sl],"dtype":"f32","order":"row-major"}
//! ```
//!
//! The payload holds exactly `H·W·L` elements with `l` varying fastest.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use reportsup_core::{Mask, ProbGrid, Shape3, Spacing, VoxelGrid};

use crate::error::{io_err, IoError, Result};

pub const ROW_MAJOR: &str = "row-major";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: Dtype,
    pub order: String,
}

/// Grid payload in its on-disk element type.
#[derive(Debug, Clone, PartialEq)]
pub enum GridData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl GridData {
    pub fn dtype(&self) -> Dtype {
        match self {
            GridData::F32(_) => Dtype::F32,
            GridData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            GridData::F32(v) => v.len(),
            GridData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Little-endian payload bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            GridData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            GridData::U8(v) => v.clone(),
        }
    }

    fn from_le_bytes(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => GridData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            ),
            Dtype::U8 => GridData::U8(bytes.to_vec()),
        }
    }
}

/// A grid exactly as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGrid {
    pub shape: Shape3,
    pub spacing: Spacing,
    pub data: GridData,
}

impl RawGrid {
    pub fn new(shape: Shape3, spacing: Spacing, data: GridData) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(reportsup_core::Error::DataLength { len: data.len(), expected: shape.len() }.into());
        }
        Ok(Self { shape, spacing, data })
    }

    pub fn header(&self) -> GridHeader {
        GridHeader {
            shape: self.shape.to_array(),
            spacing_mm: self.spacing.0,
            dtype: self.data.dtype(),
            order: ROW_MAJOR.to_string(),
        }
    }

    /// Probability grid stored as `f32`; values are rounded to nearest.
    pub fn from_probs(grid: &ProbGrid) -> Self {
        Self {
            shape: grid.shape(),
            spacing: grid.spacing(),
            data: GridData::F32(grid.data().iter().map(|v| *v as f32).collect()),
        }
    }

    pub fn from_mask(mask: &Mask) -> Self {
        Self { shape: mask.shape(), spacing: mask.spacing(), data: GridData::U8(mask.data().to_vec()) }
    }

    /// Widens an `f32` grid to a validated probability grid.
    pub fn into_probs(self) -> Result<ProbGrid> {
        let values = match self.data {
            GridData::F32(v) => v.into_iter().map(f64::from).collect(),
            GridData::U8(_) => return Err(reportsup_core::Error::InvalidConfig("expected an f32 probability grid").into()),
        };
        let grid = VoxelGrid::new(self.shape, self.spacing, values)?;
        grid.validate_probabilities()?;
        Ok(grid)
    }

    /// Widens an `f32` grid without range validation (e.g. gradients).
    pub fn into_f64(self) -> Result<ProbGrid> {
        match self.data {
            GridData::F32(v) => Ok(VoxelGrid::new(self.shape, self.spacing, v.into_iter().map(f64::from).collect())?),
            GridData::U8(v) => Ok(VoxelGrid::new(self.shape, self.spacing, v.into_iter().map(f64::from).collect())?),
        }
    }

    /// Interprets a `u8` grid as a validated binary mask.
    pub fn into_mask(self) -> Result<Mask> {
        match self.data {
            GridData::U8(v) => {
                let mask = VoxelGrid::new(self.shape, self.spacing, v)?;
                mask.validate_binary()?;
                Ok(mask)
            }
            GridData::F32(_) => Err(reportsup_core::Error::InvalidConfig("expected a u8 mask grid").into()),
        }
    }
}

/// Path of the JSON header belonging to a payload file.
pub fn header_path(payload: &Path) -> PathBuf {
    let mut name: OsString = payload.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn read_header(payload: &Path) -> Result<GridHeader> {
    let path = header_path(payload);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let header: GridHeader = serde_json::from_str(&text)
        .map_err(|e| IoError::HeaderMismatch { path: path.clone(), reason: e.to_string() })?;
    let mismatch = |reason: &str| IoError::HeaderMismatch { path: path.clone(), reason: reason.to_string() };
    if header.order != ROW_MAJOR {
        return Err(mismatch("order must be \"row-major\""));
    }
    Shape3::from_array(header.shape).map_err(|_| mismatch("shape components must be positive"))?;
    Spacing::new(header.spacing_mm).map_err(|_| mismatch("spacing components must be finite and positive"))?;
    Ok(header)
}

/// Reads the header and payload of a grid.
pub fn read_grid(payload: &Path) -> Result<RawGrid> {
    let header = read_header(payload)?;
    let bytes = fs::read(payload).map_err(io_err(payload))?;
    let shape = Shape3::from_array(header.shape)?;
    let expected = (shape.len() * header.dtype.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(IoError::TruncatedPayload { path: payload.to_path_buf(), expected, actual: bytes.len() as u64 });
    }
    RawGrid::new(shape, Spacing::new(header.spacing_mm)?, GridData::from_le_bytes(header.dtype, &bytes))
}

/// Writes the payload and its header, creating parent directories.
pub fn write_grid(grid: &RawGrid, payload: &Path) -> Result<()> {
    if let Some(dir) = payload.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let header = serde_json::to_string(&grid.header()).expect("header serializes");
    let hpath = header_path(payload);
    fs::write(&hpath, header).map_err(io_err(&hpath))?;
    fs::write(payload, grid.data.to_le_bytes()).map_err(io_err(payload))
}

pub fn read_probs(payload: &Path) -> Result<ProbGrid> {
    read_grid(payload)?.into_probs()
}

pub fn read_mask(payload: &Path) -> Result<Mask> {
    read_grid(payload)?.into_mask()
}

pub fn write_probs(grid: &ProbGrid, payload: &Path) -> Result<()> {
    write_grid(&RawGrid::from_probs(grid), payload)
}

pub fn write_mask(mask: &Mask, payload: &Path) -> Result<()> {
    write_grid(&RawGrid::from_mask(mask), payload)
}
