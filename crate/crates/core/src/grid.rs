//! Dense voxel grids, organ masks, patch geometry and masked volume integration.
//!
//! Voxels are stored row-major with `l` varying fastest:
//! `index = (h * W + w) * L + l`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::sum::pairwise_sum_by;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub l: usize,
}

impl Shape3 {
    pub const fn new(h: usize, w: usize, l: usize) -> Self {
        Self { h, w, l }
    }

    pub fn from_array(dims: [usize; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidShape(dims));
        }
        Ok(Self::new(dims[0], dims[1], dims[2]))
    }

    pub const fn to_array(self) -> [usize; 3] {
        [self.h, self.w, self.l]
    }

    /// Number of voxels.
    pub const fn len(self) -> usize {
        self.h * self.w * self.l
    }

    pub const fn is_empty(self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(self, h: usize, w: usize, l: usize) -> usize {
        (h * self.w + w) * self.l + l
    }

    #[inline]
    pub const fn coords(self, index: usize) -> [usize; 3] {
        let l = index % self.l;
        let rest = index / self.l;
        [rest / self.w, rest % self.w, l]
    }

    /// Linear index of a signed coordinate, or `None` when it falls outside.
    #[inline]
    pub fn checked_index(self, h: isize, w: isize, l: isize) -> Option<usize> {
        if h < 0 || w < 0 || l < 0 {
            return None;
        }
        let (h, w, l) = (h as usize, w as usize, l as usize);
        if h >= self.h || w >= self.w || l >= self.l {
            return None;
        }
        Some(self.index(h, w, l))
    }
}

/// Physical voxel size in millimetres along (h, w, l).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub const ISOTROPIC_1MM: Spacing = Spacing([1.0, 1.0, 1.0]);

    pub fn new(spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidSpacing(spacing));
        }
        Ok(Self(spacing))
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.0[0] * self.0[1] * self.0[2]
    }
}

/// Dense 3D scalar field with anisotropic spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<T> {
    shape: Shape3,
    spacing: Spacing,
    data: Vec<T>,
}

/// Probability (or any real-valued) grid.
pub type ProbGrid = VoxelGrid<f64>;
/// Binary mask with values in {0, 1}.
pub type Mask = VoxelGrid<u8>;

impl<T> VoxelGrid<T> {
    pub fn new(shape: Shape3, spacing: Spacing, data: Vec<T>) -> Result<Self> {
        Shape3::from_array(shape.to_array())?;
        Spacing::new(spacing.0)?;
        if data.len() != shape.len() {
            return Err(Error::DataLength { len: data.len(), expected: shape.len() });
        }
        Ok(Self { shape, spacing, data })
    }

    pub fn from_fn<F: FnMut(usize, usize, usize) -> T>(
        shape: Shape3,
        spacing: Spacing,
        mut f: F,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for h in 0..shape.h {
            for w in 0..shape.w {
                for l in 0..shape.l {
                    data.push(f(h, w, l));
                }
            }
        }
        Self::new(shape, spacing, data)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, l: usize) -> &T {
        &self.data[self.shape.index(h, w, l)]
    }

    #[inline]
    pub fn get_mut(&mut self, h: usize, w: usize, l: usize) -> &mut T {
        let i = self.shape.index(h, w, l);
        &mut self.data[i]
    }

    pub fn map<U, F: FnMut(&T) -> U>(&self, f: F) -> VoxelGrid<U> {
        VoxelGrid {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Errors unless `other` has the same shape and spacing.
    pub fn check_geometry<U>(&self, other: &VoxelGrid<U>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { left: self.shape, right: other.shape });
        }
        if self.spacing != other.spacing {
            return Err(Error::SpacingMismatch { left: self.spacing.0, right: other.spacing.0 });
        }
        Ok(())
    }
}

impl<T: Clone> VoxelGrid<T> {
    pub fn filled(shape: Shape3, spacing: Spacing, value: T) -> Result<Self> {
        Self::new(shape, spacing, alloc::vec![value; shape.len()])
    }
}

impl ProbGrid {
    /// Checks every value lies in [0, 1].
    pub fn validate_probabilities(&self) -> Result<()> {
        match self.data.iter().position(|t| !(0.0..=1.0).contains(t)) {
            Some(index) => Err(Error::ProbabilityRange { index, value: self.data[index] }),
            None => Ok(()),
        }
    }

    /// Elementwise product with a binary mask (`t ⊗ o`).
    pub fn masked(&self, mask: &Mask) -> Result<ProbGrid> {
        self.check_geometry(mask)?;
        let data = self
            .data
            .iter()
            .zip(&mask.data)
            .map(|(t, o)| if *o != 0 { *t } else { 0.0 })
            .collect();
        Ok(VoxelGrid { shape: self.shape, spacing: self.spacing, data })
    }
}

impl Mask {
    pub fn validate_binary(&self) -> Result<()> {
        match self.data.iter().position(|o| *o > 1) {
            Some(index) => Err(Error::NonBinaryMask { index, value: self.data[index] }),
            None => Ok(()),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|o| **o != 0).count()
    }

    /// Inclusive bounding box of the nonzero voxels.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut bb: Option<BoundingBox> = None;
        for (i, o) in self.data.iter().enumerate() {
            if *o == 0 {
                continue;
            }
            let c = self.shape.coords(i);
            match bb.as_mut() {
                None => bb = Some(BoundingBox { min: c, max: c }),
                Some(b) => {
                    for ((lo, hi), v) in b.min.iter_mut().zip(b.max.iter_mut()).zip(c) {
                        *lo = (*lo).min(v);
                        *hi = (*hi).max(v);
                    }
                }
            }
        }
        bb
    }
}

/// Inclusive voxel-index box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn extent(&self) -> [usize; 3] {
        [
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        ]
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= c[a] && c[a] <= self.max[a])
    }
}

/// A sub-box of a parent volume used as a training patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    origin: [usize; 3],
    shape: Shape3,
    parent: Shape3,
}

impl Patch {
    pub fn new(origin: [usize; 3], shape: Shape3, parent: Shape3) -> Result<Self> {
        let fits = (0..3).all(|a| {
            shape.to_array()[a] > 0 && origin[a] + shape.to_array()[a] <= parent.to_array()[a]
        });
        if !fits {
            return Err(Error::PatchOutOfBounds {
                origin,
                shape: shape.to_array(),
                parent: parent.to_array(),
            });
        }
        Ok(Self { origin, shape, parent })
    }

    pub fn origin(&self) -> [usize; 3] {
        self.origin
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn parent_shape(&self) -> Shape3 {
        self.parent
    }

    /// Whether a parent-volume coordinate lies inside the patch.
    pub fn contains(&self, c: [usize; 3]) -> bool {
        let s = self.shape.to_array();
        (0..3).all(|a| c[a] >= self.origin[a] && c[a] < self.origin[a] + s[a])
    }

    /// Copies the patch region out of a parent-volume grid.
    pub fn crop<T: Clone>(&self, grid: &VoxelGrid<T>) -> Result<VoxelGrid<T>> {
        if grid.shape() != self.parent {
            return Err(Error::ShapeMismatch { left: grid.shape(), right: self.parent });
        }
        let [h0, w0, l0] = self.origin;
        VoxelGrid::from_fn(self.shape, grid.spacing(), |h, w, l| {
            grid.get(h0 + h, w0 + w, l0 + l).clone()
        })
    }
}

/// Where an organ lies relative to the current patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Coverage {
    FullyInside,
    Partial,
    Absent,
}

/// Classifies a parent-volume organ mask against a patch.
pub fn organ_coverage(patch: &Patch, organ_mask_full: &Mask) -> Coverage {
    let shape = organ_mask_full.shape();
    let (mut inside, mut outside) = (false, false);
    for (i, o) in organ_mask_full.data().iter().enumerate() {
        if *o == 0 {
            continue;
        }
        if patch.contains(shape.coords(i)) {
            inside = true;
        } else {
            outside = true;
        }
        if inside && outside {
            return Coverage::Partial;
        }
    }
    if inside {
        Coverage::FullyInside
    } else if outside {
        Coverage::Partial
    } else {
        Coverage::Absent
    }
}

/// Per-organ binary masks sharing one geometry, with patch coverage flags.
#[derive(Debug, Clone)]
pub struct OrganMaskSet {
    shape: Shape3,
    spacing: Spacing,
    grids: BTreeMap<String, Mask>,
    coverage: BTreeMap<String, Coverage>,
}

impl OrganMaskSet {
    pub fn new(shape: Shape3, spacing: Spacing) -> Self {
        Self { shape, spacing, grids: BTreeMap::new(), coverage: BTreeMap::new() }
    }

    /// Crops parent-volume masks to `patch` and records each organ's coverage.
    pub fn for_patch<'a, I>(patch: &Patch, spacing: Spacing, full_masks: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a Mask)>,
    {
        let mut set = Self::new(patch.shape(), spacing);
        for (id, full) in full_masks {
            let coverage = organ_coverage(patch, full);
            set.insert(id, patch.crop(full)?, coverage)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, organ_id: &str, mask: Mask, coverage: Coverage) -> Result<()> {
        if mask.shape() != self.shape {
            return Err(Error::ShapeMismatch { left: self.shape, right: mask.shape() });
        }
        if mask.spacing() != self.spacing {
            return Err(Error::SpacingMismatch { left: self.spacing.0, right: mask.spacing().0 });
        }
        mask.validate_binary()?;
        self.grids.insert(organ_id.into(), mask);
        self.coverage.insert(organ_id.into(), coverage);
        Ok(())
    }

    pub fn mask(&self, organ_id: &str) -> Option<&Mask> {
        self.grids.get(organ_id)
    }

    pub fn coverage(&self, organ_id: &str) -> Option<Coverage> {
        self.coverage.get(organ_id).copied()
    }

    pub fn organs(&self) -> impl Iterator<Item = &str> {
        self.grids.keys().map(String::as_str)
    }
}

/// Segmented tumor volume `Σ t·o·v` in mm³.
pub fn segmented_volume(probs: &ProbGrid, mask: &Mask) -> Result<f64> {
    probs.check_geometry(mask)?;
    let (t, o) = (probs.data(), mask.data());
    let sum = pairwise_sum_by(t.len(), |i| if o[i] != 0 { t[i] } else { 0.0 });
    Ok(sum * probs.spacing().voxel_volume())
}

/// Gradient of [`segmented_volume`] with respect to each probability: `o·v`.
pub fn segmented_volume_grad(mask: &Mask) -> ProbGrid {
    let v = mask.spacing().voxel_volume();
    mask.map(|o| if *o != 0 { v } else { 0.0 })
}

/// Trilinear resampling to `new_shape` over the same physical extent.
///
/// Output voxel centres are mapped onto input index space with
/// `x = (i + 0.5) * n_in / n_out - 0.5`; coordinates beyond the outermost
/// voxel centres are clamped to the edge value.
pub fn trilinear_resample(grid: &ProbGrid, new_shape: Shape3) -> Result<ProbGrid> {
    Shape3::from_array(new_shape.to_array())?;
    let src = grid.shape().to_array();
    let dst = new_shape.to_array();
    let old = grid.spacing().0;
    let spacing = Spacing::new([
        old[0] * src[0] as f64 / dst[0] as f64,
        old[1] * src[1] as f64 / dst[1] as f64,
        old[2] * src[2] as f64 / dst[2] as f64,
    ])?;

    // (lower index, upper index, weight of upper) per output coordinate and axis
    let axis_samples = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..dst[a])
            .map(|i| {
                let x = (i as f64 + 0.5) * src[a] as f64 / dst[a] as f64 - 0.5;
                let x = x.clamp(0.0, (src[a] - 1) as f64);
                let lo = libm::floor(x) as usize;
                let hi = (lo + 1).min(src[a] - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    };
    let (sh, sw, sl) = (axis_samples(0), axis_samples(1), axis_samples(2));
    VoxelGrid::from_fn(new_shape, spacing, |h, w, l| {
        let (h0, h1, fh) = sh[h];
        let (w0, w1, fw) = sw[w];
        let (l0, l1, fl) = sl[l];
        let at = |a: usize, b: usize, c: usize| *grid.get(a, b, c);
        let c00 = at(h0, w0, l0) * (1.0 - fl) + at(h0, w0, l1) * fl;
        let c01 = at(h0, w1, l0) * (1.0 - fl) + at(h0, w1, l1) * fl;
        let c10 = at(h1, w0, l0) * (1.0 - fl) + at(h1, w0, l1) * fl;
        let c11 = at(h1, w1, l0) * (1.0 - fl) + at(h1, w1, l1) * fl;
        let c0 = c00 * (1.0 - fw) + c01 * fw;
        let c1 = c10 * (1.0 - fw) + c11 * fw;
        c0 * (1.0 - fh) + c1 * fh
    })
}
