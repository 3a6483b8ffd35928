//! Ball Loss: greedy report-guided pseudo-masks and the losses against them.
//!
//! Each reported tumor of an organ, largest first, is localized by sliding a
//! Gaussian-weighted ball over the organ-masked probabilities. The `N` most
//! probable unassigned organ voxels inside the best ball become that tumor's
//! label (`N` = report volume in voxels) and are zeroed before the next tumor
//! is placed.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{BoundingBox, Mask, ProbGrid, Shape3, Spacing, VoxelGrid};
use crate::morphology::border_band;
use crate::report::OrganVolumeTarget;
use crate::sum::pairwise_sum_by;

/// How tumor voxels are weighted in the cross-entropy term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CeWeightMode {
    /// `t / mean(t)` over tumor voxels, clamped to `ce_weight_clamp`.
    #[default]
    PredictedProbability,
    Uniform,
}

/// Algorithm used for ball scores inside [`place_tumors`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScoreMethod {
    /// Sliding window over every kernel offset, same order as [`ball_convolve`].
    Direct,
    /// Ball decomposed into l-rows with running 1D Gaussian window sums.
    #[default]
    Rows,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct BallLossConfig {
    /// Ball diameter = reported largest diameter × (1 + margin).
    pub diameter_margin_frac: f64,
    /// Gaussian std as a fraction of the ball diameter.
    pub gaussian_std_frac: f64,
    /// Half-width of the unpenalized band around label borders, in voxels.
    pub border_margin_vox: usize,
    pub ce_weight_mode: CeWeightMode,
    pub ce_weight_clamp: [f64; 2],
    /// Probability clamp for the cross-entropy logs.
    pub ce_eps: f64,
    pub dsc_smooth: f64,
    pub score_method: ScoreMethod,
}

impl Default for BallLossConfig {
    fn default() -> Self {
        Self {
            diameter_margin_frac: 0.20,
            gaussian_std_frac: 0.75,
            border_margin_vox: 1,
            ce_weight_mode: CeWeightMode::PredictedProbability,
            ce_weight_clamp: [0.1, 10.0],
            ce_eps: 1e-7,
            dsc_smooth: 1.0,
            score_method: ScoreMethod::Rows,
        }
    }
}

impl BallLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.diameter_margin_frac >= 0.0 && self.diameter_margin_frac.is_finite()) {
            return Err(Error::InvalidConfig("diameter_margin_frac must be >= 0"));
        }
        if !(self.gaussian_std_frac > 0.0 && self.gaussian_std_frac.is_finite()) {
            return Err(Error::InvalidConfig("gaussian_std_frac must be > 0"));
        }
        let [lo, hi] = self.ce_weight_clamp;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig("ce_weight_clamp must satisfy 0 < lo <= hi"));
        }
        if !(self.ce_eps > 0.0 && self.ce_eps < 0.5) {
            return Err(Error::InvalidConfig("ce_eps must lie in (0, 0.5)"));
        }
        if !(self.dsc_smooth >= 0.0 && self.dsc_smooth.is_finite()) {
            return Err(Error::InvalidConfig("dsc_smooth must be >= 0"));
        }
        Ok(())
    }
}

/// Odd-sized, Gaussian-weighted spherical stencil for one reported diameter.
#[derive(Debug, Clone, PartialEq)]
pub struct BallKernel {
    reported_diameter_mm: f64,
    diameter_mm: f64,
    sigma_mm: f64,
    spacing: Spacing,
    size: Shape3,
    weights: Vec<f64>,
}

impl BallKernel {
    /// Diameter after the margin is applied.
    pub fn diameter_mm(&self) -> f64 {
        self.diameter_mm
    }

    pub fn reported_diameter_mm(&self) -> f64 {
        self.reported_diameter_mm
    }

    pub fn radius_mm(&self) -> f64 {
        self.diameter_mm / 2.0
    }

    pub fn sigma_mm(&self) -> f64 {
        self.sigma_mm
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn size(&self) -> Shape3 {
        self.size
    }

    /// Half-extent per axis: `(size - 1) / 2`.
    pub fn half(&self) -> [usize; 3] {
        [(self.size.h - 1) / 2, (self.size.w - 1) / 2, (self.size.l - 1) / 2]
    }

    /// Weights in row-major kernel order.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at a signed offset from the centre (0 outside the stencil).
    pub fn weight(&self, dh: isize, dw: isize, dl: isize) -> f64 {
        let [hh, hw, hl] = self.half().map(|v| v as isize);
        if dh.abs() > hh || dw.abs() > hw || dl.abs() > hl {
            return 0.0;
        }
        self.weights[self.size.index((dh + hh) as usize, (dw + hw) as usize, (dl + hl) as usize)]
    }

    /// Nonzero taps as `(dh, dw, dl, weight)` in row-major kernel order.
    pub fn taps(&self) -> Vec<(isize, isize, isize, f64)> {
        let [hh, hw, hl] = self.half().map(|v| v as isize);
        let mut taps = Vec::new();
        for (i, w) in self.weights.iter().enumerate() {
            if *w != 0.0 {
                let [a, b, c] = self.size.coords(i);
                taps.push((a as isize - hh, b as isize - hw, c as isize - hl, *w));
            }
        }
        taps
    }

    /// Whether an offset lies inside the ball.
    pub fn contains(&self, dh: isize, dw: isize, dl: isize) -> bool {
        let half = self.half().map(|v| v as isize);
        if dh.abs() > half[0] || dw.abs() > half[1] || dl.abs() > half[2] {
            return false;
        }
        self.in_ball(self.offset_dist2(dh, dw, dl))
    }

    fn in_ball(&self, dist2: f64) -> bool {
        let r = self.radius_mm();
        dist2 <= r * r * (1.0 + 1e-12)
    }

    fn offset_dist2(&self, dh: isize, dw: isize, dl: isize) -> f64 {
        let s = self.spacing.0;
        let (a, b, c) = (dh as f64 * s[0], dw as f64 * s[1], dl as f64 * s[2]);
        a * a + b * b + c * c
    }
}

fn odd_extent(diameter_mm: f64, spacing_mm: f64) -> usize {
    // tolerate representation error such as 10 * 1.2 = 12.000000000000002
    let n = libm::ceil(diameter_mm / spacing_mm - 1e-9).max(1.0) as usize;
    if n.is_multiple_of(2) {
        n + 1
    } else {
        n
    }
}

/// Builds the ball kernel for a reported largest diameter.
pub fn build_ball_kernel(diameter_mm: f64, spacing: Spacing, cfg: &BallLossConfig) -> Result<BallKernel> {
    cfg.validate()?;
    if !(diameter_mm > 0.0 && diameter_mm.is_finite()) {
        return Err(Error::InvalidDiameter(diameter_mm));
    }
    let spacing = Spacing::new(spacing.0)?;
    let effective = diameter_mm * (1.0 + cfg.diameter_margin_frac);
    let sigma = cfg.gaussian_std_frac * effective;
    let s = spacing.0;
    let size = Shape3::new(odd_extent(effective, s[0]), odd_extent(effective, s[1]), odd_extent(effective, s[2]));
    let mut kernel = BallKernel {
        reported_diameter_mm: diameter_mm,
        diameter_mm: effective,
        sigma_mm: sigma,
        spacing,
        size,
        weights: vec![0.0; size.len()],
    };
    let [hh, hw, hl] = kernel.half().map(|v| v as isize);
    let two_var = 2.0 * sigma * sigma;
    for i in 0..size.len() {
        let [a, b, c] = size.coords(i);
        let d2 = kernel.offset_dist2(a as isize - hh, b as isize - hw, c as isize - hl);
        if kernel.in_ball(d2) {
            kernel.weights[i] = libm::exp(-d2 / two_var);
        }
    }
    Ok(kernel)
}

fn check_kernel_spacing(probs: &ProbGrid, kernel: &BallKernel) -> Result<()> {
    if probs.spacing() != kernel.spacing {
        return Err(Error::SpacingMismatch { left: probs.spacing().0, right: kernel.spacing.0 });
    }
    Ok(())
}

/// Ball score at `c` from a precomputed [`BallKernel::taps`] list; the
/// accumulation order is the tap order.
#[inline]
pub fn direct_score(probs: &ProbGrid, taps: &[(isize, isize, isize, f64)], c: [usize; 3]) -> f64 {
    let shape = probs.shape();
    let t = probs.data();
    let (h, w, l) = (c[0] as isize, c[1] as isize, c[2] as isize);
    let mut acc = 0.0;
    for &(dh, dw, dl, wt) in taps {
        if let Some(i) = shape.checked_index(h + dh, w + dw, l + dl) {
            acc += wt * t[i];
        }
    }
    acc
}

/// Stride-1, zero-padded ball convolution over the whole grid.
///
/// `score(c) = Σ_off w(off) · t(c + off)` accumulated in row-major kernel
/// order; output shape equals input shape.
pub fn ball_convolve(probs: &ProbGrid, kernel: &BallKernel) -> Result<ProbGrid> {
    check_kernel_spacing(probs, kernel)?;
    let taps = kernel.taps();
    let shape = probs.shape();
    VoxelGrid::from_fn(shape, probs.spacing(), |h, w, l| direct_score(probs, &taps, [h, w, l]))
}

/// Ball score of a single output voxel, same accumulation order as
/// [`ball_convolve`].
pub fn ball_score_at(probs: &ProbGrid, kernel: &BallKernel, c: [usize; 3]) -> f64 {
    direct_score(probs, &kernel.taps(), c)
}

/// Direct scores restricted to outputs inside `bbox`; zero elsewhere.
pub fn ball_convolve_direct_in_box(probs: &ProbGrid, kernel: &BallKernel, bbox: &BoundingBox) -> Result<ProbGrid> {
    check_kernel_spacing(probs, kernel)?;
    let taps = kernel.taps();
    let mut out = probs.map(|_| 0.0);
    let shape = probs.shape();
    for h in bbox.min[0]..=bbox.max[0] {
        for w in bbox.min[1]..=bbox.max[1] {
            for l in bbox.min[2]..=bbox.max[2] {
                out.data_mut()[shape.index(h, w, l)] = direct_score(probs, &taps, [h, w, l]);
            }
        }
    }
    Ok(out)
}

/// Row-decomposed scores for outputs inside `bbox`; probabilities outside
/// `bbox` are treated as zero and outputs outside it are zero.
///
/// The Gaussian factorizes per axis, and for every `(dh, dw)` the ball covers
/// a contiguous run `|dl| <= r(dh, dw)`. Running window sums
/// `A_r(c) = Σ_{|dl|<=r} g_l(dl)·t(c + dl)` are grown one `r` at a time and
/// each row adds `g_h(dh)·g_w(dw)·A_r(c + (dh, dw, 0))`. Cost is
/// `O(N · (rows + r_max))` instead of `O(N · taps)`. Agrees with
/// [`ball_convolve`] to rounding, not bit for bit.
pub fn ball_convolve_rows_in_box(probs: &ProbGrid, kernel: &BallKernel, bbox: &BoundingBox) -> Result<ProbGrid> {
    check_kernel_spacing(probs, kernel)?;
    let shape = probs.shape();
    let [eh, ew, el] = bbox.extent();
    let [hh, hw, hl] = kernel.half().map(|v| v as isize);
    let s = kernel.spacing.0;
    let two_var = 2.0 * kernel.sigma_mm * kernel.sigma_mm;
    let gauss = |k: isize, a: usize| {
        let x = k as f64 * s[a];
        libm::exp(-x * x / two_var)
    };
    let g_l: Vec<f64> = (0..=hl).map(|k| gauss(k, 2)).collect();

    // rows grouped by their l half-run
    let mut rows_by_run: Vec<Vec<(isize, isize, f64)>> = vec![Vec::new(); hl as usize + 1];
    for dh in -hh..=hh {
        for dw in -hw..=hw {
            let mut run: Option<usize> = None;
            for dl in 0..=hl {
                if kernel.in_ball(kernel.offset_dist2(dh, dw, dl)) {
                    run = Some(dl as usize);
                } else {
                    break;
                }
            }
            if let Some(r) = run {
                rows_by_run[r].push((dh, dw, gauss(dh, 0) * gauss(dw, 1)));
            }
        }
    }

    let local = |h: usize, w: usize, l: usize| (h * ew + w) * el + l;
    let t_local: Vec<f64> = {
        let mut v = vec![0.0; eh * ew * el];
        for h in 0..eh {
            for w in 0..ew {
                let base = shape.index(bbox.min[0] + h, bbox.min[1] + w, bbox.min[2]);
                v[local(h, w, 0)..local(h, w, 0) + el].copy_from_slice(&probs.data()[base..base + el]);
            }
        }
        v
    };
    let mut window = t_local.clone();
    let mut scores = vec![0.0; eh * ew * el];
    for (r, rows) in rows_by_run.iter().enumerate() {
        if r > 0 {
            let g = g_l[r];
            for h in 0..eh {
                for w in 0..ew {
                    let row = local(h, w, 0);
                    for l in 0..el {
                        let mut add = 0.0;
                        if l + r < el {
                            add += t_local[row + l + r];
                        }
                        if l >= r {
                            add += t_local[row + l - r];
                        }
                        window[row + l] += g * add;
                    }
                }
            }
        }
        for &(dh, dw, g) in rows {
            for h in 0..eh {
                let sh = h as isize + dh;
                if sh < 0 || sh >= eh as isize {
                    continue;
                }
                for w in 0..ew {
                    let sw = w as isize + dw;
                    if sw < 0 || sw >= ew as isize {
                        continue;
                    }
                    let src = local(sh as usize, sw as usize, 0);
                    let dst = local(h, w, 0);
                    let (src_row, dst_row) = (&window[src..src + el], &mut scores[dst..dst + el]);
                    for (d, a) in dst_row.iter_mut().zip(src_row) {
                        *d += g * *a;
                    }
                }
            }
        }
    }

    let mut out = probs.map(|_| 0.0);
    for h in 0..eh {
        for w in 0..ew {
            let base = shape.index(bbox.min[0] + h, bbox.min[1] + w, bbox.min[2]);
            out.data_mut()[base..base + el].copy_from_slice(&scores[local(h, w, 0)..local(h, w, 0) + el]);
        }
    }
    Ok(out)
}

/// Non-fatal conditions met while placing tumors.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum PlacementWarning {
    /// Fewer unassigned organ voxels inside the ball than the report volume
    /// requires; all of them were assigned.
    BallCapacityExceeded { tumor_index: usize, requested: usize, available: usize },
    /// The kernel is larger than the organ bounding box along some axis.
    KernelExceedsGrid { tumor_index: usize, kernel: [usize; 3], bbox: [usize; 3] },
}

/// One placed tumor.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Placement {
    /// Position in the target's largest-first tumor list.
    pub tumor_index: usize,
    /// Index of the finding in the source report.
    pub finding_index: usize,
    pub diameter_mm: f64,
    pub center: [usize; 3],
    pub score: f64,
    pub n_requested: usize,
    pub n_assigned: usize,
    /// Linear indices of the assigned voxels, ascending.
    pub voxels: Vec<usize>,
}

impl Placement {
    pub fn shortfall(&self) -> usize {
        self.n_requested - self.n_assigned
    }
}

/// Pseudo-label target built from a report.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub labels: Mask,
    pub ce_weights: ProbGrid,
    pub border_exclusion: Mask,
    pub placements: Vec<Placement>,
    pub warnings: Vec<PlacementWarning>,
}

impl PseudoMask {
    /// Derives the border band and CE weights for a fixed label set.
    pub fn from_labels(labels: Mask, probs: &ProbGrid, cfg: &BallLossConfig) -> Result<Self> {
        cfg.validate()?;
        probs.check_geometry(&labels)?;
        labels.validate_binary()?;
        let border_exclusion = border_band(&labels, cfg.border_margin_vox);
        let ce_weights = ce_weights(probs, &labels, &border_exclusion, cfg);
        Ok(Self { labels, ce_weights, border_exclusion, placements: Vec::new(), warnings: Vec::new() })
    }
}

fn ce_weights(probs: &ProbGrid, labels: &Mask, excluded: &Mask, cfg: &BallLossConfig) -> ProbGrid {
    let (t, y, x) = (probs.data(), labels.data(), excluded.data());
    let tumor = |i: usize| y[i] != 0 && x[i] == 0;
    let count = (0..t.len()).filter(|&i| tumor(i)).count();
    let mean = if count > 0 {
        pairwise_sum_by(t.len(), |i| if tumor(i) { t[i] } else { 0.0 }) / count as f64
    } else {
        0.0
    };
    let [lo, hi] = cfg.ce_weight_clamp;
    let mut w = probs.map(|_| 1.0);
    for (i, wi) in w.data_mut().iter_mut().enumerate() {
        if x[i] != 0 {
            *wi = 0.0;
        } else if y[i] != 0 && cfg.ce_weight_mode == CeWeightMode::PredictedProbability && mean > 0.0 {
            *wi = (t[i] / mean).clamp(lo, hi);
        }
    }
    w
}

/// `N` for a tumor: report volume in voxels, rounded half up, at least 1.
pub fn tumor_voxel_count(volume_mm3: f64, voxel_volume_mm3: f64) -> usize {
    (libm::floor(volume_mm3 / voxel_volume_mm3 + 0.5) as usize).max(1)
}

/// Greedy largest-first placement of an organ's reported tumors.
///
/// The ball centre is the highest-scoring organ voxel (ties to the lowest
/// linear index). Within the ball, the `N` unassigned organ voxels with the
/// highest current probability (ties to the lowest index) are labeled and
/// zeroed in the working copy before the next tumor is placed.
pub fn place_tumors(
    probs: &ProbGrid,
    organ_mask: &Mask,
    target: &OrganVolumeTarget,
    cfg: &BallLossConfig,
) -> Result<PseudoMask> {
    cfg.validate()?;
    probs.check_geometry(organ_mask)?;
    if target.excluded {
        return Err(Error::ExcludedOrgan(target.organ_id.clone()));
    }
    if target.per_tumor.is_empty() {
        return Err(Error::NoTumors(target.organ_id.clone()));
    }
    let bbox = organ_mask.bounding_box().ok_or(Error::EmptyOrgan)?;
    let shape = probs.shape();
    let spacing = probs.spacing();
    let organ = organ_mask.data();
    let voxel_volume = spacing.voxel_volume();

    let mut working = probs.masked(organ_mask)?;
    let mut labels = organ_mask.map(|_| 0u8);
    let mut placements = Vec::with_capacity(target.per_tumor.len());
    let mut warnings = Vec::new();

    for (tumor_index, tumor) in target.per_tumor.iter().enumerate() {
        let kernel = build_ball_kernel(tumor.diameter_mm, spacing, cfg)?;
        let kernel_size = kernel.size().to_array();
        if (0..3).any(|a| kernel_size[a] > bbox.extent()[a]) {
            warnings.push(PlacementWarning::KernelExceedsGrid {
                tumor_index,
                kernel: kernel_size,
                bbox: bbox.extent(),
            });
        }
        let scores = match cfg.score_method {
            ScoreMethod::Direct => ball_convolve_direct_in_box(&working, &kernel, &bbox)?,
            ScoreMethod::Rows => ball_convolve_rows_in_box(&working, &kernel, &bbox)?,
        };

        let mut best: Option<(usize, f64)> = None;
        for h in bbox.min[0]..=bbox.max[0] {
            for w in bbox.min[1]..=bbox.max[1] {
                for l in bbox.min[2]..=bbox.max[2] {
                    let i = shape.index(h, w, l);
                    if organ[i] == 0 {
                        continue;
                    }
                    let s = scores.data()[i];
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((i, s));
                    }
                }
            }
        }
        let (center_index, score) = best.expect("non-empty organ");
        let center = shape.coords(center_index);

        let [hh, hw, hl] = kernel.half().map(|v| v as isize);
        let mut candidates = Vec::new();
        for dh in -hh..=hh {
            for dw in -hw..=hw {
                for dl in -hl..=hl {
                    if !kernel.contains(dh, dw, dl) {
                        continue;
                    }
                    let Some(i) = shape.checked_index(center[0] as isize + dh, center[1] as isize + dw, center[2] as isize + dl)
                    else {
                        continue;
                    };
                    if organ[i] != 0 && labels.data()[i] == 0 {
                        candidates.push(i);
                    }
                }
            }
        }
        let wd = working.data();
        candidates.sort_by(|a, b| wd[*b].total_cmp(&wd[*a]).then(a.cmp(b)));

        let n_requested = tumor_voxel_count(tumor.volume_mm3, voxel_volume);
        if candidates.len() < n_requested {
            warnings.push(PlacementWarning::BallCapacityExceeded {
                tumor_index,
                requested: n_requested,
                available: candidates.len(),
            });
        }
        candidates.truncate(n_requested);
        candidates.sort_unstable();
        for &i in &candidates {
            labels.data_mut()[i] = 1;
            working.data_mut()[i] = 0.0;
        }
        placements.push(Placement {
            tumor_index,
            finding_index: tumor.finding_index,
            diameter_mm: tumor.diameter_mm,
            center,
            score,
            n_requested,
            n_assigned: candidates.len(),
            voxels: candidates,
        });
    }

    let mut mask = PseudoMask::from_labels(labels, probs, cfg)?;
    mask.placements = placements;
    mask.warnings = warnings;
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMaskLoss {
    pub ce: f64,
    pub dsc_loss: f64,
    /// `∂(ce + dsc_loss)/∂t`.
    pub grad: ProbGrid,
}

impl PseudoMaskLoss {
    pub fn total(&self) -> f64 {
        self.ce + self.dsc_loss
    }
}

/// Weighted binary cross-entropy plus soft Dice loss against a pseudo-mask.
///
/// CE weights are constants of the target. CE is normalized by the total
/// weight; Dice runs over voxels outside the border band. Log arguments are
/// clamped to `[ce_eps, 1 - ce_eps]` and the gradient is evaluated at the
/// clamped probability.
pub fn pseudo_mask_loss(probs: &ProbGrid, pmask: &PseudoMask, cfg: &BallLossConfig) -> Result<PseudoMaskLoss> {
    cfg.validate()?;
    probs.check_geometry(&pmask.labels)?;
    probs.check_geometry(&pmask.ce_weights)?;
    probs.check_geometry(&pmask.border_exclusion)?;
    let (t, y, wts, x) = (probs.data(), pmask.labels.data(), pmask.ce_weights.data(), pmask.border_exclusion.data());
    let n = t.len();
    let eps = cfg.ce_eps;
    let clamp = |v: f64| v.clamp(eps, 1.0 - eps);
    let label = |i: usize| f64::from(y[i]);
    let included = |i: usize| x[i] == 0;

    let total_w = pairwise_sum_by(n, |i| wts[i]);
    let ce = if total_w > 0.0 {
        pairwise_sum_by(n, |i| {
            if wts[i] == 0.0 {
                return 0.0;
            }
            let tc = clamp(t[i]);
            let yi = label(i);
            -wts[i] * (yi * libm::log(tc) + (1.0 - yi) * libm::log(1.0 - tc))
        }) / total_w
    } else {
        0.0
    };

    let s = cfg.dsc_smooth;
    let inter = pairwise_sum_by(n, |i| if included(i) { t[i] * label(i) } else { 0.0 });
    let denom = pairwise_sum_by(n, |i| if included(i) { t[i] + label(i) } else { 0.0 }) + s;
    let (dsc_loss, dsc_ok) = if denom > 0.0 { (1.0 - (2.0 * inter + s) / denom, true) } else { (0.0, false) };

    let mut grad = probs.map(|_| 0.0);
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        let yi = label(i);
        if total_w > 0.0 && wts[i] != 0.0 {
            let tc = clamp(t[i]);
            *g += wts[i] / total_w * (-yi / tc + (1.0 - yi) / (1.0 - tc));
        }
        if dsc_ok && included(i) {
            *g -= (2.0 * yi * denom - (2.0 * inter + s)) / (denom * denom);
        }
    }
    Ok(PseudoMaskLoss { ce, dsc_loss, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::TumorEstimate;

    fn cfg() -> BallLossConfig {
        BallLossConfig::default()
    }

    fn brute_convolve(probs: &ProbGrid, k: &BallKernel) -> ProbGrid {
        let s = probs.shape();
        let [hh, hw, hl] = k.half().map(|v| v as isize);
        ProbGrid::from_fn(s, probs.spacing(), |h, w, l| {
            let mut acc = 0.0;
            for a in -hh..=hh {
                for b in -hw..=hw {
                    for c in -hl..=hl {
                        if let Some(i) = s.checked_index(h as isize + a, w as isize + b, l as isize + c) {
                            acc += k.weight(a, b, c) * probs.data()[i];
                        }
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    #[test]
    fn kernel_10mm_isotropic() {
        let k = build_ball_kernel(10.0, Spacing::ISOTROPIC_1MM, &cfg()).unwrap();
        assert_eq!(k.size(), Shape3::new(13, 13, 13));
        assert_eq!(k.weight(0, 0, 0), 1.0);
        assert!((k.diameter_mm() - 12.0).abs() < 1e-12);
        assert!((k.sigma_mm() - 9.0).abs() < 1e-12);
        // on the ball surface along an axis
        assert!((k.weight(6, 0, 0) - libm::exp(-36.0 / 162.0)).abs() < 1e-15);
        // just outside the radius
        assert_eq!(k.weight(5, 4, 0), 0.0);
        assert_eq!(k.weight(6, 1, 0), 0.0);
        assert!(k.weight(4, 4, 0) > 0.0);
        for i in 0..k.size().len() {
            let [a, b, c] = k.size().coords(i);
            let (a, b, c) = (a as f64 - 6.0, b as f64 - 6.0, c as f64 - 6.0);
            let d2 = a * a + b * b + c * c;
            let expected = if d2 <= 36.0 { libm::exp(-d2 / (2.0 * 81.0)) } else { 0.0 };
            assert!((k.weights()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_anisotropic() {
        let c = BallLossConfig { diameter_margin_frac: 0.0, ..cfg() };
        let k = build_ball_kernel(12.0, Spacing([1.0, 1.0, 3.0]), &c).unwrap();
        assert_eq!(k.size(), Shape3::new(13, 13, 5));
        assert!(k.weight(0, 0, 2) > 0.0);
        assert_eq!(k.weight(0, 1, 2), 0.0);
        assert!(k.weights().iter().all(|w| *w >= 0.0 && *w <= 1.0));
    }

    #[test]
    fn kernel_rejects_bad_input() {
        assert!(matches!(build_ball_kernel(0.0, Spacing::ISOTROPIC_1MM, &cfg()), Err(Error::InvalidDiameter(_))));
        assert!(build_ball_kernel(5.0, Spacing([1.0, -1.0, 1.0]), &cfg()).is_err());
    }

    #[test]
    fn impulse_response_is_translated_kernel() {
        let s = Shape3::new(11, 11, 11);
        let sp = Spacing::ISOTROPIC_1MM;
        let k = build_ball_kernel(5.0, sp, &cfg()).unwrap();
        let probs = ProbGrid::from_fn(s, sp, |h, w, l| if (h, w, l) == (5, 4, 6) { 1.0 } else { 0.0 }).unwrap();
        let out = ball_convolve(&probs, &k).unwrap();
        for h in 0..11 {
            for w in 0..11 {
                for l in 0..11 {
                    let expected = k.weight(h as isize - 5, w as isize - 4, l as isize - 6);
                    assert_eq!(*out.get(h, w, l), expected);
                }
            }
        }
        let zeros = ProbGrid::filled(s, sp, 0.0).unwrap();
        assert!(ball_convolve(&zeros, &k).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn direct_matches_brute_force_bitwise() {
        let s = Shape3::new(12, 12, 12);
        let sp = Spacing::ISOTROPIC_1MM;
        let probs = ProbGrid::from_fn(s, sp, |h, w, l| ((h * 131 + w * 71 + l * 37) % 97) as f64 / 97.0).unwrap();
        let k = build_ball_kernel(4.0, sp, &BallLossConfig { diameter_margin_frac: 0.0, ..cfg() }).unwrap();
        assert_eq!(k.size(), Shape3::new(5, 5, 5));
        let fast = ball_convolve(&probs, &k).unwrap();
        let slow = brute_convolve(&probs, &k);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rows_and_box_paths_agree_with_full_convolution() {
        let s = Shape3::new(14, 12, 16);
        let sp = Spacing([1.0, 1.5, 0.8]);
        let organ = Mask::from_fn(s, sp, |h, w, l| u8::from((2..11).contains(&h) && (1..10).contains(&w) && (3..14).contains(&l))).unwrap();
        let raw = ProbGrid::from_fn(s, sp, |h, w, l| ((h * 17 + w * 29 + l * 13) % 23) as f64 / 23.0).unwrap();
        let probs = raw.masked(&organ).unwrap();
        let bbox = organ.bounding_box().unwrap();
        let k = build_ball_kernel(7.0, sp, &cfg()).unwrap();
        let full = ball_convolve(&probs, &k).unwrap();
        let direct = ball_convolve_direct_in_box(&probs, &k, &bbox).unwrap();
        let rows = ball_convolve_rows_in_box(&probs, &k, &bbox).unwrap();
        for i in 0..s.len() {
            if bbox.contains(s.coords(i)) {
                assert_eq!(direct.data()[i].to_bits(), full.data()[i].to_bits());
                let rel = (rows.data()[i] - full.data()[i]).abs() / full.data()[i].abs().max(1e-300);
                assert!(rel < 1e-12, "voxel {i}: {} vs {}", rows.data()[i], full.data()[i]);
            } else {
                assert_eq!(direct.data()[i], 0.0);
                assert_eq!(rows.data()[i], 0.0);
            }
        }
    }

    fn target(tumors: &[(f64, f64)]) -> OrganVolumeTarget {
        OrganVolumeTarget::from_tumors(
            "liver",
            tumors
                .iter()
                .enumerate()
                .map(|(i, (d, v))| TumorEstimate { finding_index: i, diameter_mm: *d, volume_mm3: *v })
                .collect(),
        )
    }

    #[test]
    fn uniform_probabilities_give_exact_count_deterministically() {
        let s = Shape3::new(16, 16, 16);
        let sp = Spacing::ISOTROPIC_1MM;
        let organ = Mask::from_fn(s, sp, |h, w, l| u8::from(h > 1 && w > 1 && l > 1 && h < 14 && w < 14 && l < 14)).unwrap();
        let probs = ProbGrid::filled(s, sp, 0.5).unwrap();
        let t = target(&[(6.0, 60.0)]);
        let a = place_tumors(&probs, &organ, &t, &cfg()).unwrap();
        let b = place_tumors(&probs, &organ, &t, &cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.count(), 60);
        let p = &a.placements[0];
        assert_eq!(p.n_assigned, 60);
        let k = build_ball_kernel(6.0, sp, &cfg()).unwrap();
        for &i in &p.voxels {
            let c = s.coords(i);
            let off = [0, 1, 2].map(|a| c[a] as isize - p.center[a] as isize);
            assert!(k.contains(off[0], off[1], off[2]));
        }
        let direct = place_tumors(&probs, &organ, &t, &BallLossConfig { score_method: ScoreMethod::Direct, ..cfg() }).unwrap();
        assert_eq!(direct.labels.count(), 60);
    }

    #[test]
    fn capacity_shortfall_is_recorded() {
        let s = Shape3::new(6, 6, 6);
        let sp = Spacing::ISOTROPIC_1MM;
        let organ = Mask::from_fn(s, sp, |h, w, l| u8::from(h < 2 && w < 2 && l < 2)).unwrap();
        let probs = ProbGrid::filled(s, sp, 0.3).unwrap();
        let pm = place_tumors(&probs, &organ, &target(&[(10.0, 500.0)]), &cfg()).unwrap();
        assert_eq!(pm.placements[0].n_assigned, 8);
        assert_eq!(pm.placements[0].shortfall(), 492);
        assert!(pm.warnings.iter().any(|w| matches!(w, PlacementWarning::BallCapacityExceeded { requested: 500, available: 8, .. })));
        assert!(pm.warnings.iter().any(|w| matches!(w, PlacementWarning::KernelExceedsGrid { .. })));
    }

    #[test]
    fn placement_errors() {
        let s = Shape3::new(4, 4, 4);
        let sp = Spacing::ISOTROPIC_1MM;
        let probs = ProbGrid::filled(s, sp, 0.3).unwrap();
        let empty = Mask::filled(s, sp, 0).unwrap();
        assert_eq!(place_tumors(&probs, &empty, &target(&[(3.0, 10.0)]), &cfg()), Err(Error::EmptyOrgan));
        let organ = Mask::filled(s, sp, 1).unwrap();
        assert!(matches!(place_tumors(&probs, &organ, &target(&[]), &cfg()), Err(Error::NoTumors(_))));
        let mut t = target(&[(3.0, 10.0)]);
        t.excluded = true;
        assert!(matches!(place_tumors(&probs, &organ, &t, &cfg()), Err(Error::ExcludedOrgan(_))));
    }

    #[test]
    fn voxel_count_rounds_half_up() {
        assert_eq!(tumor_voxel_count(10.5, 1.0), 11);
        assert_eq!(tumor_voxel_count(10.49, 1.0), 10);
        assert_eq!(tumor_voxel_count(0.1, 1.0), 1);
        assert_eq!(tumor_voxel_count(64.0, 2.0), 32);
    }

    fn half_mask(probs_value: f64) -> (ProbGrid, PseudoMask) {
        let s = Shape3::new(4, 4, 4);
        let sp = Spacing::ISOTROPIC_1MM;
        let probs = ProbGrid::filled(s, sp, probs_value).unwrap();
        let labels = Mask::from_fn(s, sp, |h, _, _| u8::from(h < 2)).unwrap();
        let pm = PseudoMask::from_labels(labels, &probs, &cfg()).unwrap();
        (probs, pm)
    }

    #[test]
    fn uniform_half_gives_ln2() {
        let (probs, pm) = half_mask(0.5);
        // band covers h = 1 and h = 2
        assert_eq!(pm.border_exclusion.count(), 32);
        assert!(pm.ce_weights.data().iter().all(|w| *w == 0.0 || *w == 1.0));
        let loss = pseudo_mask_loss(&probs, &pm, &cfg()).unwrap();
        assert!((loss.ce - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let (_, pm) = half_mask(0.5);
        let probs = pm.labels.map(|y| f64::from(*y));
        let loss = pseudo_mask_loss(&probs, &pm, &cfg()).unwrap();
        assert!(loss.ce < 1e-6);
        assert!(loss.dsc_loss.abs() < 1e-12);
    }

    #[test]
    fn fully_excluded_support_is_zero() {
        let (probs, mut pm) = half_mask(0.4);
        pm.border_exclusion = pm.labels.map(|_| 1);
        pm.ce_weights = probs.map(|_| 0.0);
        let loss = pseudo_mask_loss(&probs, &pm, &cfg()).unwrap();
        assert_eq!(loss.ce, 0.0);
        assert_eq!(loss.dsc_loss, 0.0);
        assert!(loss.grad.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn ce_weights_follow_prediction() {
        let s = Shape3::new(1, 1, 8);
        let sp = Spacing::ISOTROPIC_1MM;
        let probs = ProbGrid::from_fn(s, sp, |_, _, l| [0.2, 0.4, 0.6, 0.8, 0.001, 0.0, 0.0, 0.0][l]).unwrap();
        let labels = Mask::from_fn(s, sp, |_, _, l| u8::from(l < 5)).unwrap();
        let pm = PseudoMask::from_labels(labels, &probs, &BallLossConfig { border_margin_vox: 0, ..cfg() }).unwrap();
        let mean = (0.2 + 0.4 + 0.6 + 0.8 + 0.001) / 5.0;
        let w = pm.ce_weights.data();
        assert!((w[0] - 0.2 / mean).abs() < 1e-12);
        assert!((w[3] - 0.8 / mean).abs() < 1e-12);
        assert_eq!(w[4], 0.1);
        assert_eq!(w[6], 1.0);
        assert!(w[3] > w[2] && w[2] > w[1]);
    }
}
