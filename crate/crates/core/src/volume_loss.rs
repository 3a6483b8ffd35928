//! Volume Loss: report-volume matching for an intermediate probability grid.
//!
//! For organ `o` with report volume `V_r` and segmented volume
//! `V_s = Σ t·o·v`:
//!
//! ```text
//! L'(V_s, V_r)  = |V_s - V_r| / (V_s + V_r + E)
//! L_forg        = max(L'(V_s, V_r) - L'((1 - τ)·V_r, V_r), 0)
//! L_bkg         = -1/(H·W·L) · Σ ln(1 - t·(1 - o))
//! L_vol         = L_forg + L_bkg
//! ```

use alloc::string::ToString;

use crate::error::{Error, Result};
use crate::grid::{segmented_volume, Coverage, Mask, ProbGrid};
use crate::report::OrganVolumeTarget;
use crate::sum::pairwise_sum_by;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VolumeLossConfig {
    /// Stabilizer `E` in mm³.
    pub e_mm3: f64,
    /// Relative tolerance `τ` of the dead zone.
    pub tau: f64,
    /// Lower clamp of the background log argument.
    pub bkg_eps: f64,
}

impl Default for VolumeLossConfig {
    fn default() -> Self {
        Self { e_mm3: 500.0, tau: 0.10, bkg_eps: 1e-7 }
    }
}

impl VolumeLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_mm3 > 0.0 && self.e_mm3.is_finite()) {
            return Err(Error::InvalidConfig("e_mm3 must be > 0"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig("tau must lie in (0, 1)"));
        }
        if !(self.bkg_eps > 0.0 && self.bkg_eps <= 1e-3) {
            return Err(Error::InvalidConfig("bkg_eps must lie in (0, 1e-3]"));
        }
        Ok(())
    }
}

/// `|v_s - v_r| / (v_s + v_r + e)`.
pub fn l_forg_raw(v_s: f64, v_r: f64, e: f64) -> f64 {
    (v_s - v_r).abs() / (v_s + v_r + e)
}

/// Derivative of [`l_forg_raw`] with respect to `v_s` (0 at the kink).
pub fn l_forg_raw_grad(v_s: f64, v_r: f64, e: f64) -> f64 {
    let diff = v_s - v_r;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    let denom = v_s + v_r + e;
    (sign * denom - diff.abs()) / (denom * denom)
}

/// Dead-zone threshold `L'((1 - τ)·v_r, v_r)`.
pub fn hinge_threshold(v_r: f64, cfg: &VolumeLossConfig) -> f64 {
    l_forg_raw((1.0 - cfg.tau) * v_r, v_r, cfg.e_mm3)
}

/// Hinged foreground term together with its derivative in `v_s`.
pub fn l_forg_hinged_with_grad(v_s: f64, v_r: f64, cfg: &VolumeLossConfig) -> (f64, f64) {
    let excess = l_forg_raw(v_s, v_r, cfg.e_mm3) - hinge_threshold(v_r, cfg);
    if excess > 0.0 {
        (excess, l_forg_raw_grad(v_s, v_r, cfg.e_mm3))
    } else {
        (0.0, 0.0)
    }
}

pub fn l_forg_hinged(v_s: f64, v_r: f64, cfg: &VolumeLossConfig) -> f64 {
    l_forg_hinged_with_grad(v_s, v_r, cfg).0
}

/// Background cross-entropy over voxels outside the organ.
pub fn l_bkg(probs: &ProbGrid, mask: &Mask, cfg: &VolumeLossConfig) -> Result<f64> {
    probs.check_geometry(mask)?;
    let (t, o) = (probs.data(), mask.data());
    let n = t.len() as f64;
    let sum = pairwise_sum_by(t.len(), |i| {
        if o[i] != 0 {
            0.0
        } else {
            libm::log((1.0 - t[i]).max(cfg.bkg_eps))
        }
    });
    // `0.0 - x` rather than `-x` keeps a perfect background at +0.0
    Ok(0.0 - sum / n)
}

/// Per-voxel derivative of [`l_bkg`].
///
/// Where the log argument is clamped, the clamped value is used in the
/// denominator so the gradient stays finite and large.
pub fn l_bkg_grad(probs: &ProbGrid, mask: &Mask, cfg: &VolumeLossConfig) -> Result<ProbGrid> {
    probs.check_geometry(mask)?;
    let n = probs.len() as f64;
    let mut grad = probs.clone();
    for (g, o) in grad.data_mut().iter_mut().zip(mask.data()) {
        *g = if *o != 0 { 0.0 } else { 1.0 / (n * (1.0 - *g).max(cfg.bkg_eps)) };
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeLossResult {
    pub l_forg: f64,
    pub l_bkg: f64,
    pub l_vol: f64,
    pub v_s_mm3: f64,
    /// `∂L_vol/∂t` for every voxel.
    pub grad: ProbGrid,
}

/// Volume Loss of one organ on one patch, with its exact gradient.
pub fn volume_loss(
    probs: &ProbGrid,
    mask: &Mask,
    target: &OrganVolumeTarget,
    coverage: Coverage,
    cfg: &VolumeLossConfig,
) -> Result<VolumeLossResult> {
    cfg.validate()?;
    if target.excluded {
        return Err(Error::ExcludedOrgan(target.organ_id.clone()));
    }
    if coverage != Coverage::FullyInside {
        return Err(Error::CoverageViolation(target.organ_id.to_string()));
    }
    let v_s_mm3 = segmented_volume(probs, mask)?;
    let (l_forg, dforg_dvs) = l_forg_hinged_with_grad(v_s_mm3, target.v_r_mm3, cfg);
    let l_bkg_value = l_bkg(probs, mask, cfg)?;
    let mut grad = l_bkg_grad(probs, mask, cfg)?;
    if dforg_dvs != 0.0 {
        let per_voxel = dforg_dvs * probs.spacing().voxel_volume();
        for (g, o) in grad.data_mut().iter_mut().zip(mask.data()) {
            if *o != 0 {
                *g += per_voxel;
            }
        }
    }
    Ok(VolumeLossResult {
        l_forg,
        l_bkg: l_bkg_value,
        l_vol: l_forg + l_bkg_value,
        v_s_mm3,
        grad,
    })
}

/// How per-organ losses on one patch are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OrganReduction {
    /// Sum divided by the number of supervised organs.
    #[default]
    Mean,
    Sum,
}

/// Combines per-organ results into one loss and gradient. `None` when empty.
pub fn reduce_organ_losses(
    results: &[VolumeLossResult],
    reduction: OrganReduction,
) -> Result<Option<(f64, ProbGrid)>> {
    let Some(first) = results.first() else {
        return Ok(None);
    };
    let scale = match reduction {
        OrganReduction::Mean => 1.0 / results.len() as f64,
        OrganReduction::Sum => 1.0,
    };
    let mut grad = first.grad.map(|_| 0.0);
    let mut loss = 0.0;
    for r in results {
        grad.check_geometry(&r.grad)?;
        loss += r.l_vol;
        for (g, x) in grad.data_mut().iter_mut().zip(r.grad.data()) {
            *g += *x;
        }
    }
    grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    Ok(Some((loss * scale, grad)))
}
