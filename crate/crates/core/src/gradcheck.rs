//! Central finite-difference checks of analytic voxel gradients, plus the
//! random fixtures used to exercise them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ball_loss::{pseudo_mask_loss, BallLossConfig, PseudoMask};
use crate::error::Result;
use crate::grid::{segmented_volume, Coverage, Mask, ProbGrid, Shape3, Spacing};
use crate::report::{OrganVolumeTarget, TumorEstimate};
use crate::volume_loss::{hinge_threshold, l_forg_raw, volume_loss, VolumeLossConfig};

/// Magnitudes below this are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` with `(f(x + h·e_i) - f(x - h·e_i)) / 2h` at every voxel.
pub fn check_gradient<F>(x: &ProbGrid, analytic: &ProbGrid, step: f64, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&ProbGrid) -> Result<f64>,
{
    x.check_geometry(analytic)?;
    let mut probe = x.clone();
    let mut report = GradCheck { max_rel_err: 0.0, worst_index: 0, checked: 0 };
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic.data()[i], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

fn random_geometry(rng: &mut ChaCha8Rng, max_dim: usize) -> (Shape3, Spacing) {
    let shape = Shape3::new(rng.gen_range(4..=max_dim), rng.gen_range(4..=max_dim), rng.gen_range(4..=max_dim));
    let spacing = Spacing([rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..3.0)]);
    (shape, spacing)
}

fn random_blob(rng: &mut ChaCha8Rng, shape: Shape3, spacing: Spacing) -> Mask {
    let dims = shape.to_array();
    let c = dims.map(|d| rng.gen_range(0.3..0.7) * d as f64);
    let r = dims.map(|d| rng.gen_range(0.2..0.45) * d as f64);
    Mask::from_fn(shape, spacing, |h, w, l| {
        let p = [h as f64, w as f64, l as f64];
        let q: f64 = (0..3).map(|a| {
            let d = (p[a] - c[a]) / r[a];
            d * d
        }).sum();
        u8::from(q <= 1.0)
    })
    .expect("valid geometry")
}

/// Probabilities kept away from 0 and 1 so central differences stay inside
/// the unclamped region.
fn random_probs(rng: &mut ChaCha8Rng, shape: Shape3, spacing: Spacing) -> ProbGrid {
    ProbGrid::from_fn(shape, spacing, |_, _, _| rng.gen_range(0.02..0.98)).expect("valid geometry")
}

/// A random Volume Loss problem with `V_s` away from the hinge and `|·|` kinks.
#[derive(Debug, Clone)]
pub struct VolumeFixture {
    pub probs: ProbGrid,
    pub mask: Mask,
    pub target: OrganVolumeTarget,
}

pub fn volume_fixture(seed: u64, max_dim: usize) -> VolumeFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let (shape, spacing) = random_geometry(&mut rng, max_dim);
        let probs = random_probs(&mut rng, shape, spacing);
        let mask = random_blob(&mut rng, shape, spacing);
        if mask.count() == 0 {
            continue;
        }
        let v_s = segmented_volume(&probs, &mask).expect("same geometry");
        let target = match rng.gen_range(0..3) {
            0 => OrganVolumeTarget::normal("liver"),
            1 => tumor_target(v_s * rng.gen_range(0.3..0.7)),
            _ => tumor_target(v_s * rng.gen_range(1.5..3.0)),
        };
        let cfg = VolumeLossConfig::default();
        // keep clear of the hinge kink
        let excess = l_forg_raw(v_s, target.v_r_mm3, cfg.e_mm3) - hinge_threshold(target.v_r_mm3, &cfg);
        if excess.abs() < 1e-3 {
            continue;
        }
        return VolumeFixture { probs, mask, target };
    }
}

fn tumor_target(v_r: f64) -> OrganVolumeTarget {
    OrganVolumeTarget::from_tumors("liver", alloc::vec![TumorEstimate { finding_index: 0, diameter_mm: 10.0, volume_mm3: v_r }])
}

/// A random pseudo-mask problem.
#[derive(Debug, Clone)]
pub struct BallFixture {
    pub probs: ProbGrid,
    pub pmask: PseudoMask,
}

pub fn ball_fixture(seed: u64, max_dim: usize, cfg: &BallLossConfig) -> BallFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (shape, spacing) = random_geometry(&mut rng, max_dim);
    let probs = random_probs(&mut rng, shape, spacing);
    let labels = random_blob(&mut rng, shape, spacing);
    let pmask = PseudoMask::from_labels(labels, &probs, cfg).expect("valid fixture");
    BallFixture { probs, pmask }
}

/// Gradient check of the Volume Loss on one fixture.
pub fn check_volume_fixture(fx: &VolumeFixture, cfg: &VolumeLossConfig, step: f64) -> Result<GradCheck> {
    let r = volume_loss(&fx.probs, &fx.mask, &fx.target, Coverage::FullyInside, cfg)?;
    check_gradient(&fx.probs, &r.grad, step, |p| {
        Ok(volume_loss(p, &fx.mask, &fx.target, Coverage::FullyInside, cfg)?.l_vol)
    })
}

/// Gradient check of CE + Dice against a fixed pseudo-mask.
pub fn check_ball_fixture(fx: &BallFixture, cfg: &BallLossConfig, step: f64) -> Result<GradCheck> {
    let r = pseudo_mask_loss(&fx.probs, &fx.pmask, cfg)?;
    check_gradient(&fx.probs, &r.grad, step, |p| Ok(pseudo_mask_loss(p, &fx.pmask, cfg)?.total()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-3);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn detects_wrong_gradient() {
        let s = Shape3::new(2, 2, 2);
        let x = ProbGrid::filled(s, Spacing::ISOTROPIC_1MM, 0.5).unwrap();
        let wrong = x.map(|_| 1.0);
        let r = check_gradient(&x, &wrong, 1e-4, |p| Ok(p.data().iter().map(|v| v * v).sum())).unwrap();
        assert!(r.max_rel_err < 1e-8);
        let doubled = x.map(|_| 2.0);
        let r = check_gradient(&x, &doubled, 1e-4, |p| Ok(p.data().iter().map(|v| v * v).sum())).unwrap();
        assert!(r.max_rel_err > 0.4);
    }

    #[test]
    fn small_fixtures_pass() {
        let vcfg = VolumeLossConfig::default();
        let bcfg = BallLossConfig::default();
        for seed in 0..3 {
            let r = check_volume_fixture(&volume_fixture(seed, 6), &vcfg, 1e-4).unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
            let r = check_ball_fixture(&ball_fixture(seed, 6, &bcfg), &bcfg, 1e-4).unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }
}
