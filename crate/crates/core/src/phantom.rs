//! Synthetic organ / tumor phantoms with paired ground truth and reports.
//!
//! Geometry is in millimetres with voxel `(h, w, l)` centred at
//! `(h·s_h, w·s_w, l·s_l)`. Randomness comes from `ChaCha8Rng` seeded with the
//! spec's `seed`, so a spec file fully determines its phantom.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Mask, ProbGrid, Shape3, Spacing, VoxelGrid};
use crate::report::{OrganVocabulary, ReportFindings, TumorFinding};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OrganShape {
    pub organ_id: String,
    pub center_mm: [f64; 3],
    pub radii_mm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TumorShape {
    pub organ_id: String,
    pub center_mm: [f64; 3],
    pub radii_mm: [f64; 3],
    /// Diameters written to the report instead of `2 × radii`.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub report_diameters_mm: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct NoiseSpec {
    /// Std of the Gaussian blur applied to the truth, in mm.
    pub blur_std_mm: f64,
    /// Per-voxel probability of background clutter.
    pub clutter_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PhantomSpec {
    pub ct_id: String,
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub organs: Vec<OrganShape>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub tumors: Vec<TumorShape>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub noise: NoiseSpec,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPhantom {
    pub organ_masks: BTreeMap<String, Mask>,
    /// One mask per tumor, in spec order.
    pub tumor_masks: Vec<Mask>,
    /// Union of all tumor masks.
    pub tumor_truth: Mask,
    pub probs: ProbGrid,
    pub report: ReportFindings,
}

fn rasterize_ellipsoid(shape: Shape3, spacing: Spacing, center: [f64; 3], radii: [f64; 3]) -> Result<Mask> {
    let s = spacing.0;
    Mask::from_fn(shape, spacing, |h, w, l| {
        let p = [h as f64 * s[0], w as f64 * s[1], l as f64 * s[2]];
        let mut q = 0.0;
        for a in 0..3 {
            let d = (p[a] - center[a]) / radii[a];
            q += d * d;
        }
        u8::from(q <= 1.0)
    })
}

fn check_radii(radii: &[f64; 3]) -> Result<()> {
    if radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::InvalidConfig("radii must be finite and > 0"));
    }
    Ok(())
}

/// Renders truth masks, a probability map and the matching report.
pub fn render_phantom(spec: &PhantomSpec, vocabulary: &OrganVocabulary) -> Result<RenderedPhantom> {
    let shape = Shape3::from_array(spec.shape)?;
    let spacing = Spacing::new(spec.spacing_mm)?;
    if !(spec.noise.blur_std_mm >= 0.0 && (0.0..=1.0).contains(&spec.noise.clutter_rate)) {
        return Err(Error::InvalidConfig("noise: blur_std_mm >= 0 and clutter_rate in [0, 1]"));
    }

    let mut organ_masks = BTreeMap::new();
    for organ in &spec.organs {
        check_radii(&organ.radii_mm)?;
        vocabulary.check(&organ.organ_id)?;
        organ_masks.insert(organ.organ_id.clone(), rasterize_ellipsoid(shape, spacing, organ.center_mm, organ.radii_mm)?);
    }

    let mut tumor_masks = Vec::with_capacity(spec.tumors.len());
    let mut tumor_truth = Mask::filled(shape, spacing, 0)?;
    let mut findings = Vec::with_capacity(spec.tumors.len());
    for (i, tumor) in spec.tumors.iter().enumerate() {
        check_radii(&tumor.radii_mm)?;
        let organ = organ_masks.get(&tumor.organ_id).ok_or_else(|| Error::PhantomOrgan(tumor.organ_id.clone()))?;
        let mask = rasterize_ellipsoid(shape, spacing, tumor.center_mm, tumor.radii_mm)?;
        let outside = mask.data().iter().zip(organ.data()).any(|(t, o)| *t != 0 && *o == 0);
        if outside || mask.count() == 0 {
            return Err(Error::TumorOutsideOrgan(i));
        }
        for (u, t) in tumor_truth.data_mut().iter_mut().zip(mask.data()) {
            *u |= *t;
        }
        let diameters = match &tumor.report_diameters_mm {
            Some(d) => d.clone(),
            None => tumor.radii_mm.iter().map(|r| 2.0 * r).collect(),
        };
        findings.push(TumorFinding::new(tumor.organ_id.clone(), &diameters)?);
        tumor_masks.push(mask);
    }
    let normal = findings.is_empty();
    let report = ReportFindings::new(spec.ct_id.clone(), findings, normal, vocabulary)?;

    let mut probs = tumor_truth.map(|t| f64::from(*t));
    if spec.noise.blur_std_mm > 0.0 {
        probs = gaussian_blur(&probs, spec.noise.blur_std_mm);
    }
    if spec.noise.clutter_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for p in probs.data_mut() {
            if rng.gen::<f64>() < spec.noise.clutter_rate {
                *p = p.max(rng.gen::<f64>());
            }
        }
    }
    for p in probs.data_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(RenderedPhantom { organ_masks, tumor_masks, tumor_truth, probs, report })
}

/// Separable Gaussian blur (std in mm), truncated at 3σ, zero padded.
pub fn gaussian_blur(grid: &ProbGrid, std_mm: f64) -> ProbGrid {
    let shape = grid.shape();
    let dims = shape.to_array();
    let strides = [shape.w * shape.l, shape.l, 1];
    let mut cur = grid.data().to_vec();
    for axis in 0..3 {
        let sigma = std_mm / grid.spacing().0[axis];
        let radius = libm::ceil(3.0 * sigma) as isize;
        let taps: Vec<f64> = (-radius..=radius).map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma))).collect();
        let norm: f64 = taps.iter().sum();
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / strides[axis]) % dims[axis];
            let mut acc = 0.0;
            for (j, tap) in taps.iter().enumerate() {
                let q = pos as isize + j as isize - radius;
                if q >= 0 && (q as usize) < dims[axis] {
                    let src = (i as isize + (q - pos as isize) * strides[axis] as isize) as usize;
                    acc += tap * cur[src];
                }
            }
            *out = acc / norm;
        }
        cur = next;
    }
    VoxelGrid::new(shape, grid.spacing(), cur).expect("same geometry")
}

/// Multiplies every diameter by `1 + u`, `u ~ U(-noise_frac, noise_frac)`.
pub fn perturb_report(report: &ReportFindings, noise_frac: f64, seed: u64) -> Result<ReportFindings> {
    if !(0.0..1.0).contains(&noise_frac) {
        return Err(Error::InvalidConfig("noise_frac must lie in [0, 1)"));
    }
    if noise_frac == 0.0 {
        return Ok(report.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    report.map_diameters(|_, _, d| d * (1.0 + rng.gen_range(-noise_frac..=noise_frac)))
}

/// How a random phantom's tumors are described in its report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ReportStyle {
    /// Three diameters (2 × radii).
    #[default]
    ThreeDiameters,
    /// One, two or three diameters chosen at random per tumor.
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct RandomPhantomOptions {
    pub organ_id: String,
    pub tumor_count: [usize; 2],
    pub diameter_mm: [f64; 2],
    pub spacing_mm: [f64; 3],
    pub report_style: ReportStyle,
    pub noise: NoiseSpec,
}

impl Default for RandomPhantomOptions {
    fn default() -> Self {
        Self {
            organ_id: "liver".into(),
            tumor_count: [1, 3],
            diameter_mm: [8.0, 40.0],
            spacing_mm: [1.0, 1.0, 1.0],
            report_style: ReportStyle::ThreeDiameters,
            noise: NoiseSpec::default(),
        }
    }
}

/// Random single-organ phantom with well-separated spherical tumors.
///
/// Tumors are separated by at least `0.35 × larger diameter + 3 mm` between
/// surfaces and kept 1.5 mm inside the organ, which is enlarged until every
/// tumor fits.
pub fn random_phantom_spec(ct_id: impl Into<String>, options: &RandomPhantomOptions, seed: u64) -> Result<PhantomSpec> {
    let [n_lo, n_hi] = options.tumor_count;
    let [d_lo, d_hi] = options.diameter_mm;
    if n_lo > n_hi || !(d_lo > 0.0 && d_lo <= d_hi) {
        return Err(Error::InvalidConfig("random phantom ranges"));
    }
    let spacing = Spacing::new(options.spacing_mm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(n_lo..=n_hi);
    let mut diameters: Vec<f64> = (0..count).map(|_| rng.gen_range(d_lo..=d_hi)).collect();
    diameters.sort_by(|a, b| b.total_cmp(a));

    let total: f64 = diameters.iter().map(|d| {
        let r = d / 2.0 + 0.175 * d + 1.5;
        r * r * r
    }).sum();
    let d_max = diameters.first().copied().unwrap_or(d_lo);
    let mut radius = (libm::cbrt(2.5 * total)).max(d_max / 2.0 + 6.0);
    let mut radii = [radius, radius * 0.9, radius * 1.2];
    let margin = 1.5;

    let centers = 'layout: loop {
        for _attempt in 0..200 {
            let mut placed: Vec<([f64; 3], f64)> = Vec::new();
            let mut ok = true;
            for d in &diameters {
                let r = d / 2.0;
                let inner = radii.map(|a| a - r - margin);
                if inner.iter().any(|a| *a <= 0.0) {
                    ok = false;
                    break;
                }
                let mut found = None;
                for _ in 0..100 {
                    let c = [0, 1, 2].map(|a| rng.gen_range(-inner[a]..=inner[a]));
                    let q: f64 = (0..3).map(|a| (c[a] / inner[a]) * (c[a] / inner[a])).sum();
                    if q > 1.0 {
                        continue;
                    }
                    let clear = placed.iter().all(|(pc, pr)| {
                        let dist = libm::sqrt((0..3).map(|a| (c[a] - pc[a]) * (c[a] - pc[a])).sum::<f64>());
                        dist >= r + pr + 0.35 * (2.0 * r).max(2.0 * pr) + 3.0
                    });
                    if clear {
                        found = Some(c);
                        break;
                    }
                }
                match found {
                    Some(c) => placed.push((c, r)),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                break 'layout placed;
            }
        }
        radius *= 1.1;
        radii = [radius, radius * 0.9, radius * 1.2];
    };

    let s = spacing.0;
    let pad = 3.0;
    let shape = [0, 1, 2].map(|a| libm::ceil(2.0 * (radii[a] + pad) / s[a]) as usize + 1);
    // organ centre on a jittered sub-voxel position near the grid middle
    let organ_center = [0, 1, 2].map(|a| (shape[a] - 1) as f64 * s[a] / 2.0 + rng.gen_range(-0.5..=0.5) * s[a]);

    let tumors = centers
        .iter()
        .map(|(c, r)| {
            let report_diameters_mm = match options.report_style {
                ReportStyle::ThreeDiameters => None,
                ReportStyle::Mixed => Some(vec![2.0 * r; rng.gen_range(1..=3)]),
            };
            TumorShape {
                organ_id: options.organ_id.clone(),
                center_mm: [0, 1, 2].map(|a| organ_center[a] + c[a]),
                radii_mm: [*r; 3],
                report_diameters_mm,
            }
        })
        .collect();
    Ok(PhantomSpec {
        ct_id: ct_id.into(),
        shape,
        spacing_mm: spacing.0,
        organs: vec![OrganShape { organ_id: options.organ_id.clone(), center_mm: organ_center, radii_mm: radii }],
        tumors,
        noise: options.noise,
        seed,
    })
}
