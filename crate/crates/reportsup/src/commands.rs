//! Implementations behind the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use reportsup_core::ball_loss::{place_tumors, BallLossConfig, PlacementWarning};
use reportsup_core::gradcheck::{ball_fixture, check_ball_fixture, check_volume_fixture, volume_fixture};
use reportsup_core::report::build_volume_targets;
use reportsup_core::volume_loss::{volume_loss, VolumeLossConfig};
use reportsup_core::{Coverage, Mask, OrganVocabulary, OrganVolumeTarget, ProbGrid};

use crate::error::{io_err, IoError, Result};
use crate::grid_io::{read_mask, read_probs, write_grid, write_mask, RawGrid};
use crate::report_io::read_report;

/// Inputs shared by the per-organ loss commands.
#[derive(Debug, Clone)]
pub struct OrganInputs {
    pub probs: PathBuf,
    pub organ_mask: PathBuf,
    pub report: PathBuf,
    pub ct_id: Option<String>,
    pub organ: String,
}

struct LoadedOrgan {
    ct_id: String,
    probs: ProbGrid,
    mask: Mask,
    target: OrganVolumeTarget,
}

fn load_organ(inputs: &OrganInputs, vocabulary: &OrganVocabulary) -> Result<LoadedOrgan> {
    vocabulary.check(&inputs.organ)?;
    let report = read_report(&inputs.report, vocabulary, inputs.ct_id.as_deref())?;
    let probs = read_probs(&inputs.probs)?;
    let mask = read_mask(&inputs.organ_mask)?;
    probs.check_geometry(&mask)?;
    let target = build_volume_targets(&report, vocabulary)?.target_or_normal(&inputs.organ, vocabulary)?;
    Ok(LoadedOrgan { ct_id: report.ct_id().to_string(), probs, mask, target })
}

/// Result printed by `volume-loss`. Loss fields are absent for organs
/// excluded because of size-less findings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeLossOutput {
    pub ct_id: String,
    pub organ: String,
    pub excluded: bool,
    pub l_forg: Option<f64>,
    pub l_bkg: Option<f64>,
    pub l_vol: Option<f64>,
    pub v_s_mm3: f64,
    pub v_r_mm3: f64,
    pub tumor_count: usize,
}

/// Computes the Volume Loss of one organ; the gradient (zero for excluded
/// organs) is written to `grad_out` when given.
pub fn run_volume_loss(
    inputs: &OrganInputs,
    cfg: &VolumeLossConfig,
    grad_out: Option<&Path>,
    vocabulary: &OrganVocabulary,
) -> Result<VolumeLossOutput> {
    cfg.validate()?;
    let LoadedOrgan { ct_id, probs, mask, target } = load_organ(inputs, vocabulary)?;
    let v_s_mm3 = reportsup_core::grid::segmented_volume(&probs, &mask)?;
    let (out, grad) = if target.excluded {
        let out = VolumeLossOutput {
            ct_id,
            organ: inputs.organ.clone(),
            excluded: true,
            l_forg: None,
            l_bkg: None,
            l_vol: None,
            v_s_mm3,
            v_r_mm3: target.v_r_mm3,
            tumor_count: target.tumor_count,
        };
        (out, probs.map(|_| 0.0))
    } else {
        let r = volume_loss(&probs, &mask, &target, Coverage::FullyInside, cfg)?;
        let out = VolumeLossOutput {
            ct_id,
            organ: inputs.organ.clone(),
            excluded: false,
            l_forg: Some(r.l_forg),
            l_bkg: Some(r.l_bkg),
            l_vol: Some(r.l_vol),
            v_s_mm3: r.v_s_mm3,
            v_r_mm3: target.v_r_mm3,
            tumor_count: target.tumor_count,
        };
        (out, r.grad)
    };
    if let Some(path) = grad_out {
        write_grad(&grad, path)?;
    }
    Ok(out)
}

/// Real-valued grids (gradients, weights) stored as `f32`.
fn write_grad(grad: &ProbGrid, path: &Path) -> Result<()> {
    write_grid(&RawGrid::from_probs(grad), path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub tumor_index: usize,
    pub finding_index: usize,
    pub diameter_mm: f64,
    pub center: [usize; 3],
    pub score: f64,
    pub n_requested: usize,
    pub n_assigned: usize,
    pub shortfall: usize,
}

/// Contents of the `ball-mask` placement manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallMaskManifest {
    pub ct_id: String,
    pub organ: String,
    pub excluded: bool,
    pub v_r_mm3: f64,
    pub tumor_count: usize,
    pub placements: Vec<PlacementRecord>,
    pub warnings: Vec<PlacementWarning>,
    pub labeled_voxels: usize,
    pub border_excluded_voxels: usize,
}

#[derive(Debug, Clone)]
pub struct BallMaskOutputs {
    pub mask: PathBuf,
    pub weights: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

/// Builds the pseudo-mask of one organ. Excluded organs get an empty mask,
/// all-zero weights and `excluded: true` in the manifest.
pub fn run_ball_mask(
    inputs: &OrganInputs,
    cfg: &BallLossConfig,
    outputs: &BallMaskOutputs,
    vocabulary: &OrganVocabulary,
) -> Result<BallMaskManifest> {
    cfg.validate()?;
    let LoadedOrgan { ct_id, probs, mask, target } = load_organ(inputs, vocabulary)?;
    let (labels, weights, manifest) = if target.excluded {
        let manifest = BallMaskManifest {
            ct_id,
            organ: inputs.organ.clone(),
            excluded: true,
            v_r_mm3: target.v_r_mm3,
            tumor_count: target.tumor_count,
            placements: Vec::new(),
            warnings: Vec::new(),
            labeled_voxels: 0,
            border_excluded_voxels: 0,
        };
        (mask.map(|_| 0u8), probs.map(|_| 0.0), manifest)
    } else {
        let pm = place_tumors(&probs, &mask, &target, cfg)?;
        let placements = pm
            .placements
            .iter()
            .map(|p| PlacementRecord {
                tumor_index: p.tumor_index,
                finding_index: p.finding_index,
                diameter_mm: p.diameter_mm,
                center: p.center,
                score: p.score,
                n_requested: p.n_requested,
                n_assigned: p.n_assigned,
                shortfall: p.shortfall(),
            })
            .collect();
        let manifest = BallMaskManifest {
            ct_id,
            organ: inputs.organ.clone(),
            excluded: false,
            v_r_mm3: target.v_r_mm3,
            tumor_count: target.tumor_count,
            placements,
            warnings: pm.warnings.clone(),
            labeled_voxels: pm.labels.count(),
            border_excluded_voxels: pm.border_exclusion.count(),
        };
        (pm.labels, pm.ce_weights, manifest)
    };
    write_mask(&labels, &outputs.mask)?;
    if let Some(path) = &outputs.weights {
        write_grad(&weights, path)?;
    }
    if let Some(path) = &outputs.manifest {
        write_json(path, &manifest)?;
    }
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::SchemaViolation {
        source_name: path.display().to_string(),
        line: e.line(),
        field: "$".into(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GradModule {
    Volume,
    Ball,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradTrial {
    pub seed: u64,
    pub voxels: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutput {
    pub module: GradModule,
    pub tol: f64,
    pub step: f64,
    pub max_dim: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    pub trials: Vec<GradTrial>,
}

/// Finite-difference check of analytic gradients on random fixtures with
/// seeds `seed, seed + 1, …`.
pub fn run_gradcheck(module: GradModule, trials: usize, tol: f64, seed: u64, max_dim: usize, step: f64) -> Result<GradcheckOutput> {
    if max_dim < 4 {
        return Err(reportsup_core::Error::InvalidConfig("max_dim must be at least 4").into());
    }
    let vcfg = VolumeLossConfig::default();
    let bcfg = BallLossConfig::default();
    let mut out = Vec::with_capacity(trials);
    for s in seed..seed + trials as u64 {
        let r = match module {
            GradModule::Volume => check_volume_fixture(&volume_fixture(s, max_dim), &vcfg, step)?,
            GradModule::Ball => check_ball_fixture(&ball_fixture(s, max_dim, &bcfg), &bcfg, step)?,
        };
        out.push(GradTrial { seed: s, voxels: r.checked, max_rel_err: r.max_rel_err, worst_index: r.worst_index });
    }
    let max_rel_err = out.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckOutput { module, tol, step, max_dim, max_rel_err, passed: max_rel_err < tol, trials: out })
}
