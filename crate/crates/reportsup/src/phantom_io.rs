//! Phantom batch specs and their on-disk output.
//!
//! A spec file holds a single [`PhantomSpec`], a list of them, or a random
//! batch:
//!
//! ```json
//! {"random": {"count": 100, "seed": 7, "options": {"tumor_count": [0, 3]}}}
//! ```
//!
//! The output directory receives one sub-directory per phantom with its grids,
//! `reports.jsonl` with every report, and `manifest.jsonl` with one
//! [`ManifestEntry`] per phantom.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use reportsup_core::metrics::centroid;
use reportsup_core::phantom::{perturb_report, random_phantom_spec, render_phantom, PhantomSpec, RandomPhantomOptions};
use reportsup_core::{OrganVocabulary, ReportFindings};

use crate::error::{io_err, IoError, Result};
use crate::grid_io::{write_mask, write_probs};
use crate::report_io::write_reports_jsonl;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomBatch {
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub options: RandomPhantomOptions,
    /// Prefix of generated `ct_id`s.
    #[serde(default = "default_prefix")]
    pub ct_prefix: String,
    /// Uniform relative noise applied to every reported diameter.
    #[serde(default)]
    pub report_noise_frac: f64,
}

fn default_prefix() -> String {
    "phantom".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhantomBatch {
    Random { random: RandomBatch },
    List(Vec<PhantomSpec>),
    Single(PhantomSpec),
}

/// A phantom spec plus the diameter noise applied to its report.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomJob {
    pub spec: PhantomSpec,
    pub report_noise_frac: f64,
}

impl PhantomBatch {
    pub fn jobs(&self) -> Result<Vec<PhantomJob>> {
        match self {
            PhantomBatch::Random { random } => (0..random.count)
                .map(|i| {
                    let seed = random.seed.wrapping_add(i as u64);
                    let ct_id = format!("{}_{i:04}", random.ct_prefix);
                    Ok(PhantomJob {
                        spec: random_phantom_spec(ct_id, &random.options, seed)?,
                        report_noise_frac: random.report_noise_frac,
                    })
                })
                .collect(),
            PhantomBatch::List(specs) => {
                Ok(specs.iter().map(|s| PhantomJob { spec: s.clone(), report_noise_frac: 0.0 }).collect())
            }
            PhantomBatch::Single(spec) => Ok(vec![PhantomJob { spec: spec.clone(), report_noise_frac: 0.0 }]),
        }
    }
}

pub fn load_batch(path: &Path) -> Result<PhantomBatch> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::SchemaViolation {
        source_name: path.display().to_string(),
        line: e.line(),
        field: "$".into(),
        message: format!("not a phantom spec, spec list or random batch: {e}"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TumorManifest {
    pub mask: String,
    pub organ: String,
    pub voxels: usize,
    pub centroid_vox: [f64; 3],
    pub report_diameters_mm: Vec<f64>,
}

/// One line of `manifest.jsonl`; paths are relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub ct_id: String,
    pub seed: u64,
    pub pred: String,
    pub truth: String,
    /// Mask of the organ holding the tumors (the first organ of the phantom).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organ: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organ_mask: Option<String>,
    pub organs: BTreeMap<String, String>,
    pub tumors: Vec<TumorManifest>,
}

fn rel(ct_id: &str, name: &str) -> String {
    format!("{ct_id}/{name}")
}

/// Renders one phantom and writes its grids below `out_dir`.
pub fn write_phantom(job: &PhantomJob, vocabulary: &OrganVocabulary, out_dir: &Path) -> Result<(ManifestEntry, ReportFindings)> {
    let spec = &job.spec;
    if spec.ct_id.is_empty() || spec.ct_id.contains(['/', '\\']) || spec.ct_id.starts_with('.') {
        return Err(reportsup_core::Error::InvalidConfig("ct_id must be a plain file name").into());
    }
    let ph = render_phantom(spec, vocabulary)?;
    let report = perturb_report(&ph.report, job.report_noise_frac, spec.seed ^ 0x5eed_d1a3)?;
    let ct = &spec.ct_id;
    let write_rel = |name: &str| -> PathBuf { out_dir.join(rel(ct, name)) };

    write_probs(&ph.probs, &write_rel("probs.bin"))?;
    write_mask(&ph.tumor_truth, &write_rel("tumors.bin"))?;
    let mut organs = BTreeMap::new();
    for (id, mask) in &ph.organ_masks {
        let name = format!("organ_{id}.bin");
        write_mask(mask, &write_rel(&name))?;
        organs.insert(id.clone(), rel(ct, &name));
    }
    let mut tumors = Vec::with_capacity(ph.tumor_masks.len());
    for (i, (mask, shape)) in ph.tumor_masks.iter().zip(&spec.tumors).enumerate() {
        let name = format!("tumor_{i}.bin");
        write_mask(mask, &write_rel(&name))?;
        tumors.push(TumorManifest {
            mask: rel(ct, &name),
            organ: shape.organ_id.clone(),
            voxels: mask.count(),
            centroid_vox: centroid(mask).expect("rendered tumors are nonempty"),
            report_diameters_mm: report.findings()[i].diameters_mm().to_vec(),
        });
    }
    let organ = spec.organs.first().map(|o| o.organ_id.clone());
    let entry = ManifestEntry {
        ct_id: ct.clone(),
        seed: spec.seed,
        pred: rel(ct, "probs.bin"),
        truth: rel(ct, "tumors.bin"),
        organ_mask: organ.as_ref().map(|o| organs[o].clone()),
        organ,
        organs,
        tumors,
    };
    Ok((entry, report))
}

/// Renders a batch in parallel and writes `reports.jsonl` and
/// `manifest.jsonl`; output order follows the batch order.
pub fn write_batch(batch: &PhantomBatch, vocabulary: &OrganVocabulary, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let jobs = batch.jobs()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let results: Vec<(ManifestEntry, ReportFindings)> =
        jobs.par_iter().map(|job| write_phantom(job, vocabulary, out_dir)).collect::<Result<_>>()?;
    let (entries, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    write_reports_jsonl(&out_dir.join("reports.jsonl"), &reports)?;
    let mut manifest = String::new();
    for e in &entries {
        manifest.push_str(&serde_json::to_string(e).expect("manifest serializes"));
        manifest.push('\n');
    }
    let mpath = out_dir.join("manifest.jsonl");
    fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
    Ok(entries)
}
