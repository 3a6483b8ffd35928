//! Cohort evaluation: per-case DSC / NSD and case-level detection F1.
//!
//! The cohort manifest is JSONL with one case per line:
//!
//! ```json
//! {"ct_id": "ct001", "pred": "ct001/probs.bin", "truth": "ct001/tumors.bin", "organ_mask": "ct001/organ_liver.bin"}
//! ```
//!
//! `pred` is resolved against the prediction directory, `truth` and
//! `organ_mask` against the truth directory. Unknown fields are ignored, so
//! phantom manifests can be used directly.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use reportsup_core::metrics::{detection_f1_sweep, dsc, nsd, DetectionOutcome, DetectionRule, F1Sweep};
use reportsup_core::sum::pairwise_sum;
use reportsup_core::{Mask, ProbGrid};

use crate::error::{io_err, IoError, Result};
use crate::grid_io::{read_mask, read_probs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortCase {
    pub ct_id: String,
    pub pred: String,
    pub truth: String,
    #[serde(default)]
    pub organ_mask: Option<String>,
}

pub fn parse_cohort(text: &str, source_name: &str) -> Result<Vec<CohortCase>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IoError::SchemaViolation {
                source_name: source_name.to_string(),
                line: i + 1,
                field: "$".into(),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_cohort(path: &Path) -> Result<Vec<CohortCase>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_cohort(&text, &path.display().to_string())
}

/// Which metrics to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSet {
    pub f1: bool,
    pub dsc: bool,
    pub nsd: bool,
}

impl Default for MetricSet {
    fn default() -> Self {
        Self { f1: true, dsc: true, nsd: true }
    }
}

impl FromStr for MetricSet {
    type Err = String;

    /// Comma-separated subset of `f1,dsc,nsd`.
    fn from_str(s: &str) -> Result<Self, String> {
        let mut set = MetricSet { f1: false, dsc: false, nsd: false };
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "f1" => set.f1 = true,
                "dsc" => set.dsc = true,
                "nsd" => set.nsd = true,
                other => return Err(format!("unknown metric {other:?} (expected f1, dsc, nsd)")),
            }
        }
        if !(set.f1 || set.dsc || set.nsd) {
            return Err("no metric selected".into());
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub metrics: MetricSet,
    pub nsd_tolerance_mm: f64,
    pub rule: DetectionRule,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { metrics: MetricSet::default(), nsd_tolerance_mm: 2.0, rule: DetectionRule::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub ct_id: String,
    /// Largest connected component of the thresholded prediction, mm³.
    pub score: f64,
    pub detected: bool,
    pub truth_positive: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nsd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsc_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nsd_mean: Option<f64>,
    pub nsd_tolerance_mm: f64,
    pub rule: DetectionRule,
    /// Confusion counts at the rule's own volume threshold.
    pub at_rule: DetectionOutcome,
    /// Best-F1 operating point over observed scores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<F1Sweep>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_error: Option<String>,
}

/// Metrics of one case from in-memory grids.
pub fn evaluate_case(ct_id: &str, pred: &ProbGrid, truth: &Mask, organ: Option<&Mask>, opts: &EvalOptions) -> Result<CaseResult> {
    pred.check_geometry(truth)?;
    let binary = pred.map(|t| u8::from(*t >= opts.rule.prob_threshold));
    let truth_positive = match organ {
        Some(o) => truth.data().iter().zip(o.data()).any(|(t, o)| *t != 0 && *o != 0),
        None => truth.count() > 0,
    };
    let score = opts.rule.score(pred, organ)?;
    Ok(CaseResult {
        ct_id: ct_id.to_string(),
        score,
        detected: score > opts.rule.min_volume_mm3,
        truth_positive,
        dsc: if opts.metrics.dsc { Some(dsc(&binary, truth)?) } else { None },
        nsd: if opts.metrics.nsd { Some(nsd(&binary, truth, opts.nsd_tolerance_mm)?) } else { None },
    })
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Evaluates every case in parallel; aggregates follow manifest order.
pub fn evaluate_cohort(cases: &[CohortCase], pred_dir: &Path, truth_dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let results: Vec<CaseResult> = cases
        .par_iter()
        .map(|c| {
            let pred = read_probs(&resolve(pred_dir, &c.pred))?;
            let truth = read_mask(&resolve(truth_dir, &c.truth))?;
            let organ = c.organ_mask.as_deref().map(|m| read_mask(&resolve(truth_dir, m))).transpose()?;
            evaluate_case(&c.ct_id, &pred, &truth, organ.as_ref(), opts)
        })
        .collect::<Result<_>>()?;
    summarize(results, opts)
}

pub fn summarize(cases: Vec<CaseResult>, opts: &EvalOptions) -> Result<EvalReport> {
    let mean = |values: Vec<f64>| (!values.is_empty()).then(|| pairwise_sum(&values) / values.len() as f64);
    let dsc_mean = mean(cases.iter().filter_map(|c| c.dsc).collect());
    let nsd_mean = mean(cases.iter().filter_map(|c| c.nsd).collect());
    let labels: Vec<bool> = cases.iter().map(|c| c.truth_positive).collect();
    let detected: Vec<bool> = cases.iter().map(|c| c.detected).collect();
    let at_rule = DetectionOutcome::from_predictions(&detected, &labels)?;
    let (f1, f1_error) = if opts.metrics.f1 {
        let scores: Vec<f64> = cases.iter().map(|c| c.score).collect();
        match detection_f1_sweep(&scores, &labels) {
            Ok(sweep) => (Some(sweep), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };
    Ok(EvalReport {
        cases,
        dsc_mean,
        nsd_mean,
        nsd_tolerance_mm: opts.nsd_tolerance_mm,
        rule: opts.rule,
        at_rule,
        f1,
        f1_error,
    })
}
