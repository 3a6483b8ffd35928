//! Structured report findings and report-derived tumor volume targets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};

/// Known organ / sub-segment identifiers with display names and parent organ.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganVocabulary {
    entries: BTreeMap<String, OrganEntry>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OrganEntry {
    pub id: String,
    pub display_name: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub parent: Option<String>,
}

impl OrganVocabulary {
    pub fn new<I: IntoIterator<Item = OrganEntry>>(entries: I) -> Self {
        Self { entries: entries.into_iter().map(|e| (e.id.clone(), e)).collect() }
    }

    pub fn contains(&self, organ_id: &str) -> bool {
        self.entries.contains_key(organ_id)
    }

    pub fn get(&self, organ_id: &str) -> Option<&OrganEntry> {
        self.entries.get(organ_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &OrganEntry> {
        self.entries.values()
    }

    pub fn check(&self, organ_id: &str) -> Result<()> {
        if self.contains(organ_id) {
            Ok(())
        } else {
            Err(Error::UnknownOrgan(organ_id.to_string()))
        }
    }
}

impl Default for OrganVocabulary {
    fn default() -> Self {
        let e = |id: &str, name: &str, parent: Option<&str>| OrganEntry {
            id: id.to_string(),
            display_name: name.to_string(),
            parent: parent.map(ToString::to_string),
        };
        Self::new([
            e("pancreas", "Pancreas", None),
            e("pancreas_head", "Pancreas head", Some("pancreas")),
            e("pancreas_body", "Pancreas body", Some("pancreas")),
            e("pancreas_tail", "Pancreas tail", Some("pancreas")),
            e("kidney", "Kidneys", None),
            e("kidney_left", "Left kidney", Some("kidney")),
            e("kidney_right", "Right kidney", Some("kidney")),
            e("liver", "Liver", None),
        ])
    }
}

/// One reported tumor: its location and up to three diameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TumorFinding {
    organ_id: String,
    diameters_mm: Vec<f64>,
}

impl TumorFinding {
    /// A sized finding. Diameters are validated and stored in descending order.
    pub fn new(organ_id: impl Into<String>, diameters_mm: &[f64]) -> Result<Self> {
        if diameters_mm.is_empty() {
            return Err(Error::SizeMissing);
        }
        let diameters_mm = sorted_diameters(diameters_mm)?;
        Ok(Self { organ_id: organ_id.into(), diameters_mm })
    }

    /// A finding whose report mentions the tumor but no size.
    pub fn without_size(organ_id: impl Into<String>) -> Self {
        Self { organ_id: organ_id.into(), diameters_mm: Vec::new() }
    }

    pub fn organ_id(&self) -> &str {
        &self.organ_id
    }

    /// Diameters in mm, largest first.
    pub fn diameters_mm(&self) -> &[f64] {
        &self.diameters_mm
    }

    pub fn has_size(&self) -> bool {
        !self.diameters_mm.is_empty()
    }

    pub fn largest_diameter_mm(&self) -> Option<f64> {
        self.diameters_mm.first().copied()
    }
}

fn sorted_diameters(diameters_mm: &[f64]) -> Result<Vec<f64>> {
    if diameters_mm.len() > 3 {
        return Err(Error::TooManyDiameters(diameters_mm.len()));
    }
    if let Some(bad) = diameters_mm.iter().find(|d| !d.is_finite() || **d <= 0.0) {
        return Err(Error::InvalidDiameter(*bad));
    }
    let mut sorted = diameters_mm.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted)
}

/// Structured findings of one CT report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFindings {
    ct_id: String,
    findings: Vec<TumorFinding>,
    normal: bool,
}

impl ReportFindings {
    pub fn new(
        ct_id: impl Into<String>,
        findings: Vec<TumorFinding>,
        normal: bool,
        vocabulary: &OrganVocabulary,
    ) -> Result<Self> {
        let ct_id = ct_id.into();
        if normal != findings.is_empty() {
            let reason = if normal {
                format!("marked normal but lists {} finding(s)", findings.len())
            } else {
                "not marked normal but lists no findings".to_string()
            };
            return Err(Error::InvalidReport { ct_id, reason });
        }
        for f in &findings {
            vocabulary.check(&f.organ_id)?;
        }
        Ok(Self { ct_id, findings, normal })
    }

    /// Report of a CT without tumors.
    pub fn normal(ct_id: impl Into<String>) -> Self {
        Self { ct_id: ct_id.into(), findings: Vec::new(), normal: true }
    }

    pub fn ct_id(&self) -> &str {
        &self.ct_id
    }

    pub fn findings(&self) -> &[TumorFinding] {
        &self.findings
    }

    pub fn is_normal(&self) -> bool {
        self.normal
    }

    /// Copy with every finding's diameters transformed by `f`.
    ///
    /// `f` receives `(finding_index, diameter_index, diameter)`.
    pub fn map_diameters<F: FnMut(usize, usize, f64) -> f64>(&self, mut f: F) -> Result<Self> {
        let mut findings = Vec::with_capacity(self.findings.len());
        for (i, finding) in self.findings.iter().enumerate() {
            if !finding.has_size() {
                findings.push(finding.clone());
                continue;
            }
            let ds: Vec<f64> =
                finding.diameters_mm.iter().enumerate().map(|(j, d)| f(i, j, *d)).collect();
            findings.push(TumorFinding::new(finding.organ_id.clone(), &ds)?);
        }
        Ok(Self { ct_id: self.ct_id.clone(), findings, normal: self.normal })
    }
}

/// Ellipsoid volume estimate in mm³ from one to three diameters.
///
/// One diameter is treated as a ball, two diameters impute the third as their
/// mean. The product is always formed from the descending-sorted triple so the
/// result does not depend on input order.
pub fn estimate_tumor_volume(diameters_mm: &[f64]) -> Result<f64> {
    if diameters_mm.is_empty() {
        return Err(Error::SizeMissing);
    }
    let d = sorted_diameters(diameters_mm)?;
    let mut triple = match d.len() {
        1 => [d[0], d[0], d[0]],
        2 => [d[0], d[1], (d[0] + d[1]) / 2.0],
        _ => [d[0], d[1], d[2]],
    };
    triple.sort_by(|a, b| b.total_cmp(a));
    Ok(triple[0] * triple[1] * triple[2] * PI / 6.0)
}

/// One tumor's contribution to an organ target.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TumorEstimate {
    /// Index of the finding in the source report.
    pub finding_index: usize,
    /// Largest reported diameter in mm.
    pub diameter_mm: f64,
    pub volume_mm3: f64,
}

/// Report-estimated total tumor volume for one organ.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OrganVolumeTarget {
    pub organ_id: String,
    pub v_r_mm3: f64,
    pub tumor_count: usize,
    /// Sized tumors, largest diameter first (stable on ties).
    pub per_tumor: Vec<TumorEstimate>,
    /// Set when the report mentions a tumor in this organ without a size; such
    /// organs receive no supervision.
    pub excluded: bool,
}

impl OrganVolumeTarget {
    /// Target for an organ the report describes as tumor-free.
    pub fn normal(organ_id: impl Into<String>) -> Self {
        Self {
            organ_id: organ_id.into(),
            v_r_mm3: 0.0,
            tumor_count: 0,
            per_tumor: Vec::new(),
            excluded: false,
        }
    }

    /// Builds a target from tumor estimates, sorting them by diameter.
    pub fn from_tumors(organ_id: impl Into<String>, mut per_tumor: Vec<TumorEstimate>) -> Self {
        per_tumor.sort_by(|a, b| b.diameter_mm.total_cmp(&a.diameter_mm));
        let v_r_mm3 = per_tumor.iter().map(|t| t.volume_mm3).sum();
        Self {
            organ_id: organ_id.into(),
            v_r_mm3,
            tumor_count: per_tumor.len(),
            per_tumor,
            excluded: false,
        }
    }
}

/// Per-organ targets of one report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VolumeTargets {
    targets: BTreeMap<String, OrganVolumeTarget>,
}

impl VolumeTargets {
    pub fn get(&self, organ_id: &str) -> Option<&OrganVolumeTarget> {
        self.targets.get(organ_id)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// All targets including excluded organs.
    pub fn iter(&self) -> impl Iterator<Item = &OrganVolumeTarget> {
        self.targets.values()
    }

    /// Targets that receive supervision.
    pub fn supervised(&self) -> impl Iterator<Item = &OrganVolumeTarget> {
        self.targets.values().filter(|t| !t.excluded)
    }

    /// Organs excluded because of size-less findings.
    pub fn excluded(&self) -> impl Iterator<Item = &str> {
        self.targets.values().filter(|t| t.excluded).map(|t| t.organ_id.as_str())
    }

    /// The organ's target, or a zero-volume target when the report lists no
    /// tumor there.
    pub fn target_or_normal(
        &self,
        organ_id: &str,
        vocabulary: &OrganVocabulary,
    ) -> Result<OrganVolumeTarget> {
        vocabulary.check(organ_id)?;
        Ok(self.get(organ_id).cloned().unwrap_or_else(|| OrganVolumeTarget::normal(organ_id)))
    }
}

/// Groups a report's findings by organ and sums their estimated volumes.
pub fn build_volume_targets(
    report: &ReportFindings,
    vocabulary: &OrganVocabulary,
) -> Result<VolumeTargets> {
    let mut grouped: BTreeMap<String, (Vec<TumorEstimate>, bool)> = BTreeMap::new();
    for (finding_index, finding) in report.findings().iter().enumerate() {
        vocabulary.check(finding.organ_id())?;
        let entry = grouped.entry(finding.organ_id().to_string()).or_default();
        match finding.largest_diameter_mm() {
            Some(diameter_mm) => entry.0.push(TumorEstimate {
                finding_index,
                diameter_mm,
                volume_mm3: estimate_tumor_volume(finding.diameters_mm())?,
            }),
            None => entry.1 = true,
        }
    }
    let targets = grouped
        .into_iter()
        .map(|(organ, (tumors, missing_size))| {
            let mut target = OrganVolumeTarget::from_tumors(organ.clone(), tumors);
            target.excluded = missing_size;
            (organ, target)
        })
        .collect();
    Ok(VolumeTargets { targets })
}
