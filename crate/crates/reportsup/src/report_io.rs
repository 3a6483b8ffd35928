//! JSON / JSONL report records.
//!
//! ```json
//! {"ct_id": "ct001", "findings": [{"organ": "liver", "diameters_mm": [20, 10]}], "normal": false}
//! ```
//!
//! A finding may carry `"has_size": false` with an empty `diameters_mm` to
//! record a tumor mentioned without measurements.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use reportsup_core::{OrganVocabulary, ReportFindings, TumorFinding};

use crate::error::{io_err, IoError, Result};

/// Location used in schema diagnostics.
#[derive(Debug, Clone)]
struct Site<'a> {
    source_name: &'a str,
    line: usize,
}

impl Site<'_> {
    fn violation(&self, field: impl Into<String>, message: impl Into<String>) -> IoError {
        IoError::SchemaViolation {
            source_name: self.source_name.to_string(),
            line: self.line,
            field: field.into(),
            message: message.into(),
        }
    }
}

fn check_keys(site: &Site, obj: &Map<String, Value>, prefix: &str, allowed: &[&str]) -> Result<()> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            let field = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            return Err(site.violation(field, "unknown field"));
        }
    }
    Ok(())
}

fn parse_finding(site: &Site, value: &Value, path: &str, vocabulary: &OrganVocabulary) -> Result<TumorFinding> {
    let obj = value.as_object().ok_or_else(|| site.violation(path, "expected an object"))?;
    check_keys(site, obj, path, &["organ", "diameters_mm", "has_size"])?;

    let organ_path = format!("{path}.organ");
    let organ = obj
        .get("organ")
        .ok_or_else(|| site.violation(&organ_path, "missing"))?
        .as_str()
        .ok_or_else(|| site.violation(&organ_path, "expected a string"))?;
    if !vocabulary.contains(organ) {
        return Err(site.violation(organ_path, format!("unknown organ {organ:?}")));
    }

    let diam_path = format!("{path}.diameters_mm");
    let raw = obj
        .get("diameters_mm")
        .ok_or_else(|| site.violation(&diam_path, "missing"))?
        .as_array()
        .ok_or_else(|| site.violation(&diam_path, "expected an array"))?;
    if raw.len() > 3 {
        return Err(site.violation(&diam_path, format!("at most 3 diameters, got {}", raw.len())));
    }
    let mut diameters = Vec::with_capacity(raw.len());
    for (i, d) in raw.iter().enumerate() {
        let d_path = format!("{diam_path}[{i}]");
        let d = d.as_f64().ok_or_else(|| site.violation(&d_path, "expected a number"))?;
        if !(d.is_finite() && d > 0.0) {
            return Err(site.violation(d_path, format!("diameter must be > 0, got {d}")));
        }
        diameters.push(d);
    }

    let has_size = match obj.get("has_size") {
        None => !diameters.is_empty(),
        Some(v) => v.as_bool().ok_or_else(|| site.violation(format!("{path}.has_size"), "expected a boolean"))?,
    };
    match (has_size, diameters.is_empty()) {
        (true, true) => Err(site.violation(diam_path, "has_size is true but no diameters are given")),
        (false, false) => Err(site.violation(format!("{path}.has_size"), "has_size is false but diameters are given")),
        (false, true) => Ok(TumorFinding::without_size(organ)),
        (true, false) => Ok(TumorFinding::new(organ, &diameters)?),
    }
}

fn parse_value(site: &Site, value: &Value, vocabulary: &OrganVocabulary) -> Result<ReportFindings> {
    let obj = value.as_object().ok_or_else(|| site.violation("$", "expected an object"))?;
    check_keys(site, obj, "", &["ct_id", "findings", "normal"])?;
    let ct_id = obj
        .get("ct_id")
        .ok_or_else(|| site.violation("ct_id", "missing"))?
        .as_str()
        .ok_or_else(|| site.violation("ct_id", "expected a string"))?;
    if ct_id.is_empty() {
        return Err(site.violation("ct_id", "must not be empty"));
    }
    let raw = obj
        .get("findings")
        .ok_or_else(|| site.violation("findings", "missing"))?
        .as_array()
        .ok_or_else(|| site.violation("findings", "expected an array"))?;
    let normal = obj
        .get("normal")
        .ok_or_else(|| site.violation("normal", "missing"))?
        .as_bool()
        .ok_or_else(|| site.violation("normal", "expected a boolean"))?;
    let findings = raw
        .iter()
        .enumerate()
        .map(|(i, f)| parse_finding(site, f, &format!("findings[{i}]"), vocabulary))
        .collect::<Result<Vec<_>>>()?;
    if normal != findings.is_empty() {
        return Err(site.violation("normal", "must be true exactly when findings is empty"));
    }
    Ok(ReportFindings::new(ct_id, findings, normal, vocabulary)?)
}

/// Parses one JSON record. `source_name` and `line` only label diagnostics.
pub fn parse_report(text: &str, vocabulary: &OrganVocabulary, source_name: &str, line: usize) -> Result<ReportFindings> {
    let site = Site { source_name, line };
    let value: Value = serde_json::from_str(text).map_err(|e| site.violation("$", e.to_string()))?;
    parse_value(&site, &value, vocabulary)
}

/// Parses JSONL text; blank lines are skipped, line numbers are 1-based.
pub fn parse_reports_jsonl(text: &str, vocabulary: &OrganVocabulary, source_name: &str) -> Result<Vec<ReportFindings>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_report(l, vocabulary, source_name, i + 1))
        .collect()
}

/// Reads all records of a JSONL file, or the single record of a JSON file
/// that spans several lines.
pub fn read_reports(path: &Path, vocabulary: &OrganVocabulary) -> Result<Vec<ReportFindings>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let name = path.display().to_string();
    if let Ok(value) = serde_json::from_str::<Value>(&text) {
        return Ok(vec![parse_value(&Site { source_name: &name, line: 1 }, &value, vocabulary)?]);
    }
    parse_reports_jsonl(&text, vocabulary, &name)
}

/// Reads one report; with several records, `ct_id` selects among them.
pub fn read_report(path: &Path, vocabulary: &OrganVocabulary, ct_id: Option<&str>) -> Result<ReportFindings> {
    let reports = read_reports(path, vocabulary)?;
    let name = path.display().to_string();
    let site = Site { source_name: &name, line: 0 };
    match ct_id {
        Some(id) => reports
            .into_iter()
            .find(|r| r.ct_id() == id)
            .ok_or_else(|| site.violation("ct_id", format!("no record with ct_id {id:?}"))),
        None if reports.len() == 1 => Ok(reports.into_iter().next().expect("one record")),
        None => Err(site.violation("$", format!("expected one record, found {}; select one by ct_id", reports.len()))),
    }
}

/// Reads several report files in parallel, one thread per file.
pub fn read_report_files(paths: &[PathBuf], vocabulary: &OrganVocabulary) -> Vec<Result<Vec<ReportFindings>>> {
    paths.par_iter().map(|p| read_reports(p, vocabulary)).collect()
}

pub fn finding_to_json(finding: &TumorFinding) -> Value {
    let mut obj = Map::new();
    obj.insert("organ".into(), json!(finding.organ_id()));
    obj.insert("diameters_mm".into(), json!(finding.diameters_mm()));
    if !finding.has_size() {
        obj.insert("has_size".into(), json!(false));
    }
    Value::Object(obj)
}

pub fn report_to_json(report: &ReportFindings) -> Value {
    json!({
        "ct_id": report.ct_id(),
        "findings": report.findings().iter().map(finding_to_json).collect::<Vec<_>>(),
        "normal": report.is_normal(),
    })
}

/// One compact JSON object per line, each terminated by `\n`.
pub fn to_jsonl(reports: &[ReportFindings]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&report_to_json(r).to_string());
        out.push('\n');
    }
    out
}

pub fn write_reports_jsonl(path: &Path, reports: &[ReportFindings]) -> Result<()> {
    fs::write(path, to_jsonl(reports)).map_err(io_err(path))
}
