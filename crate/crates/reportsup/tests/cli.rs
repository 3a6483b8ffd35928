use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use reportsup::grid_io::{read_grid, read_mask, write_mask, write_probs};
use reportsup_core::{Mask, ProbGrid, Shape3, Spacing};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reportsup")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// A 20³ grid with a cubic organ and a 4³ block of probability 1 inside it.
fn write_case(dir: &Path, report: &str) {
    let s = Shape3::new(20, 20, 20);
    let sp = Spacing::ISOTROPIC_1MM;
    let organ = Mask::from_fn(s, sp, |h, w, l| u8::from([h, w, l].iter().all(|x| (3..17).contains(x)))).unwrap();
    let probs = ProbGrid::from_fn(s, sp, |h, w, l| if [h, w, l].iter().all(|x| (8..12).contains(x)) { 1.0 } else { 0.0 }).unwrap();
    write_mask(&organ, &dir.join("organ.bin")).unwrap();
    write_probs(&probs, &dir.join("probs.bin")).unwrap();
    fs::write(dir.join("r.json"), report).unwrap();
}

const LOSS_ARGS: [&str; 8] = ["--probs", "probs.bin", "--organ-mask", "organ.bin", "--report", "r.json", "--organ", "liver"];

#[test]
fn volume_loss_reports_components_and_gradient() {
    let dir = tempfile::tempdir().unwrap();
    // one 4 mm ball: V_r = 33.5 mm³, V_s = 64 mm³
    write_case(dir.path(), r#"{"ct_id":"a","findings":[{"organ":"liver","diameters_mm":[4]}],"normal":false}"#);
    let mut args = vec!["volume-loss"];
    args.extend(LOSS_ARGS);
    args.extend(["--grad-out", "grad.bin"]);
    let v = ok_json(run(&args, dir.path()));
    assert_eq!(v["v_s_mm3"], 64.0);
    let v_r = 4f64.powi(3) * std::f64::consts::PI / 6.0;
    let gap = |v_s: f64| (v_s - v_r).abs() / (v_s + v_r + 500.0);
    let expected = gap(64.0) - gap(0.9 * v_r);
    assert!((v["l_forg"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert_eq!(v["l_bkg"], 0.0);
    let grad = read_grid(&dir.path().join("grad.bin")).unwrap();
    assert_eq!(grad.shape, Shape3::new(20, 20, 20));

    // the dead zone widens with --tau
    let mut args = vec!["volume-loss", "--tau", "0.9"];
    args.extend(LOSS_ARGS);
    assert_eq!(ok_json(run(&args, dir.path()))["l_forg"], 0.0);
}

#[test]
fn size_less_finding_excludes_organ() {
    let dir = tempfile::tempdir().unwrap();
    write_case(
        dir.path(),
        r#"{"ct_id":"a","findings":[{"organ":"liver","diameters_mm":[4]},{"organ":"liver","diameters_mm":[],"has_size":false}],"normal":false}"#,
    );
    let mut args = vec!["volume-loss"];
    args.extend(LOSS_ARGS);
    let v = ok_json(run(&args, dir.path()));
    assert_eq!(v["excluded"], true);
    assert!(v["l_vol"].is_null());

    let mut args = vec!["ball-mask"];
    args.extend(LOSS_ARGS);
    args.extend(["--out", "pm.bin", "--manifest-out", "pl.json"]);
    assert!(run(&args, dir.path()).status.success());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("pl.json")).unwrap()).unwrap();
    assert_eq!(manifest["excluded"], true);
    assert_eq!(read_mask(&dir.path().join("pm.bin")).unwrap().count(), 0);
}

#[test]
fn ball_mask_places_reported_tumor() {
    let dir = tempfile::tempdir().unwrap();
    write_case(dir.path(), r#"{"ct_id":"a","findings":[{"organ":"liver","diameters_mm":[4,4,4]}],"normal":false}"#);
    let mut args = vec!["ball-mask"];
    args.extend(LOSS_ARGS);
    args.extend(["--out", "pm.bin", "--weights-out", "w.bin", "--manifest-out", "pl.json"]);
    let out = run(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("pl.json")).unwrap()).unwrap();
    let p = &m["placements"][0];
    assert_eq!(p["n_requested"], 34);
    assert_eq!(p["n_assigned"], 34);
    assert_eq!(p["shortfall"], 0);
    let c: Vec<u64> = p["center"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert!(c.iter().all(|x| (9..=10).contains(x)), "{c:?}");
    assert_eq!(read_mask(&dir.path().join("pm.bin")).unwrap().count(), 34);
    assert!(read_grid(&dir.path().join("w.bin")).is_ok());
}

#[test]
fn phantom_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("batch.json"), r#"{"random":{"count":5,"seed":11,"options":{"tumor_count":[0,2],"diameter_mm":[8,16]}}}"#).unwrap();
    let out = run(&["phantom", "--spec", "batch.json", "--out-dir", "d"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let d = dir.path().join("d");
    assert_eq!(fs::read_to_string(d.join("reports.jsonl")).unwrap().lines().count(), 5);
    assert_eq!(fs::read_to_string(d.join("manifest.jsonl")).unwrap().lines().count(), 5);

    // the phantom manifest doubles as the cohort manifest
    let v = ok_json(run(&["evaluate", "--pred-dir", "d", "--truth-dir", "d", "--manifest", "d/manifest.jsonl", "--metrics", "dsc,nsd"], dir.path()));
    assert_eq!(v["cases"].as_array().unwrap().len(), 5);
    assert_eq!(v["dsc_mean"], 1.0);
    assert_eq!(v["nsd_mean"], 1.0);
    assert!(v.get("f1").is_none());

    let out = run(&["evaluate", "--pred-dir", "d", "--truth-dir", "d", "--manifest", "d/manifest.jsonl", "--json-out", "res.json"], dir.path());
    assert!(out.status.success());
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("res.json")).unwrap()).unwrap();
    assert!(v["f1"].is_object() || v["f1_error"].is_string());
}

#[test]
fn phantom_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("batch.json"), r#"{"random":{"count":3,"seed":5}}"#).unwrap();
    for out in ["a", "b"] {
        assert!(run(&["phantom", "--spec", "batch.json", "--out-dir", out], dir.path()).status.success());
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for f in ["manifest.jsonl", "reports.jsonl", "phantom_0001/probs.bin", "phantom_0001/organ_liver.bin.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gradcheck_passes_and_fails_on_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok_json(run(&["gradcheck", "--module", "volume", "--trials", "2", "--max-dim", "6"], dir.path()));
    assert_eq!(v["passed"], true);
    assert_eq!(v["trials"].as_array().unwrap().len(), 2);
    let out = run(&["gradcheck", "--module", "ball", "--trials", "1", "--max-dim", "6", "--tol", "0"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn errors_exit_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    write_case(dir.path(), r#"{"ct_id":"a","findings":[{"organ":"liver","diameters_mm":[],"has_size":true}],"normal":false}"#);
    let mut args = vec!["volume-loss"];
    args.extend(LOSS_ARGS);
    let out = run(&args, dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("findings[0].diameters_mm"), "{err}");

    let out = run(&["volume-loss", "--probs", "probs.bin", "--organ-mask", "organ.bin", "--report", "r.json", "--organ", "lung"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
