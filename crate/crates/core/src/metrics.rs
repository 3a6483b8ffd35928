//! Segmentation and detection metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{Mask, ProbGrid, Shape3, VoxelGrid};

/// Dice coefficient `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dsc(pred: &Mask, truth: &Mask) -> Result<f64> {
    pred.check_geometry(truth)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (p, t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (*p != 0, *t != 0);
        a += usize::from(p);
        b += usize::from(t);
        inter += usize::from(p && t);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Surface voxels: mask voxels with a 6-neighbour outside the mask or the grid.
pub fn boundary(mask: &Mask) -> Mask {
    let s = mask.shape();
    let d = mask.data();
    let mut out = mask.map(|_| 0u8);
    const NEIGHBOURS: [(isize, isize, isize); 6] = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
    for i in 0..d.len() {
        if d[i] == 0 {
            continue;
        }
        let [h, w, l] = s.coords(i).map(|v| v as isize);
        let surface = NEIGHBOURS.iter().any(|(a, b, c)| match s.checked_index(h + a, w + b, l + c) {
            Some(j) => d[j] == 0,
            None => true,
        });
        out.data_mut()[i] = u8::from(surface);
    }
    out
}

/// Exact 1D squared distance transform (lower envelope of parabolas) over
/// sample positions `k·spacing`. Infinite entries are not sites.
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let n = f.len();
    let mut sites: Vec<usize> = Vec::with_capacity(n);
    let mut bounds: Vec<f64> = Vec::with_capacity(n + 1);
    let x = |k: usize| k as f64 * spacing;
    let intersect = |p: usize, q: usize| ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
    for (q, fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        while let Some(&p) = sites.last() {
            let z = intersect(p, q);
            if z <= bounds[sites.len() - 1] {
                sites.pop();
                bounds.pop();
            } else {
                break;
            }
        }
        let z = match sites.last() {
            Some(&p) => intersect(p, q),
            None => f64::NEG_INFINITY,
        };
        sites.push(q);
        bounds.push(z);
    }
    if sites.is_empty() {
        out.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < sites.len() && bounds[k + 1] < x(q) {
            k += 1;
        }
        let p = sites[k];
        let d = x(q) - x(p);
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance in mm² from every voxel to the nearest nonzero
/// voxel of `features` (infinite when there is none).
pub fn squared_distance_transform(features: &Mask) -> ProbGrid {
    let shape = features.shape();
    let spacing = features.spacing().0;
    let mut cur: Vec<f64> = features.data().iter().map(|v| if *v != 0 { 0.0 } else { f64::INFINITY }).collect();
    let dims = shape.to_array();
    let strides = [shape.w * shape.l, shape.l, 1];
    for axis in [2, 1, 0] {
        let n = dims[axis];
        let mut line = vec![0.0; n];
        let mut res = vec![0.0; n];
        for start in 0..cur.len() {
            if !(start / strides[axis]).is_multiple_of(n) {
                continue;
            }
            for k in 0..n {
                line[k] = cur[start + k * strides[axis]];
            }
            edt_1d(&line, spacing[axis], &mut res);
            for k in 0..n {
                cur[start + k * strides[axis]] = res[k];
            }
        }
    }
    VoxelGrid::new(shape, features.spacing(), cur).expect("same geometry")
}

/// Whether a distance lies within `tolerance_mm`, with a 1e-12 relative slack
/// that absorbs rounding of sums of squares.
pub fn within_tolerance(dist2_mm2: f64, tolerance_mm: f64) -> bool {
    libm::sqrt(dist2_mm2) <= tolerance_mm * (1.0 + 1e-12)
}

/// Normalized surface distance: the fraction of both surfaces lying within
/// `tolerance_mm` of the other surface. Both empty → 1, one empty → 0.
pub fn nsd(pred: &Mask, truth: &Mask, tolerance_mm: f64) -> Result<f64> {
    pred.check_geometry(truth)?;
    if tolerance_mm.is_nan() || tolerance_mm < 0.0 {
        return Err(Error::InvalidConfig("tolerance_mm must be >= 0"));
    }
    let (bp, bt) = (boundary(pred), boundary(truth));
    let (np, nt) = (bp.count(), bt.count());
    if np + nt == 0 {
        return Ok(1.0);
    }
    if np == 0 || nt == 0 {
        return Ok(0.0);
    }
    let (dt_to_truth, dt_to_pred) = (squared_distance_transform(&bt), squared_distance_transform(&bp));
    let close = |surface: &Mask, dt: &ProbGrid| {
        surface
            .data()
            .iter()
            .zip(dt.data())
            .filter(|(s, d)| **s != 0 && within_tolerance(**d, tolerance_mm))
            .count()
    };
    let hits = close(&bp, &dt_to_truth) + close(&bt, &dt_to_pred);
    Ok(hits as f64 / (np + nt) as f64)
}

/// 26-connected component labels (0 = background, components numbered from
/// 1 in order of their lowest linear index) and per-component voxel counts.
pub fn connected_components(mask: &Mask) -> (VoxelGrid<u32>, Vec<usize>) {
    let shape: Shape3 = mask.shape();
    let d = mask.data();
    let mut labels = mask.map(|_| 0u32);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for seed in 0..d.len() {
        if d[seed] == 0 || labels.data()[seed] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels.data_mut()[seed] = label;
        stack.push(seed);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let [h, w, l] = shape.coords(i).map(|v| v as isize);
            for a in -1..=1 {
                for b in -1..=1 {
                    for c in -1..=1 {
                        if let Some(j) = shape.checked_index(h + a, w + b, l + c) {
                            if d[j] != 0 && labels.data()[j] == 0 {
                                labels.data_mut()[j] = label;
                                stack.push(j);
                            }
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Rule deciding whether a probability map shows a tumor in an organ.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct DetectionRule {
    pub prob_threshold: f64,
    pub min_volume_mm3: f64,
}

impl Default for DetectionRule {
    fn default() -> Self {
        Self { prob_threshold: 0.5, min_volume_mm3: 50.0 }
    }
}

impl DetectionRule {
    /// Volume in mm³ of the largest 26-connected component of
    /// `t >= prob_threshold` inside the organ (the whole grid when `organ` is
    /// `None`).
    pub fn score(&self, probs: &ProbGrid, organ: Option<&Mask>) -> Result<f64> {
        if let Some(o) = organ {
            probs.check_geometry(o)?;
        }
        let fg: Vec<u8> = probs
            .data()
            .iter()
            .enumerate()
            .map(|(i, t)| u8::from(*t >= self.prob_threshold && organ.is_none_or(|o| o.data()[i] != 0)))
            .collect();
        let fg = Mask::new(probs.shape(), probs.spacing(), fg)?;
        let (_, sizes) = connected_components(&fg);
        let largest = sizes.into_iter().max().unwrap_or(0);
        Ok(largest as f64 * probs.spacing().voxel_volume())
    }

    pub fn detects(&self, probs: &ProbGrid, organ: Option<&Mask>) -> Result<bool> {
        Ok(self.score(probs, organ)? > self.min_volume_mm3)
    }
}

/// Case-level confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DetectionOutcome {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[cfg_attr(feature = "serde", serde(rename = "fn"))]
    pub fn_: usize,
}

impl DetectionOutcome {
    pub fn from_predictions(predicted: &[bool], truth: &[bool]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::CohortLength { scores: predicted.len(), labels: truth.len() });
        }
        let mut o = Self::default();
        for (p, t) in predicted.iter().zip(truth) {
            match (p, t) {
                (true, true) => o.tp += 1,
                (true, false) => o.fp += 1,
                (false, false) => o.tn += 1,
                (false, true) => o.fn_ += 1,
            }
        }
        Ok(o)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `2TP / (2TP + FP + FN)`, 0 when undefined.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct F1Sweep {
    /// Cases with `score >= threshold` are called positive.
    pub threshold: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub outcome: DetectionOutcome,
}

/// Best-F1 operating point over all observed score values (ties → lower
/// threshold).
pub fn detection_f1_sweep(scores: &[f64], labels: &[bool]) -> Result<F1Sweep> {
    if scores.len() != labels.len() {
        return Err(Error::CohortLength { scores: scores.len(), labels: labels.len() });
    }
    if !labels.iter().any(|l| *l) || labels.iter().all(|l| *l) {
        return Err(Error::DegenerateCohort);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("scores must not be NaN"));
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut best: Option<F1Sweep> = None;
    for &threshold in &thresholds {
        let predicted: Vec<bool> = scores.iter().map(|s| *s >= threshold).collect();
        let outcome = DetectionOutcome::from_predictions(&predicted, labels)?;
        let f1 = outcome.f1();
        if best.is_none_or(|b| f1 > b.f1) {
            best = Some(F1Sweep {
                threshold,
                f1,
                sensitivity: outcome.sensitivity(),
                specificity: outcome.specificity(),
                outcome,
            });
        }
    }
    Ok(best.expect("non-empty cohort"))
}

/// Centroid of the nonzero voxels in voxel-index coordinates.
pub fn centroid(mask: &Mask) -> Option<[f64; 3]> {
    let shape = mask.shape();
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for (i, v) in mask.data().iter().enumerate() {
        if *v != 0 {
            let c = shape.coords(i);
            for a in 0..3 {
                acc[a] += c[a] as f64;
            }
            n += 1;
        }
    }
    (n > 0).then(|| acc.map(|v| v / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Spacing;

    fn cube(shape: Shape3, lo: [usize; 3], size: usize) -> Mask {
        Mask::from_fn(shape, Spacing::ISOTROPIC_1MM, |h, w, l| {
            u8::from((lo[0]..lo[0] + size).contains(&h) && (lo[1]..lo[1] + size).contains(&w) && (lo[2]..lo[2] + size).contains(&l))
        })
        .unwrap()
    }

    #[test]
    fn dsc_cases() {
        let s = Shape3::new(8, 8, 8);
        let a = cube(s, [0, 0, 0], 4);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &cube(s, [4, 4, 4], 4)).unwrap(), 0.0);
        assert_eq!(dsc(&a, &cube(s, [2, 0, 0], 4)).unwrap(), 0.5);
        let empty = Mask::filled(s, Spacing::ISOTROPIC_1MM, 0).unwrap();
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dsc(&a, &empty).unwrap(), 0.0);
    }

    #[test]
    fn nsd_cases() {
        let s = Shape3::new(10, 10, 10);
        let a = cube(s, [1, 1, 1], 4);
        assert_eq!(nsd(&a, &a, 0.0).unwrap(), 1.0);
        let far = cube(s, [5, 5, 5], 4);
        assert!(nsd(&a, &far, 1.0).unwrap() < 1.0);
        let empty = Mask::filled(s, Spacing::ISOTROPIC_1MM, 0).unwrap();
        assert_eq!(nsd(&empty, &empty, 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &empty, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn edt_on_line() {
        let s = Shape3::new(1, 1, 6);
        let m = Mask::from_fn(s, Spacing([1.0, 1.0, 0.5]), |_, _, l| u8::from(l == 1 || l == 5)).unwrap();
        let d = squared_distance_transform(&m);
        assert_eq!(d.data(), &[0.25, 0.0, 0.25, 1.0, 0.25, 0.0]);
        let none = Mask::filled(s, Spacing::ISOTROPIC_1MM, 0).unwrap();
        assert!(squared_distance_transform(&none).data().iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn components_26_connected() {
        let s = Shape3::new(4, 4, 4);
        let m = Mask::from_fn(s, Spacing::ISOTROPIC_1MM, |h, w, l| u8::from((h, w, l) == (0, 0, 0) || (h, w, l) == (1, 1, 1) || (h, w, l) == (3, 3, 3))).unwrap();
        let (labels, sizes) = connected_components(&m);
        assert_eq!(sizes, vec![2, 1]);
        assert_eq!(*labels.get(1, 1, 1), 1);
        assert_eq!(*labels.get(3, 3, 3), 2);
    }

    #[test]
    fn detection_rule_uses_largest_component() {
        let s = Shape3::new(10, 10, 10);
        let sp = Spacing([1.0, 1.0, 2.0]);
        let probs = ProbGrid::from_fn(s, sp, |h, w, l| if h < 3 && w < 3 && l < 3 { 0.9 } else if (h, w, l) == (8, 8, 8) { 0.7 } else { 0.1 }).unwrap();
        let rule = DetectionRule::default();
        assert_eq!(rule.score(&probs, None).unwrap(), 54.0);
        assert!(rule.detects(&probs, None).unwrap());
        let organ = Mask::from_fn(s, sp, |h, _, _| u8::from(h > 5)).unwrap();
        assert_eq!(rule.score(&probs, Some(&organ)).unwrap(), 2.0);
        assert!(!rule.detects(&probs, Some(&organ)).unwrap());
    }

    #[test]
    fn f1_sweep_examples() {
        let labels: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let separable: Vec<f64> = (0..20).map(|i| if i < 10 { 0.9 } else { 0.1 }).collect();
        assert_eq!(detection_f1_sweep(&separable, &labels).unwrap().f1, 1.0);

        let equal = vec![0.3; 20];
        let r = detection_f1_sweep(&equal, &labels).unwrap();
        assert!((r.f1 - 20.0 / 30.0).abs() < 1e-15);
        assert_eq!(r.sensitivity, 1.0);
        assert_eq!(r.specificity, 0.0);

        let mut flipped: Vec<f64> = labels.iter().map(|l| f64::from(u8::from(*l))).collect();
        flipped[3] = 0.0;
        let r = detection_f1_sweep(&flipped, &labels).unwrap();
        assert!((r.f1 - 18.0 / 19.0).abs() < 1e-15);
        assert_eq!(r.threshold, 1.0);
        assert_eq!(r.outcome, DetectionOutcome { tp: 9, fp: 0, tn: 10, fn_: 1 });

        assert_eq!(detection_f1_sweep(&[0.1, 0.2], &[true, true]), Err(Error::DegenerateCohort));
    }

    #[test]
    fn centroid_of_cube() {
        let m = cube(Shape3::new(8, 8, 8), [2, 3, 4], 2);
        assert_eq!(centroid(&m), Some([2.5, 3.5, 4.5]));
    }
}
