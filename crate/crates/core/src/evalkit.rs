//! Detection evaluation: class-agnostic NMS, average precision, harmonic
//! means, and confusion matrices.
//!
//! The headline metric is NMS mAP: predictions first pass through
//! non-maximum suppression that ignores class labels, so per box only the
//! top-scoring label survives, and average precision is computed on the
//! survivors. Without that step a multi-label detector can emit every
//! plausible label for every box and collect generous AP from duplicates
//! that would never survive a real detection pipeline.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::compspace::{CompositionId, CompositionSpace, SplitSpec};
use crate::error::{Error, Result};

/// One scored, labeled box. `bbox` is `[x, y, w, h]` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub bbox: [f64; 4],
    pub composition: CompositionId,
    pub score: f64,
}

/// One ground-truth instance. `bbox` is `[x, y, w, h]` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: usize,
    pub bbox: [f64; 4],
    pub composition: CompositionId,
}

/// Intersection-over-union of two `[x, y, w, h]` boxes.
pub fn iou_xywh(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ax2 = a[0] + a[2];
    let ay2 = a[1] + a[3];
    let bx2 = b[0] + b[2];
    let by2 = b[1] + b[3];
    let ix = (ax2.min(bx2) - a[0].max(b[0])).max(0.0);
    let iy = (ay2.min(by2) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression that ignores class labels.
///
/// Detections are processed in descending score order (ties broken by lower
/// composition id, then insertion order); a detection is suppressed if its
/// IoU with any already-kept detection of the same image reaches
/// `iou_threshold`. Survivors keep their original scores, which by the
/// processing order are the maxima of their suppression clusters.
pub fn class_agnostic_nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &detections[i];
        let b = &detections[j];
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.composition.cmp(&b.composition))
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let d = &detections[i];
        let suppressed = kept.iter().any(|&k| {
            detections[k].image_id == d.image_id
                && iou_xywh(&detections[k].bbox, &d.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| detections[i].clone()).collect()
}

/// IoU thresholds AP is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouSweep {
    /// 0.50 to 0.95 in steps of 0.05 (ten thresholds).
    Coco,
    /// A single threshold.
    Single(f64),
}

impl Default for IouSweep {
    fn default() -> Self {
        Self::Coco
    }
}

impl IouSweep {
    pub fn thresholds(&self) -> Vec<f64> {
        match self {
            Self::Coco => (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            Self::Single(t) => vec![*t],
        }
    }
}

/// Average precision for one composition, as a percentage, averaged over the
/// IoU sweep. `None` when the composition has no ground-truth instance (AP
/// is undefined there).
///
/// Matching is greedy in score order: each detection takes the unmatched
/// same-image ground truth with the highest IoU at or above the threshold.
/// Precision-recall integration uses all-points interpolation.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    composition: CompositionId,
    sweep: &IouSweep,
) -> Option<f64> {
    let gts: Vec<&GroundTruth> = ground_truth
        .iter()
        .filter(|g| g.composition == composition)
        .collect();
    if gts.is_empty() {
        return None;
    }
    let mut dets: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.composition == composition)
        .collect();
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let thresholds = sweep.thresholds();
    let mut ap_sum = 0.0;
    for &thr in &thresholds {
        let mut matched = vec![false; gts.len()];
        let mut tp = 0usize;
        let mut points: Vec<(f64, f64)> = Vec::with_capacity(dets.len()); // (recall, precision)
        for (k, d) in dets.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if matched[gi] || g.image_id != d.image_id {
                    continue;
                }
                let iou = iou_xywh(&g.bbox, &d.bbox);
                if iou >= thr && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                matched[gi] = true;
                tp += 1;
            }
            points.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
        }
        // precision envelope from the right, then integrate recall steps
        let mut ap = 0.0;
        let mut max_p = 0.0_f64;
        let mut prev_recall = if let Some(&(r, _)) = points.last() { r } else { 0.0 };
        for &(r, p) in points.iter().rev() {
            max_p = max_p.max(p);
            ap += (prev_recall - r) * max_p;
            prev_recall = r;
        }
        ap += prev_recall * max_p;
        ap_sum += ap;
    }
    Some(100.0 * ap_sum / thresholds.len() as f64)
}

/// Evaluation knobs for [`nms_map`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalParams {
    /// IoU at or above which NMS suppresses.
    pub nms_iou: f64,
    /// IoU thresholds AP is averaged over.
    pub sweep: IouSweep,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            nms_iou: 0.5,
            sweep: IouSweep::default(),
        }
    }
}

/// Full evaluation result: per-composition AP plus split-level aggregates,
/// all in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP per composition id; `None` where undefined (no ground truth).
    pub per_composition_ap: Vec<Option<f64>>,
    /// Ground-truth instance count per composition.
    pub gt_counts: Vec<usize>,
    /// Post-NMS detection count per composition.
    pub detection_counts: Vec<usize>,
    pub map_overall: Option<f64>,
    pub map_pretrain: Option<f64>,
    pub map_increment: Option<f64>,
    pub map_unseen: Option<f64>,
    /// Mean over `C_p ∪ C_i`.
    pub map_seen: Option<f64>,
    pub hm_seen_unseen: Option<f64>,
    /// Three-way harmonic mean over pretrain, increment, and unseen mAP;
    /// populated only when the split has an increment set.
    pub hm_pretrain_increment_unseen: Option<f64>,
}

fn mean_of(values: &[Option<f64>], comps: &[CompositionId]) -> Option<f64> {
    let defined: Vec<f64> = comps.iter().filter_map(|&c| values[c]).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Applies class-agnostic NMS, then computes per-composition AP and the
/// split-level means and harmonic means.
pub fn nms_map(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    space: &CompositionSpace,
    split: &SplitSpec,
    params: &EvalParams,
) -> Result<EvalReport> {
    if ground_truth.is_empty() {
        return Err(Error::EmptyInput("evaluation needs ground truth".into()));
    }
    for g in ground_truth {
        space.decompose(g.composition)?;
    }
    for d in detections {
        space.decompose(d.composition)?;
    }
    let survivors = class_agnostic_nms(detections, params.nms_iou);
    evaluate_detections(&survivors, ground_truth, space, split, &params.sweep)
}

/// AP aggregation without the NMS step; used to demonstrate how duplicate
/// labels inflate plain mAP.
pub fn map_without_nms(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    space: &CompositionSpace,
    split: &SplitSpec,
    sweep: &IouSweep,
) -> Result<EvalReport> {
    if ground_truth.is_empty() {
        return Err(Error::EmptyInput("evaluation needs ground truth".into()));
    }
    evaluate_detections(detections, ground_truth, space, split, sweep)
}

fn evaluate_detections(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    space: &CompositionSpace,
    split: &SplitSpec,
    sweep: &IouSweep,
) -> Result<EvalReport> {
    let n = space.num_compositions();
    let mut per_composition_ap = vec![None; n];
    let mut gt_counts = vec![0usize; n];
    let mut detection_counts = vec![0usize; n];
    for g in ground_truth {
        gt_counts[g.composition] += 1;
    }
    for d in detections {
        detection_counts[d.composition] += 1;
    }
    for c in 0..n {
        per_composition_ap[c] = average_precision(detections, ground_truth, c, sweep);
    }

    let pretrain: Vec<_> = split.pretrain().collect();
    let increment: Vec<_> = split.increment().collect();
    let unseen = split.unseen();
    let seen = split.seen();
    let all = space.all_compositions();

    let map_pretrain = mean_of(&per_composition_ap, &pretrain);
    let map_increment = mean_of(&per_composition_ap, &increment);
    let map_unseen = mean_of(&per_composition_ap, &unseen);
    let map_seen = mean_of(&per_composition_ap, &seen);
    let map_overall = mean_of(&per_composition_ap, &all);

    let hm_seen_unseen = match (map_seen, map_unseen) {
        (Some(s), Some(u)) => Some(harmonic_mean(s, u)?),
        _ => None,
    };
    let hm_pretrain_increment_unseen = if increment.is_empty() {
        None
    } else {
        match (map_pretrain, map_increment, map_unseen) {
            (Some(p), Some(i), Some(u)) => Some(harmonic_mean3(p, i, u)?),
            _ => None,
        }
    };

    Ok(EvalReport {
        per_composition_ap,
        gt_counts,
        detection_counts,
        map_overall,
        map_pretrain,
        map_increment,
        map_unseen,
        map_seen,
        hm_seen_unseen,
        hm_pretrain_increment_unseen,
    })
}

/// Harmonic mean `2ab / (a + b)`; 0 when both inputs are 0. Inputs must be
/// non-negative.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if a < 0.0 || b < 0.0 || !a.is_finite() || !b.is_finite() {
        return Err(Error::Validation(format!(
            "harmonic mean needs finite non-negative inputs, got ({a}, {b})"
        )));
    }
    if a + b == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * a * b / (a + b))
}

/// Three-way harmonic mean `3 / (1/a + 1/b + 1/c)`; 0 when any input is 0.
pub fn harmonic_mean3(a: f64, b: f64, c: f64) -> Result<f64> {
    for v in [a, b, c] {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::Validation(format!(
                "harmonic mean needs finite non-negative inputs, got ({a}, {b}, {c})"
            )));
        }
    }
    if a == 0.0 || b == 0.0 || c == 0.0 {
        return Ok(0.0);
    }
    Ok(3.0 / (1.0 / a + 1.0 / b + 1.0 / c))
}

/// Row = ground-truth composition, column = predicted composition, plus a
/// per-row count of instances no surviving detection covered.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
    pub missed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_compositions: usize) -> Self {
        Self {
            counts: Array2::zeros((num_compositions, num_compositions)),
            missed: vec![0; num_compositions],
        }
    }

    pub fn num_compositions(&self) -> usize {
        self.missed.len()
    }

    /// Row-normalized view over matched instances: each row with at least
    /// one match sums to 1; rows without matches stay zero.
    pub fn normalized_rows(&self) -> Array2<f64> {
        let n = self.num_compositions();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            let row_sum: u64 = self.counts.row(i).sum();
            if row_sum > 0 {
                for j in 0..n {
                    out[[i, j]] = self.counts[[i, j]] as f64 / row_sum as f64;
                }
            }
        }
        out
    }

    /// Writes a CSV with composition names as header row and column, plus a
    /// trailing `missed` column.
    pub fn write_csv(&self, space: &CompositionSpace, path: &Path) -> Result<()> {
        let n = self.num_compositions();
        if n != space.num_compositions() {
            return Err(Error::ShapeMismatch(format!(
                "matrix over {n} compositions, space has {}",
                space.num_compositions()
            )));
        }
        let mut writer = csv::Writer::from_path(path)?;
        let mut header = vec![String::new()];
        for c in 0..n {
            header.push(space.composition_name(c)?);
        }
        header.push("missed".to_string());
        writer.write_record(&header)?;
        for i in 0..n {
            let mut row = vec![space.composition_name(i)?];
            for j in 0..n {
                row.push(self.counts[[i, j]].to_string());
            }
            row.push(self.missed[i].to_string());
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Self::write_csv`], validating names against
    /// the space.
    pub fn read_csv(space: &CompositionSpace, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let n = space.num_compositions();
        let headers = reader.headers()?.clone();
        if headers.len() != n + 2 {
            return Err(Error::ShapeMismatch(format!(
                "confusion csv has {} columns, expected {}",
                headers.len(),
                n + 2
            )));
        }
        for c in 0..n {
            let expected = space.composition_name(c)?;
            if headers.get(c + 1) != Some(expected.as_str()) {
                return Err(Error::Validation(format!(
                    "confusion csv column {} is {:?}, expected {:?}",
                    c + 1,
                    headers.get(c + 1).unwrap_or(""),
                    expected
                )));
            }
        }
        if headers.get(n + 1) != Some("missed") {
            return Err(Error::Validation("confusion csv missing `missed` column".into()));
        }
        let mut matrix = Self::new(n);
        let mut rows = 0usize;
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            if i >= n {
                return Err(Error::ShapeMismatch("confusion csv has too many rows".into()));
            }
            let expected = space.composition_name(i)?;
            if record.get(0) != Some(expected.as_str()) {
                return Err(Error::Validation(format!(
                    "confusion csv row {i} is {:?}, expected {:?}",
                    record.get(0).unwrap_or(""),
                    expected
                )));
            }
            for j in 0..n {
                let cell = record.get(j + 1).unwrap_or("");
                matrix.counts[[i, j]] = cell.parse().map_err(|_| {
                    Error::Validation(format!("confusion csv cell ({i}, {j}) = {cell:?}"))
                })?;
            }
            let miss = record.get(n + 1).unwrap_or("");
            matrix.missed[i] = miss.parse().map_err(|_| {
                Error::Validation(format!("confusion csv missed cell in row {i} = {miss:?}"))
            })?;
            rows += 1;
        }
        if rows != n {
            return Err(Error::ShapeMismatch(format!(
                "confusion csv has {rows} rows, expected {n}"
            )));
        }
        Ok(matrix)
    }
}

/// Builds a confusion matrix from post-NMS detections: every ground-truth
/// instance is matched to the highest-scoring surviving detection of its
/// image with IoU at or above `iou_match`, or counted as missed.
pub fn confusion_matrix(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    space: &CompositionSpace,
    iou_match: f64,
) -> Result<ConfusionMatrix> {
    let mut matrix = ConfusionMatrix::new(space.num_compositions());
    for g in ground_truth {
        space.decompose(g.composition)?;
        let mut best: Option<&Detection> = None;
        for d in detections {
            if d.image_id != g.image_id || iou_xywh(&d.bbox, &g.bbox) < iou_match {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => {
                    d.score > b.score
                        || (d.score == b.score && d.composition < b.composition)
                }
            };
            if better {
                best = Some(d);
            }
        }
        match best {
            Some(d) => {
                space.decompose(d.composition)?;
                matrix.counts[[g.composition, d.composition]] += 1;
            }
            None => matrix.missed[g.composition] += 1,
        }
    }
    Ok(matrix)
}
