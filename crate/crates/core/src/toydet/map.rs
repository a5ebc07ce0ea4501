//! Mean average precision with 101-point interpolated precision.

use serde::{Deserialize, Serialize};

use super::boxes::{iou, Detection};
use super::GroundTruth;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// AP per class (averaged over thresholds); `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub iou_thresholds: Vec<f64>,
}

/// The COCO threshold set `{0.5, 0.55, …, 0.95}`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Average precision from a score-ranked TP/FP sequence.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    // monotone envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r - 1e-12);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

/// Marks each detection (in descending-score order) as TP or FP by greedy
/// matching; every ground-truth box is consumed at most once.
fn match_class(dets: &[(usize, &Detection)], gts: &[Vec<&super::GtBox>], thr: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    dets.iter()
        .map(|&(img, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[img].iter().enumerate() {
                if used[img][j] {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    used[img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// mAP over classes that have ground truth and over the given IoU thresholds.
pub fn evaluate_map(
    detections: &[Vec<Detection>],
    groundtruth: &[GroundTruth],
    iou_thresholds: &[f64],
    num_classes: usize,
) -> Result<MapReport> {
    if detections.len() != groundtruth.len() {
        return Err(Error::shape("evaluate_map", "images", groundtruth.len(), detections.len()));
    }
    if iou_thresholds.is_empty() {
        return Err(Error::InvalidArgument("no IoU thresholds".into()));
    }
    let total_gt: usize = groundtruth.iter().map(|g| g.boxes.len()).sum();
    if total_gt == 0 {
        return Err(Error::Empty("mAP needs at least one ground-truth box".into()));
    }
    let mut per_class = vec![None; num_classes];
    let mut aps = Vec::new();
    for (cls, slot) in per_class.iter_mut().enumerate() {
        let gts: Vec<Vec<&super::GtBox>> = groundtruth
            .iter()
            .map(|g| g.boxes.iter().filter(|b| b.class_id == cls).collect())
            .collect();
        let num_gt: usize = gts.iter().map(|g| g.len()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut dets: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().filter(|d| d.class_id == cls).map(move |d| (img, d)))
            .collect();
        // stable: equal scores keep image-major input order
        dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut sum = 0.0;
        for &thr in iou_thresholds {
            let tp = match_class(&dets, &gts, thr);
            sum += average_precision(&tp, num_gt);
        }
        let ap = sum / iou_thresholds.len() as f64;
        *slot = Some(ap);
        aps.push(ap);
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    Ok(MapReport {
        map,
        per_class,
        iou_thresholds: iou_thresholds.to_vec(),
    })
}
