//! COCO-style average precision.

use serde::{Deserialize, Serialize};

use crate::decoder::LayerTrace;
use crate::loss::{cxcywh_to_xyxy, iou, Targets};
use crate::tensor::sigmoid;

/// Detections kept per image.
pub const MAX_DETECTIONS: usize = 100;
const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, …, 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    /// Normalized `(cx, cy, w, h)`.
    pub bbox: [f64; 4],
}

/// Top-scoring `(query, class)` pairs of one decoded image.
pub fn detections_from_layer(layer: &LayerTrace, image: usize, max_dets: usize) -> Vec<Detection> {
    let logits = &layer.class_logits;
    let (nq, nc) = (logits.rows(), logits.cols());
    let mut all: Vec<Detection> = (0..nq)
        .flat_map(|q| {
            let b = layer.boxes.row(q);
            let bbox = [b[0], b[1], b[2], b[3]];
            (0..nc).map(move |c| Detection {
                image,
                class: c,
                score: sigmoid(logits.at(q, c)),
                bbox,
            })
        })
        .collect();
    // stable sort keeps query-major order among equal scores
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(max_dets);
    all
}

/// Lower and upper tercile edges of ground-truth box areas.
pub fn area_terciles(gts: &[Targets]) -> (f64, f64) {
    let mut areas: Vec<f64> = gts
        .iter()
        .flat_map(|t| t.boxes.iter().map(|b| b[2] * b[3]))
        .collect();
    if areas.is_empty() {
        return (0.0, 0.0);
    }
    areas.sort_by(f64::total_cmp);
    let n = areas.len();
    (areas[n.div_ceil(3) - 1], areas[(2 * n).div_ceil(3) - 1])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// AP at each threshold, averaged over classes with ground truth.
    pub per_threshold: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
}

fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    iou(cxcywh_to_xyxy(*a), cxcywh_to_xyxy(*b)).unwrap_or(0.0)
}

/// Area under the 101-point interpolated precision–recall curve.
fn interpolated_ap(tp_flags: &[bool], n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &t in tp_flags {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_pos as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while k < recall.len() && recall[k] < level - 1e-12 {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / RECALL_POINTS as f64
}

/// AP of one class at one threshold, with ground truth outside `area` ignored.
fn class_ap(dets: &[&Detection], gts: &[Targets], class: usize, thr: f64, area: (f64, f64)) -> Option<f64> {
    let in_range = |b: &[f64; 4]| {
        let a = b[2] * b[3];
        a >= area.0 && a <= area.1
    };
    let gt_boxes: Vec<Vec<([f64; 4], bool)>> = gts
        .iter()
        .map(|t| {
            t.boxes
                .iter()
                .zip(&t.classes)
                .filter(|(_, &c)| c == class)
                .map(|(b, _)| (*b, !in_range(b)))
                .collect()
        })
        .collect();
    let n_pos: usize = gt_boxes.iter().map(|g| g.iter().filter(|(_, ign)| !ign).count()).sum();
    if n_pos == 0 {
        return None;
    }
    let mut matched: Vec<Vec<bool>> = gt_boxes.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(dets.len());
    for d in dets {
        let cands = &gt_boxes[d.image];
        // best unmatched non-ignored GT first, ignored GT only as a fallback
        let mut best: Option<(usize, f64, bool)> = None;
        for (g, (b, ignored)) in cands.iter().enumerate() {
            if matched[d.image][g] {
                continue;
            }
            let v = box_iou(&d.bbox, b);
            if v < thr {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bv, bign)) => (bign && !ignored) || (bign == *ignored && v > bv),
            };
            if better {
                best = Some((g, v, *ignored));
            }
        }
        match best {
            Some((g, _, ignored)) => {
                matched[d.image][g] = true;
                if !ignored {
                    flags.push(true);
                }
            }
            None => {
                if in_range(&d.bbox) {
                    flags.push(false);
                }
            }
        }
    }
    Some(interpolated_ap(&flags, n_pos))
}

/// Mean AP over classes with ground truth inside `area`; 0 if there are none.
fn mean_ap(dets: &[Detection], gts: &[Targets], n_classes: usize, thr: f64, area: (f64, f64)) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for c in 0..n_classes {
        let mut cd: Vec<&Detection> = dets.iter().filter(|d| d.class == c).collect();
        cd.sort_by(|a, b| b.score.total_cmp(&a.score));
        if let Some(ap) = class_ap(&cd, gts, c, thr, area) {
            total += ap;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// AP per threshold, their mean, and size-bucket APs with buckets split at
/// `area_edges` (box area as a fraction of the image).
pub fn evaluate_ap(
    dets: &[Detection],
    gts: &[Targets],
    n_classes: usize,
    thresholds: &[f64],
    area_edges: (f64, f64),
) -> ApReport {
    let all = (0.0, f64::INFINITY);
    let per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&t| mean_ap(dets, gts, n_classes, t, all))
        .collect();
    let ap = if thresholds.is_empty() {
        0.0
    } else {
        per_threshold.iter().sum::<f64>() / thresholds.len() as f64
    };
    let at = |target: f64| {
        if let Some(i) = thresholds.iter().position(|&t| (t - target).abs() < 1e-9) {
            per_threshold[i]
        } else {
            mean_ap(dets, gts, n_classes, target, all)
        }
    };
    let bucket = |range: (f64, f64)| {
        if thresholds.is_empty() {
            return 0.0;
        }
        thresholds
            .iter()
            .map(|&t| mean_ap(dets, gts, n_classes, t, range))
            .sum::<f64>()
            / thresholds.len() as f64
    };
    let (lo, hi) = area_edges;
    ApReport {
        ap,
        ap50: at(0.5),
        ap75: at(0.75),
        ap_small: bucket((0.0, lo)),
        ap_medium: bucket((lo.next_up(), hi)),
        ap_large: bucket((hi.next_up(), f64::INFINITY)),
        per_threshold,
        thresholds: thresholds.to_vec(),
    }
}
