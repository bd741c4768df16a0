//! COCO-style detection metrics: AP averaged over IoU 0.50:0.05:0.95,
//! AP50/AP75, size-bucketed AP and AR@k.
//!
//! Matching and accumulation mirror the de-facto reference evaluator:
//! stable score ordering, greedy highest-IoU matching with one match per
//! ground truth, area-based ignore rules, and 101-point precision
//! interpolation via a left-sided search on the recall curve.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::postprocess::{iou, DetectionSet};

/// IoU thresholds 0.50:0.05:0.95, bit-identical to `np.linspace(0.5, 0.95, 10)`
/// (index 8 is 0.8999999999999999, not the nearest double to 0.9).
pub fn iou_thresholds() -> Vec<f64> {
    let step = (0.95 - 0.5) / 9.0;
    let mut t: Vec<f64> = (0..10).map(|i| i as f64 * step + 0.5).collect();
    t[9] = 0.95;
    t
}

/// Recall interpolation points {0, 0.01, ..., 1}, bit-identical to
/// `np.linspace(0.0, 1.0, 101)` (computed as i * 0.01, which differs from
/// i / 100 by one ulp at several indices, e.g. 0.7000000000000001 at i = 70).
pub fn recall_thresholds() -> Vec<f64> {
    let mut t: Vec<f64> = (0..=100).map(|i| i as f64 * 0.01).collect();
    t[100] = 1.0;
    t
}

/// Area buckets: small < 32², medium [32², 96²), large >= 96².
pub const AREA_ALL: (f64, f64) = (0.0, f64::INFINITY);
pub const AREA_SMALL: (f64, f64) = (0.0, 1024.0);
pub const AREA_MEDIUM: (f64, f64) = (1024.0, 9216.0);
pub const AREA_LARGE: (f64, f64) = (9216.0, f64::INFINITY);

/// Detections plus ground truth for one image.
#[derive(Debug, Clone)]
pub struct EvalInput {
    pub id: u64,
    pub dets: DetectionSet,
    pub gt_boxes: Vec<BBox>,
    pub gt_labels: Vec<usize>,
}

/// The metric columns reported for every run. `None` marks a metric whose
/// ground-truth population is empty (e.g. no medium objects in the dataset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub ar1: Option<f64>,
    pub ar10: Option<f64>,
    pub ar100: Option<f64>,
    pub ar500: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("eval report: {e}")))
    }
}

/// Greedy TP/FP flags for one image and IoU threshold (no ignore rules).
///
/// `dets` must already be sorted by score descending. Each detection matches
/// the highest-IoU not-yet-matched ground truth of its own class with
/// IoU >= `iou_threshold`.
pub fn match_detections(
    dets: &DetectionSet,
    gt_boxes: &[BBox],
    gt_labels: &[usize],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut gt_matched = vec![false; gt_boxes.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for d in 0..dets.len() {
        let mut best = iou_threshold.min(1.0 - 1e-10);
        let mut m: Option<usize> = None;
        for (gi, gt) in gt_boxes.iter().enumerate() {
            if gt_matched[gi] || gt_labels[gi] != dets.labels[d] {
                continue;
            }
            let v = iou(&dets.boxes[d], gt);
            if v < best {
                continue;
            }
            best = v;
            m = Some(gi);
        }
        if let Some(gi) = m {
            gt_matched[gi] = true;
            flags.push(true);
        } else {
            flags.push(false);
        }
    }
    flags
}

/// Per-image, per-category match state for every IoU threshold.
struct ImageEval {
    /// Detection scores, sorted descending, truncated to the detection cap.
    scores: Vec<f64>,
    /// `tp[t][d]`: detection d matched a non-ignored ground truth.
    tp: Vec<Vec<bool>>,
    /// `ignore[t][d]`: detection d is excluded (matched an ignored ground
    /// truth, or unmatched with an out-of-range area).
    ignore: Vec<Vec<bool>>,
    /// Non-ignored ground truths in this image.
    num_gt: usize,
}

/// Stable order by descending score.
fn stable_score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn eval_image(
    input: &EvalInput,
    category: usize,
    area_rng: (f64, f64),
    max_det: usize,
    thresholds: &[f64],
) -> ImageEval {
    // category subsets
    let gt_idx: Vec<usize> = (0..input.gt_boxes.len())
        .filter(|&i| input.gt_labels[i] == category)
        .collect();
    let dt_all: Vec<usize> = (0..input.dets.len())
        .filter(|&i| input.dets.labels[i] == category)
        .collect();
    let dt_scores_all: Vec<f64> = dt_all.iter().map(|&i| input.dets.scores[i]).collect();
    let dt_idx: Vec<usize> = stable_score_order(&dt_scores_all)
        .into_iter()
        .take(max_det)
        .map(|k| dt_all[k])
        .collect();

    // ignored ground truths go last (stable)
    let gt_ignore_raw: Vec<bool> = gt_idx
        .iter()
        .map(|&i| {
            let a = input.gt_boxes[i].area();
            a < area_rng.0 || a > area_rng.1
        })
        .collect();
    let mut gt_order: Vec<usize> = (0..gt_idx.len()).collect();
    gt_order.sort_by_key(|&k| gt_ignore_raw[k]);
    let gt_boxes: Vec<BBox> = gt_order.iter().map(|&k| input.gt_boxes[gt_idx[k]]).collect();
    let gt_ignore: Vec<bool> = gt_order.iter().map(|&k| gt_ignore_raw[k]).collect();

    let scores: Vec<f64> = dt_idx.iter().map(|&i| input.dets.scores[i]).collect();
    let dt_out_of_area: Vec<bool> = dt_idx
        .iter()
        .map(|&i| {
            let a = input.dets.boxes[i].area();
            a < area_rng.0 || a > area_rng.1
        })
        .collect();

    let mut tp = Vec::with_capacity(thresholds.len());
    let mut ignore = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let t = t.min(1.0 - 1e-10);
        let mut gt_matched = vec![false; gt_boxes.len()];
        let mut tp_t = vec![false; dt_idx.len()];
        let mut ig_t = vec![false; dt_idx.len()];
        for (d, &di) in dt_idx.iter().enumerate() {
            let mut best = t;
            let mut m: Option<usize> = None;
            for gi in 0..gt_boxes.len() {
                if gt_matched[gi] {
                    continue;
                }
                // once matched to a real ground truth, never trade it for an
                // ignored one (ignored gts are sorted last)
                if let Some(cur) = m {
                    if !gt_ignore[cur] && gt_ignore[gi] {
                        break;
                    }
                }
                let v = iou(&input.dets.boxes[di], &gt_boxes[gi]);
                if v < best {
                    continue;
                }
                best = v;
                m = Some(gi);
            }
            match m {
                Some(gi) => {
                    gt_matched[gi] = true;
                    if gt_ignore[gi] {
                        ig_t[d] = true;
                    } else {
                        tp_t[d] = true;
                    }
                }
                None => {
                    if dt_out_of_area[d] {
                        ig_t[d] = true;
                    }
                }
            }
        }
        tp.push(tp_t);
        ignore.push(ig_t);
    }
    ImageEval {
        scores,
        tp,
        ignore,
        num_gt: gt_ignore.iter().filter(|&&x| !x).count(),
    }
}

/// Per-category, per-threshold AP and final recall. `None` when the
/// category has no ground truth in this area range.
struct CategoryCurve {
    ap_per_t: Vec<f64>,
    recall_per_t: Vec<f64>,
}

fn category_curve(
    images: &[EvalInput],
    category: usize,
    area_rng: (f64, f64),
    max_det: usize,
    thresholds: &[f64],
    recall_points: &[f64],
) -> Option<CategoryCurve> {
    let evals: Vec<ImageEval> = images
        .iter()
        .map(|img| eval_image(img, category, area_rng, max_det, thresholds))
        .collect();
    let npig: usize = evals.iter().map(|e| e.num_gt).sum();
    if npig == 0 {
        return None;
    }
    // concatenate detections across images (image order), then stable-sort
    // by descending score
    let all_scores: Vec<f64> = evals.iter().flat_map(|e| e.scores.iter().copied()).collect();
    let order = stable_score_order(&all_scores);

    let mut ap_per_t = Vec::with_capacity(thresholds.len());
    let mut recall_per_t = Vec::with_capacity(thresholds.len());
    for ti in 0..thresholds.len() {
        let tp_flat: Vec<bool> = evals.iter().flat_map(|e| e.tp[ti].iter().copied()).collect();
        let ig_flat: Vec<bool> = evals
            .iter()
            .flat_map(|e| e.ignore[ti].iter().copied())
            .collect();
        let mut precisions = Vec::new();
        let mut recalls = Vec::new();
        let (mut tp_cum, mut fp_cum) = (0usize, 0usize);
        for &i in &order {
            if ig_flat[i] {
                continue;
            }
            if tp_flat[i] {
                tp_cum += 1;
            } else {
                fp_cum += 1;
            }
            precisions.push(tp_cum as f64 / (tp_cum + fp_cum) as f64);
            recalls.push(tp_cum as f64 / npig as f64);
        }
        recall_per_t.push(recalls.last().copied().unwrap_or(0.0));
        // monotone envelope from the right
        for i in (0..precisions.len().saturating_sub(1)).rev() {
            if precisions[i] < precisions[i + 1] {
                precisions[i] = precisions[i + 1];
            }
        }
        // left-sided search: first index with recall >= r
        let mut q_sum = 0.0;
        for &r in recall_points {
            let idx = recalls.partition_point(|&rc| rc < r);
            if idx < precisions.len() {
                q_sum += precisions[idx];
            }
        }
        ap_per_t.push(q_sum / recall_points.len() as f64);
    }
    Some(CategoryCurve {
        ap_per_t,
        recall_per_t,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Mean AP over categories with ground truth, per IoU threshold, then
/// averaged over thresholds (plus the AP at a single threshold index).
fn area_ap(
    images: &[EvalInput],
    num_classes: usize,
    area_rng: (f64, f64),
    max_det: usize,
) -> (Option<f64>, Option<f64>, Option<f64>) {
    let thresholds = iou_thresholds();
    let recall_points = recall_thresholds();
    let curves: Vec<CategoryCurve> = (0..num_classes)
        .filter_map(|c| category_curve(images, c, area_rng, max_det, &thresholds, &recall_points))
        .collect();
    if curves.is_empty() {
        return (None, None, None);
    }
    let mut all = Vec::new();
    let mut at50 = Vec::new();
    let mut at75 = Vec::new();
    for curve in &curves {
        all.extend(curve.ap_per_t.iter().copied());
        at50.push(curve.ap_per_t[0]);
        at75.push(curve.ap_per_t[5]);
    }
    (mean(&all), mean(&at50), mean(&at75))
}

fn area_ar(images: &[EvalInput], num_classes: usize, max_det: usize) -> Option<f64> {
    let thresholds = iou_thresholds();
    let recall_points = recall_thresholds();
    let mut recalls = Vec::new();
    for c in 0..num_classes {
        if let Some(curve) =
            category_curve(images, c, AREA_ALL, max_det, &thresholds, &recall_points)
        {
            recalls.extend(curve.recall_per_t.iter().copied());
        }
    }
    mean(&recalls)
}

/// Full evaluation over a set of images.
pub fn evaluate(images: &[EvalInput], num_classes: usize) -> EvalReport {
    let (ap, ap50, ap75) = area_ap(images, num_classes, AREA_ALL, 100);
    let (ap_small, _, _) = area_ap(images, num_classes, AREA_SMALL, 100);
    let (ap_medium, _, _) = area_ap(images, num_classes, AREA_MEDIUM, 100);
    let (ap_large, _, _) = area_ap(images, num_classes, AREA_LARGE, 100);
    EvalReport {
        ap,
        ap50,
        ap75,
        ap_small,
        ap_medium,
        ap_large,
        ar1: area_ar(images, num_classes, 1),
        ar10: area_ar(images, num_classes, 10),
        ar100: area_ar(images, num_classes, 100),
        ar500: area_ar(images, num_classes, 500),
    }
}

/// Pair a dataset's ground truth with per-image detections (by image id;
/// images without detections count with an empty set).
pub fn evaluate_dataset(dataset: &Dataset, dets_by_image: &[(u64, DetectionSet)]) -> EvalReport {
    let images: Vec<EvalInput> = dataset
        .samples
        .iter()
        .map(|s| EvalInput {
            id: s.id,
            dets: dets_by_image
                .iter()
                .find(|(id, _)| *id == s.id)
                .map(|(_, d)| d.clone())
                .unwrap_or_default(),
            gt_boxes: s.data.boxes.clone(),
            gt_labels: s.data.labels.clone(),
        })
        .collect();
    evaluate(&images, dataset.num_classes())
}
