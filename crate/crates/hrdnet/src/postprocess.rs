//! Detection post-processing: greedy NMS, multi-scale test merging and the
//! pre-NMS model-ensemble baseline.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Parallel lists of boxes, confidence scores and class labels for one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSet {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

impl DetectionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn push(&mut self, b: BBox, score: f64, label: usize) {
        self.boxes.push(b);
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: &DetectionSet) {
        self.boxes.extend_from_slice(&other.boxes);
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
    }

    fn select(&self, keep: &[usize]) -> DetectionSet {
        let mut out = DetectionSet::new();
        for &i in keep {
            out.push(self.boxes[i], self.scores[i], self.labels[i]);
        }
        out
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = match a.intersect(b) {
        Some(r) => r.area(),
        None => return 0.0,
    };
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Indices sorted by (score descending, input index ascending).
fn score_order(dets: &DetectionSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets.scores[b]
            .partial_cmp(&dets.scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy per-class NMS: keep the highest-scoring box, suppress same-class
/// boxes overlapping it above `iou_threshold`, repeat. Output is sorted by
/// (score desc, original index asc).
pub fn nms(dets: &DetectionSet, iou_threshold: f64) -> DetectionSet {
    let order = score_order(dets);
    let mut keep = Vec::new();
    let mut suppressed = vec![false; dets.len()];
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if suppressed[j] || dets.labels[j] != dets.labels[i] {
                continue;
            }
            if iou(&dets.boxes[i], &dets.boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    dets.select(&keep)
}

/// Merge detections produced at several test scales: map every box back to
/// source resolution (divide by its scale factor), concatenate, NMS at 0.5.
pub fn multi_scale_merge(
    det_sets: &[DetectionSet],
    scale_factors: &[f64],
    iou_threshold: f64,
) -> Result<DetectionSet> {
    if det_sets.len() != scale_factors.len() {
        return Err(Error::Config(format!(
            "{} detection sets but {} scale factors",
            det_sets.len(),
            scale_factors.len()
        )));
    }
    let mut merged = DetectionSet::new();
    for (dets, &f) in det_sets.iter().zip(scale_factors) {
        if f <= 0.0 {
            return Err(Error::Config(format!("non-positive scale factor {f}")));
        }
        for i in 0..dets.len() {
            let b = dets.boxes[i];
            merged.push(
                BBox::new(b.x / f, b.y / f, b.w / f, b.h / f),
                dets.scores[i],
                dets.labels[i],
            );
        }
    }
    Ok(nms(&merged, iou_threshold))
}

/// Model-ensemble baseline: pool every model's pre-NMS candidates, then run
/// a single joint NMS.
pub fn ensemble_merge(raw_det_sets: &[DetectionSet], iou_threshold: f64) -> DetectionSet {
    let mut pooled = DetectionSet::new();
    for dets in raw_det_sets {
        pooled.extend(dets);
    }
    nms(&pooled, iou_threshold)
}

/// One serialized detection record (JSON lines dump format).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

/// Write detections for one image as JSON lines.
pub fn write_detections<W: Write>(
    out: &mut W,
    image_id: u64,
    dets: &DetectionSet,
) -> Result<()> {
    for i in 0..dets.len() {
        let b = dets.boxes[i];
        let rec = DetectionRecord {
            image_id,
            category_id: dets.labels[i],
            score: dets.scores[i],
            bbox: [b.x, b.y, b.w, b.h],
        };
        serde_json::to_writer(&mut *out, &rec)
            .map_err(|e| Error::Parse(format!("detection record: {e}")))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a JSON-lines detection dump, grouped by image id in file order.
pub fn read_detections<R: BufRead>(input: R) -> Result<Vec<(u64, DetectionSet)>> {
    let mut by_image: Vec<(u64, DetectionSet)> = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("detection dump line {}: {e}", lineno + 1)))?;
        let entry = match by_image.iter_mut().find(|(id, _)| *id == rec.image_id) {
            Some(e) => &mut e.1,
            None => {
                by_image.push((rec.image_id, DetectionSet::new()));
                &mut by_image.last_mut().unwrap().1
            }
        };
        entry.push(
            BBox::new(rec.bbox[0], rec.bbox[1], rec.bbox[2], rec.bbox[3]),
            rec.score,
            rec.category_id,
        );
    }
    Ok(by_image)
}
