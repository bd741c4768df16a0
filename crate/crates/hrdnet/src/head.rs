//! Single-stage anchor-based detection head: shared conv towers over the
//! output pyramid, focal classification loss, smooth-L1 box regression.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::config::HeadConfig;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::layers::{conv_init_std, gn_init, ConvParams, GnParams};
use crate::nn::{Graph, NodeId, ParamStore, Real};
use crate::postprocess::DetectionSet;

/// Prior box in center form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl AnchorBox {
    pub fn to_bbox(&self) -> BBox {
        BBox::new(self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)
    }
}

/// Grid anchors for every pyramid level, flattened (y, x, anchor) per level.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub per_level: Vec<Vec<AnchorBox>>,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl AnchorSet {
    pub fn total(&self) -> usize {
        self.per_level.iter().map(|l| l.len()).sum()
    }

    pub fn flattened(&self) -> Vec<AnchorBox> {
        self.per_level.iter().flatten().copied().collect()
    }
}

/// Deterministic grid anchors. Base size is 4x the level stride; `ratios`
/// are height/width aspect ratios.
pub fn generate_anchors(
    level_shapes: &[(usize, usize, usize)],
    scales: &[f64],
    ratios: &[f64],
) -> Result<AnchorSet> {
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::Config("anchor scales and ratios must be non-empty".into()));
    }
    let mut per_level = Vec::with_capacity(level_shapes.len());
    for &(stride, h, w) in level_shapes {
        let base = (4 * stride) as f64;
        let mut anchors = Vec::with_capacity(h * w * scales.len() * ratios.len());
        for y in 0..h {
            for x in 0..w {
                let cx = (x as f64 + 0.5) * stride as f64;
                let cy = (y as f64 + 0.5) * stride as f64;
                for &s in scales {
                    for &r in ratios {
                        anchors.push(AnchorBox {
                            cx,
                            cy,
                            w: base * s / r.sqrt(),
                            h: base * s * r.sqrt(),
                        });
                    }
                }
            }
        }
        per_level.push(anchors);
    }
    Ok(AnchorSet {
        per_level,
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
    })
}

/// Center/size offsets of a ground-truth box relative to an anchor.
pub fn encode_box(gt: &BBox, anchor: &AnchorBox) -> [f64; 4] {
    let gcx = gt.x + gt.w / 2.0;
    let gcy = gt.y + gt.h / 2.0;
    [
        (gcx - anchor.cx) / anchor.w,
        (gcy - anchor.cy) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

/// Inverse of [`encode_box`].
pub fn decode_box(anchor: &AnchorBox, deltas: &[f64; 4]) -> BBox {
    let cx = anchor.cx + deltas[0] * anchor.w;
    let cy = anchor.cy + deltas[1] * anchor.h;
    let w = anchor.w * deltas[2].exp();
    let h = anchor.h * deltas[3].exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
}

/// Training role of one anchor after IoU assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorTarget {
    Negative,
    Ignore,
    Positive { class: usize, deltas: [f64; 4] },
}

/// IoU-based assignment: positive above `positive_iou`, negative below
/// `negative_iou`, ignored in between. Every ground truth additionally
/// forces its best-IoU anchor positive.
pub fn assign_targets(
    anchors: &[AnchorBox],
    gt_boxes: &[BBox],
    labels: &[usize],
    positive_iou: f64,
    negative_iou: f64,
) -> Vec<AnchorTarget> {
    let mut out = vec![AnchorTarget::Negative; anchors.len()];
    if gt_boxes.is_empty() {
        return out;
    }
    let mut best_gt_iou = vec![0.0f64; gt_boxes.len()];
    let mut best_gt_anchor = vec![0usize; gt_boxes.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        let abox = anchor.to_bbox();
        let mut best = 0.0;
        let mut best_gt = None;
        for (gi, gt) in gt_boxes.iter().enumerate() {
            let v = crate::postprocess::iou(&abox, gt);
            if v > best {
                best = v;
                best_gt = Some(gi);
            }
            if v > best_gt_iou[gi] {
                best_gt_iou[gi] = v;
                best_gt_anchor[gi] = ai;
            }
        }
        out[ai] = match best_gt {
            Some(gi) if best >= positive_iou => AnchorTarget::Positive {
                class: labels[gi],
                deltas: encode_box(&gt_boxes[gi], anchor),
            },
            _ if best < negative_iou => AnchorTarget::Negative,
            _ => AnchorTarget::Ignore,
        };
    }
    // best-anchor rule, in ground-truth order
    for (gi, &ai) in best_gt_anchor.iter().enumerate() {
        if best_gt_iou[gi] > 0.0 {
            out[ai] = AnchorTarget::Positive {
                class: labels[gi],
                deltas: encode_box(&gt_boxes[gi], &anchors[ai]),
            };
        }
    }
    out
}

/// Loss components for one batch element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub classification: f64,
    pub regression: f64,
    pub total: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Sigmoid focal term for one logit. Returns (loss, d loss / d logit).
fn focal_term(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = 1.0 / (1.0 + (-x).exp());
    if positive {
        let log_p = -softplus(-x);
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * log_p;
        let grad = alpha * gamma * q.powf(gamma) * p * log_p - alpha * q.powf(gamma + 1.0);
        (loss, grad)
    } else {
        let a = 1.0 - alpha;
        let log_q = -softplus(x);
        let loss = -a * p.powf(gamma) * log_q;
        let grad = a * p.powf(gamma + 1.0) - a * gamma * p.powf(gamma) * (1.0 - p) * log_q;
        (loss, grad)
    }
}

/// Smooth-L1 for one residual. Returns (loss, d loss / d residual).
fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// Focal + smooth-L1 loss over flattened per-anchor predictions.
///
/// `logits` is (anchors, classes), `deltas` is (anchors, 4), row order must
/// match `targets`. Both loss components are normalized by the positive
/// count (at least 1); ignored anchors contribute nothing. Also returns the
/// gradients w.r.t. `logits` and `deltas`.
pub fn compute_loss_flat<F: Real>(
    logits: &Array2<F>,
    deltas: &Array2<F>,
    targets: &[AnchorTarget],
    cfg: &HeadConfig,
) -> Result<(LossBundle, Array2<F>, Array2<F>)> {
    let n = targets.len();
    if logits.nrows() != n || deltas.nrows() != n {
        return Err(Error::Config(format!(
            "loss: {} targets but {} logit rows / {} delta rows",
            n,
            logits.nrows(),
            deltas.nrows()
        )));
    }
    if logits
        .iter()
        .chain(deltas.iter())
        .any(|&v| !Real::to_f64(v).is_finite())
    {
        return Err(Error::Numeric("non-finite prediction fed to loss".into()));
    }
    let k = logits.ncols();
    let num_pos = targets
        .iter()
        .filter(|t| matches!(t, AnchorTarget::Positive { .. }))
        .count();
    let norm = num_pos.max(1) as f64;

    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut dlogits = Array2::<F>::zeros(logits.raw_dim());
    let mut ddeltas = Array2::<F>::zeros(deltas.raw_dim());
    for (i, target) in targets.iter().enumerate() {
        match target {
            AnchorTarget::Ignore => {}
            AnchorTarget::Negative => {
                for c in 0..k {
                    let (l, g) =
                        focal_term(logits[[i, c]].to_f64(), false, cfg.focal_alpha, cfg.focal_gamma);
                    cls_sum += l;
                    dlogits[[i, c]] = F::from_f64(g / norm);
                }
            }
            AnchorTarget::Positive { class, deltas: t } => {
                for c in 0..k {
                    let (l, g) = focal_term(
                        logits[[i, c]].to_f64(),
                        c == *class,
                        cfg.focal_alpha,
                        cfg.focal_gamma,
                    );
                    cls_sum += l;
                    dlogits[[i, c]] = F::from_f64(g / norm);
                }
                for d in 0..4 {
                    let (l, g) = smooth_l1(deltas[[i, d]].to_f64() - t[d], cfg.smooth_l1_beta);
                    reg_sum += l;
                    ddeltas[[i, d]] =
                        F::from_f64(g * cfg.regression_weight / norm);
                }
            }
        }
    }
    let classification = cls_sum / norm;
    let regression = reg_sum / norm;
    let bundle = LossBundle {
        classification,
        regression,
        total: classification + cfg.regression_weight * regression,
    };
    if !bundle.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {bundle:?}")));
    }
    Ok((bundle, dlogits, ddeltas))
}

/// Shared-weight conv towers plus classification / regression predictors.
#[derive(Debug, Clone)]
pub struct HeadModel {
    pub cfg: HeadConfig,
    cls_tower: Vec<(ConvParams, GnParams)>,
    reg_tower: Vec<(ConvParams, GnParams)>,
    cls_pred: ConvParams,
    reg_pred: ConvParams,
    channels: usize,
}

/// Prediction convs are initialized with a small fixed std so that initial
/// logits sit near the classification prior bias; tower convs use fan-in
/// scaling (they feed a ReLU) to keep gradient flow healthy at low widths.
const PRED_INIT_STD: f64 = 0.01;

pub fn build_head<F: Real>(
    cfg: &HeadConfig,
    in_channels: usize,
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
) -> Result<HeadModel> {
    if in_channels == 0 {
        return Err(Error::Config("head input channels must be positive".into()));
    }
    let a = cfg.anchors_per_cell();
    let tower_std = (2.0 / (in_channels * 9) as f64).sqrt();
    // tower = (conv -> group norm -> relu) repeated; the norm keeps narrow
    // towers from collapsing into dead units during early training
    let cls_tower = (0..cfg.tower_convs)
        .map(|i| {
            let name = format!("head.cls_tower.{i}");
            let conv = conv_init_std(store, rng, &name, in_channels, in_channels, 3, tower_std, false, 1, 1);
            (conv, gn_init(store, &format!("{name}.gn"), in_channels))
        })
        .collect();
    let reg_tower = (0..cfg.tower_convs)
        .map(|i| {
            let name = format!("head.reg_tower.{i}");
            let conv = conv_init_std(store, rng, &name, in_channels, in_channels, 3, tower_std, false, 1, 1);
            (conv, gn_init(store, &format!("{name}.gn"), in_channels))
        })
        .collect();
    let cls_pred = conv_init_std(
        store,
        rng,
        "head.cls_pred",
        a * cfg.num_classes,
        in_channels,
        3,
        PRED_INIT_STD,
        true,
        1,
        1,
    );
    // bias the classifier towards "background" so early training is not
    // swamped by negatives (prior probability 0.01)
    let prior = -((1.0 - 0.01f64) / 0.01).ln();
    store
        .value_mut(cls_pred.b.unwrap())
        .fill(F::from_f64(prior));
    let reg_pred = conv_init_std(store, rng, "head.reg_pred", a * 4, in_channels, 3, PRED_INIT_STD, true, 1, 1);
    Ok(HeadModel {
        cfg: cfg.clone(),
        cls_tower,
        reg_tower,
        cls_pred,
        reg_pred,
        channels: in_channels,
    })
}

impl HeadModel {
    /// Per-level (class logits, box deltas) nodes; weights shared across
    /// levels.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        pyramid: &[NodeId],
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let mut out = Vec::with_capacity(pyramid.len());
        for &level in pyramid {
            let (c, _, _) = g.feature(level).dim();
            if c != self.channels {
                return Err(Error::Config(format!(
                    "head built for {} channels, got {c}",
                    self.channels
                )));
            }
            let mut cls = level;
            for (conv, gn) in &self.cls_tower {
                cls = conv.apply(g, cls)?;
                cls = gn.apply(g, cls)?;
                cls = g.relu(cls);
            }
            let logits = self.cls_pred.apply(g, cls)?;
            let mut reg = level;
            for (conv, gn) in &self.reg_tower {
                reg = conv.apply(g, reg)?;
                reg = gn.apply(g, reg)?;
                reg = g.relu(reg);
            }
            let deltas = self.reg_pred.apply(g, reg)?;
            out.push((logits, deltas));
        }
        Ok(out)
    }
}

/// Flatten per-level head outputs to per-anchor rows in (level, y, x, anchor)
/// order, matching [`generate_anchors`].
pub fn flatten_predictions<F: Real>(
    preds: &[(Array3<F>, Array3<F>)],
    num_classes: usize,
) -> Result<(Array2<F>, Array2<F>)> {
    let mut total = 0usize;
    for (logits, _) in preds {
        let (ck, h, w) = logits.dim();
        if ck % num_classes != 0 {
            return Err(Error::Config(format!(
                "logit channels {ck} not a multiple of {num_classes} classes"
            )));
        }
        total += (ck / num_classes) * h * w;
    }
    let mut logit_rows = Array2::<F>::zeros((total, num_classes));
    let mut delta_rows = Array2::<F>::zeros((total, 4));
    let mut row = 0usize;
    for (logits, deltas) in preds {
        let (ck, h, w) = logits.dim();
        let a = ck / num_classes;
        debug_assert_eq!(deltas.dim(), (a * 4, h, w));
        for y in 0..h {
            for x in 0..w {
                for ai in 0..a {
                    for c in 0..num_classes {
                        logit_rows[[row, c]] = logits[[ai * num_classes + c, y, x]];
                    }
                    for d in 0..4 {
                        delta_rows[[row, d]] = deltas[[ai * 4 + d, y, x]];
                    }
                    row += 1;
                }
            }
        }
    }
    Ok((logit_rows, delta_rows))
}

/// Scatter flat per-anchor gradients back into per-level (logits, deltas)
/// gradient maps shaped like the head outputs.
pub fn unflatten_gradients<F: Real>(
    preds: &[(Array3<F>, Array3<F>)],
    num_classes: usize,
    dlogits: &Array2<F>,
    ddeltas: &Array2<F>,
) -> Vec<(Array3<F>, Array3<F>)> {
    let mut out = Vec::with_capacity(preds.len());
    let mut row = 0usize;
    for (logits, deltas) in preds {
        let (ck, h, w) = logits.dim();
        let a = ck / num_classes;
        let mut gl = Array3::<F>::zeros(logits.raw_dim());
        let mut gd = Array3::<F>::zeros(deltas.raw_dim());
        for y in 0..h {
            for x in 0..w {
                for ai in 0..a {
                    for c in 0..num_classes {
                        gl[[ai * num_classes + c, y, x]] = dlogits[[row, c]];
                    }
                    for d in 0..4 {
                        gd[[ai * 4 + d, y, x]] = ddeltas[[row, d]];
                    }
                    row += 1;
                }
            }
        }
        out.push((gl, gd));
    }
    out
}

/// Decode flat predictions into pre-NMS candidates: apply deltas to the
/// anchors, clip to image bounds, keep scores >= the threshold.
pub fn decode<F: Real>(
    logit_rows: &Array2<F>,
    delta_rows: &Array2<F>,
    anchors: &[AnchorBox],
    score_threshold: f64,
    image_size: (usize, usize),
) -> DetectionSet {
    let (img_h, img_w) = image_size;
    let mut dets = DetectionSet::new();
    for (i, anchor) in anchors.iter().enumerate() {
        for c in 0..logit_rows.ncols() {
            let score = 1.0 / (1.0 + (-logit_rows[[i, c]].to_f64()).exp());
            if score >= score_threshold {
                let d = [
                    delta_rows[[i, 0]].to_f64(),
                    delta_rows[[i, 1]].to_f64(),
                    delta_rows[[i, 2]].to_f64(),
                    delta_rows[[i, 3]].to_f64(),
                ];
                if let Some(b) = decode_box(anchor, &d).clip_to(img_w as f64, img_h as f64) {
                    dets.push(b, score, c);
                }
            }
        }
    }
    dets
}
