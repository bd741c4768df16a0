#!/usr/bin/env python3
"""Generate the detection-evaluator golden fixture.

Creates a deterministic 20-image instance (ground truth + detections) and
evaluates it with a line-faithful numpy transcription of the reference COCO
evaluator (101-point interpolated AP, IoU thresholds 0.50:0.05:0.95, area
buckets, detection caps). The fixture and the resulting metrics are written
to crates/hrdnet/tests/fixtures/, where the acceptance test asserts that the
crate's evaluator agrees within 1e-6.

Run from the repository root:  python3 tools/gen_eval_golden.py
"""

import json
import os

import numpy as np

FIXTURE_DIR = os.path.join(
    os.path.dirname(__file__), "..", "crates", "hrdnet", "tests", "fixtures"
)

NUM_IMAGES = 20
NUM_CLASSES = 5

IOU_THRS = np.linspace(0.5, 0.95, 10)
REC_THRS = np.linspace(0.0, 1.0, 101)
MAX_DETS = [1, 10, 100, 500]
AREA_RNGS = {
    "all": [0.0, 1e10],
    "small": [0.0, 32.0**2],
    "medium": [32.0**2, 96.0**2],
    "large": [96.0**2, 1e10],
}


def box_iou(dt, gt):
    """IoU matrix between detection and ground-truth boxes in xywh."""
    dt = np.asarray(dt, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    ious = np.zeros((len(dt), len(gt)))
    for d in range(len(dt)):
        dx, dy, dw, dh = dt[d]
        for g in range(len(gt)):
            gx, gy, gw, gh = gt[g]
            iw = min(dx + dw, gx + gw) - max(dx, gx)
            ih = min(dy + dh, gy + gh) - max(dy, gy)
            if iw <= 0 or ih <= 0:
                continue
            inter = iw * ih
            union = dw * dh + gw * gh - inter
            ious[d, g] = inter / union
    return ious


def generate_instance(rng):
    """Random images with ground truth and plausible detections.

    Sizes span all three area buckets; detections include jittered copies of
    ground truths (some wrong-class), misses, duplicates, pure false
    positives, and deliberate score ties to exercise sort stability.
    """
    images = []
    for img_id in range(1, NUM_IMAGES + 1):
        gts = []
        dets = []
        if img_id == 3:
            # dense image: 12 detected objects of one class, so the per-image
            # detection caps (1 / 10 / 100 / 500) actually differ
            for i in range(12):
                w, h = rng.uniform(10, 28, 2)
                x, y = 40.0 * (i % 4) + 5, 40.0 * (i // 4) + 5
                gts.append([x, y, round(w, 2), round(h, 2), 1])
                dets.append(
                    [
                        round(x + rng.uniform(-2, 2), 2),
                        round(y + rng.uniform(-2, 2), 2),
                        round(w, 2),
                        round(h, 2),
                        round(float(rng.uniform(0.3, 1.0)), 2),
                        1,
                    ]
                )
            images.append({"id": img_id, "gt": gts, "dets": dets})
            continue
        if img_id == 11:
            # very dense image: 110 detected objects, so the 100- and 500-
            # detection caps differ as well
            for i in range(110):
                w, h = rng.uniform(8, 20, 2)
                x, y = 24.0 * (i % 11) + 2, 24.0 * (i // 11) + 2
                gts.append([x, y, round(w, 2), round(h, 2), 2])
                dets.append(
                    [
                        round(x + rng.uniform(-1.5, 1.5), 2),
                        round(y + rng.uniform(-1.5, 1.5), 2),
                        round(w, 2),
                        round(h, 2),
                        round(float(rng.uniform(0.3, 1.0)), 2),
                        2,
                    ]
                )
            images.append({"id": img_id, "gt": gts, "dets": dets})
            continue
        n_gt = int(rng.integers(0, 9)) if img_id != 7 else 0  # image 7: no gt
        for _ in range(n_gt):
            bucket = rng.integers(0, 3)
            if bucket == 0:
                w, h = rng.uniform(4, 30, 2)
            elif bucket == 1:
                w, h = rng.uniform(34, 94, 2)
            else:
                w, h = rng.uniform(98, 180, 2)
            x = rng.uniform(0, 500 - w)
            y = rng.uniform(0, 500 - h)
            cat = int(rng.integers(0, NUM_CLASSES - 1))  # class 4 has no gt
            gts.append([round(x, 2), round(y, 2), round(w, 2), round(h, 2), cat])
            r = rng.uniform()
            if r < 0.70:  # detected: jittered box, usually right class
                jx, jy = rng.uniform(-0.15, 0.15, 2) * [w, h]
                jw, jh = 1.0 + rng.uniform(-0.25, 0.25, 2)
                dcat = cat if rng.uniform() < 0.9 else int(rng.integers(0, NUM_CLASSES))
                dets.append(
                    [
                        round(x + jx, 2),
                        round(y + jy, 2),
                        round(w * jw, 2),
                        round(h * jh, 2),
                        round(float(rng.uniform(0.2, 1.0)), 2),
                        dcat,
                    ]
                )
                if rng.uniform() < 0.25:  # duplicate at lower score
                    dets.append(
                        [
                            round(x + jx + 2, 2),
                            round(y + jy - 1, 2),
                            round(w * jw, 2),
                            round(h * jh, 2),
                            round(float(rng.uniform(0.05, 0.6)), 2),
                            dcat,
                        ]
                    )
        for _ in range(int(rng.integers(0, 5))):  # false positives
            w, h = rng.uniform(5, 120, 2)
            x = rng.uniform(0, 500 - w)
            y = rng.uniform(0, 500 - h)
            dets.append(
                [
                    round(x, 2),
                    round(y, 2),
                    round(w, 2),
                    round(h, 2),
                    round(float(rng.uniform(0.05, 0.9)), 2),
                    int(rng.integers(0, NUM_CLASSES)),
                ]
            )
        images.append({"id": img_id, "gt": gts, "dets": dets})
    return {"num_classes": NUM_CLASSES, "images": images}


def evaluate_img(img, cat, area_rng, max_det):
    """Per-image, per-category matching (transcribed from the reference)."""
    gt = [g for g in img["gt"] if g[4] == cat]
    dt = [d for d in img["dets"] if d[5] == cat]
    if len(gt) == 0 and len(dt) == 0:
        return None
    for g in gt:
        area = g[2] * g[3]
        g_ignore = area < area_rng[0] or area > area_rng[1]
        g.append(1 if g_ignore else 0)  # temp flag slot
    gtind = np.argsort([g[5] for g in gt], kind="mergesort")
    gt = [gt[i] for i in gtind]
    dtind = np.argsort([-d[4] for d in dt], kind="mergesort")
    dt = [dt[i] for i in dtind[0:max_det]]

    ious = box_iou([d[0:4] for d in dt], [g[0:4] for g in gt])

    T = len(IOU_THRS)
    G = len(gt)
    D = len(dt)
    gtm = np.zeros((T, G))
    dtm = np.zeros((T, D))
    gt_ig = np.array([g[5] for g in gt])
    dt_ig = np.zeros((T, D))
    if len(ious):
        for tind, t in enumerate(IOU_THRS):
            for dind in range(D):
                iou = min([t, 1 - 1e-10])
                m = -1
                for gind in range(G):
                    if gtm[tind, gind] > 0:
                        continue
                    if m > -1 and gt_ig[m] == 0 and gt_ig[gind] == 1:
                        break
                    if ious[dind, gind] < iou:
                        continue
                    iou = ious[dind, gind]
                    m = gind
                if m == -1:
                    continue
                dt_ig[tind, dind] = gt_ig[m]
                dtm[tind, dind] = m + 1
                gtm[tind, m] = dind + 1
    a = np.array(
        [d[2] * d[3] < area_rng[0] or d[2] * d[3] > area_rng[1] for d in dt]
    ).reshape((1, len(dt)))
    dt_ig = np.logical_or(dt_ig, np.logical_and(dtm == 0, np.repeat(a, T, 0)))
    for g in gt:
        g.pop()  # drop temp flag
    return {
        "dtScores": [d[4] for d in dt],
        "dtMatches": dtm,
        "dtIgnore": dt_ig,
        "numGt": int(np.count_nonzero(gt_ig == 0)),
    }


def accumulate(instance, area_rng, max_det):
    """Per-category PR curves; returns (precision[T,R,K], recall[T,K])."""
    T = len(IOU_THRS)
    R = len(REC_THRS)
    K = instance["num_classes"]
    precision = -np.ones((T, R, K))
    recall = -np.ones((T, K))
    for k in range(K):
        evals = [
            evaluate_img(img, k, area_rng, max_det) for img in instance["images"]
        ]
        evals = [e for e in evals if e is not None]
        if len(evals) == 0:
            continue
        dt_scores = np.concatenate([e["dtScores"] for e in evals])
        inds = np.argsort(-dt_scores, kind="mergesort")
        dtm = np.concatenate([e["dtMatches"] for e in evals], axis=1)[:, inds]
        dt_ig = np.concatenate([e["dtIgnore"] for e in evals], axis=1)[:, inds]
        npig = sum(e["numGt"] for e in evals)
        if npig == 0:
            continue
        tps = np.logical_and(dtm, np.logical_not(dt_ig))
        fps = np.logical_and(np.logical_not(dtm), np.logical_not(dt_ig))
        tp_sum = np.cumsum(tps, axis=1).astype(dtype=np.float64)
        fp_sum = np.cumsum(fps, axis=1).astype(dtype=np.float64)
        for t, (tp, fp) in enumerate(zip(tp_sum, fp_sum)):
            nd = len(tp)
            rc = tp / npig
            pr = tp / (fp + tp + np.spacing(1))
            q = np.zeros((R,))
            recall[t, k] = rc[-1] if nd else 0
            pr = pr.tolist()
            q = q.tolist()
            for i in range(nd - 1, 0, -1):
                if pr[i] > pr[i - 1]:
                    pr[i - 1] = pr[i]
            inds2 = np.searchsorted(rc, REC_THRS, side="left")
            try:
                for ri, pi in enumerate(inds2):
                    q[ri] = pr[pi]
            except IndexError:
                pass
            precision[t, :, k] = np.array(q)
    return precision, recall


def summarize(instance):
    out = {}

    def mean_valid(s):
        s = s[s > -1]
        return float(np.mean(s)) if len(s) else None

    prec_all, rec_all = accumulate(instance, AREA_RNGS["all"], 100)
    out["ap"] = mean_valid(prec_all)
    out["ap50"] = mean_valid(prec_all[0])
    out["ap75"] = mean_valid(prec_all[5])
    for name in ("small", "medium", "large"):
        prec, _ = accumulate(instance, AREA_RNGS[name], 100)
        out[f"ap_{name}"] = mean_valid(prec)
    for md in MAX_DETS:
        _, rec = accumulate(instance, AREA_RNGS["all"], md)
        out[f"ar{md}"] = mean_valid(rec)
    return out


def main():
    rng = np.random.default_rng(7)
    instance = generate_instance(rng)
    golden = summarize(instance)
    os.makedirs(FIXTURE_DIR, exist_ok=True)
    with open(os.path.join(FIXTURE_DIR, "eval_fixture.json"), "w") as f:
        json.dump(instance, f, indent=1)
    with open(os.path.join(FIXTURE_DIR, "eval_golden.json"), "w") as f:
        json.dump(golden, f, indent=1)
    for k, v in golden.items():
        print(f"{k}: {v}")


if __name__ == "__main__":
    main()
