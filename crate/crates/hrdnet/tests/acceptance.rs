//! Acceptance suite: one test per release criterion. Each test prints a
//! single `ACCEPTANCE <n> <name>: PASS` line when it succeeds (run with
//! `--nocapture` to see the lines for passing tests).

use hrdnet::config::{
    FusionConfig, FusionStrategy, HeadConfig, HrdnetConfig, Schedule, StreamSpec,
};
use hrdnet::data::{generate_dataset, SceneSpec};
use hrdnet::evaluation::{evaluate, EvalInput};
use hrdnet::geometry::{
    build_pyramid, crop_quadrants, pad_to_alignment, resize_bilinear, AnnotatedImage, BBox,
    MIN_RETAINED_AREA,
};
use hrdnet::head::{assign_targets, compute_loss_flat, flatten_predictions, generate_anchors};
use hrdnet::model::{build_model, HrdnetModel};
use hrdnet::msfpn::build_fusion;
use hrdnet::nn::{Graph, NodeId, ParamStore, Real};
use hrdnet::postprocess::{ensemble_merge, iou, multi_scale_merge, nms, DetectionSet};
use hrdnet::training::{evaluate_model, lr_at, train_step, SgdState};
use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- helpers

fn stream_spec(blocks: &[usize], channels: &[usize], stem: usize) -> StreamSpec {
    StreamSpec {
        blocks_per_stage: blocks.to_vec(),
        stage_channels: channels.to_vec(),
        stem_channels: stem,
    }
}

fn head_config(num_classes: usize, scales: &[f64], ratios: &[f64], towers: usize) -> HeadConfig {
    HeadConfig {
        num_classes,
        tower_convs: towers,
        anchor_scales: scales.to_vec(),
        anchor_ratios: ratios.to_vec(),
        positive_iou: 0.5,
        negative_iou: 0.4,
        focal_gamma: 2.0,
        focal_alpha: 0.25,
        smooth_l1_beta: 0.11,
        regression_weight: 1.0,
        score_threshold: 0.05,
    }
}

/// A small 4-level detector configuration with `n` streams of increasing
/// depth at the given resolution.
fn small_config(n: usize, resolution: (usize, usize), strategy: FusionStrategy) -> HrdnetConfig {
    let specs = (0..n)
        .map(|i| stream_spec(&[i + 1, i + 1, i + 1, i + 1], &[8, 16, 32, 64], 8))
        .collect();
    HrdnetConfig {
        n_streams: n,
        alpha: 0.5,
        levels: 4,
        stream_specs: specs,
        fusion: FusionConfig {
            strategy,
            common_channels: 16,
            extra_levels: 0,
        },
        head: head_config(3, &[1.0], &[1.0], 1),
        schedule: Schedule::default(),
        dataset: Default::default(),
        resolution,
        seed: 0,
        train_on_patches: false,
        batch_size: 2,
        input_channels: 3,
        nms_iou: 0.5,
        multi_scale_factors: vec![1.0],
    }
}

fn random_image<F: Real>(c: usize, h: usize, w: usize, seed: u64) -> Array3<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((c, h, w), |_| F::from_f64(rng.gen::<f64>()))
}

/// Plain dense convolution used as the textbook reference (square kernel,
/// zero padding, written independently of the library's im2col path).
fn ref_conv2d(x: &Array3<f64>, w: &Array4<f64>, stride: usize, pad: usize) -> Array3<f64> {
    let (c_in, h, wi) = x.dim();
    let (c_out, c_in_w, kh, kw) = w.dim();
    assert_eq!(c_in, c_in_w);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wi + 2 * pad - kw) / stride + 1;
    let mut out = Array3::zeros((c_out, oh, ow));
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wi {
                                continue;
                            }
                            acc += x[[ci, iy as usize, ix as usize]] * w[[co, ci, ky, kx]];
                        }
                    }
                }
                out[[co, oy, ox]] = acc;
            }
        }
    }
    out
}

fn ref_upsample2x(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, i, j)| x[[ci, i / 2, j / 2]])
}

fn param_by_name<F: Real>(store: &ParamStore<F>, name: &str) -> Array4<f64> {
    for (n, v) in store.iter() {
        if n == name {
            return v
                .mapv(|x| Real::to_f64(x))
                .into_dimensionality()
                .expect("4-D conv weight");
        }
    }
    panic!("parameter {name} not found");
}

// ---------------------------------------------------- criterion 1: shapes

#[test]
fn criterion_1_shape_suite() {
    let bases = [(128usize, 128usize), (256, 256), (384, 256)];
    for n in 1..=3usize {
        let channels = [8usize, 16, 32, 64];
        for &(bh, bw) in &bases {
            let cfg = small_config(n, (bh, bw), FusionStrategy::AlignedByDepth);
            let model = build_model::<f32>(&cfg).unwrap();
            let img = random_image::<f32>(3, bh, bw, 1);
            let (padded, pads) = pad_to_alignment(&img, n, 0.5, cfg.max_stride()).unwrap();
            assert_eq!(pads, (0, 0), "base sizes are already aligned");
            let pyramid = build_pyramid(&padded, n, 0.5).unwrap();
            let mut g = Graph::new(&model.params);
            let mut raw = Vec::new();
            for (i, (stream, member)) in model.streams.iter().zip(&pyramid.images).enumerate() {
                let input = g.input(member.clone());
                let levels = stream.forward(&mut g, input).unwrap();
                assert_eq!(levels.len(), 4);
                for (j, &node) in levels.iter().enumerate() {
                    // stream i sees the base halved i times; level j (0 =
                    // coarsest) has stride 4 * 2^(3-j) = 32 >> j
                    let expect = (channels[3 - j], bh >> (i + 5 - j), bw >> (i + 5 - j));
                    assert_eq!(g.feature(node).dim(), expect, "raw({i},{j}) at {bh}x{bw}");
                }
                raw.push(levels);
            }
            let fused = model.fusion.fuse(&mut g, &raw).unwrap();
            for (i, row) in fused.iter().enumerate() {
                for (j, &node) in row.iter().enumerate() {
                    let expect = (16, bh >> (i + 5 - j), bw >> (i + 5 - j));
                    assert_eq!(g.feature(node).dim(), expect, "fused({i},{j}) at {bh}x{bw}");
                }
            }
            let out = model.fusion.project(&mut g, &fused[0]).unwrap();
            assert_eq!(out.len(), 4);
            for (p, &node) in out.iter().enumerate() {
                let expect = (16, bh >> (5 - p), bw >> (5 - p));
                assert_eq!(g.feature(node).dim(), expect, "output {p} at {bh}x{bw}");
            }
        }
    }
    println!("ACCEPTANCE 1 shape suite: PASS");
}

// -------------------------------- criterion 2: single-stream equivalence

#[test]
fn criterion_2_single_stream_fpn_equivalence() {
    // raw levels coarsest-first: channels 64,32,16,8 at 4,8,16,32 pixels
    let raw_channels = vec![vec![64usize, 32, 16, 8]];
    let common = 16usize;
    let raw: Vec<Array3<f64>> = (0..4)
        .map(|j| random_image::<f64>(raw_channels[0][j], 4 << j, 4 << j, 10 + j as u64))
        .collect();

    let mut reference: Option<Vec<Array3<f64>>> = None;
    for strategy in [
        FusionStrategy::SimpleFpn,
        FusionStrategy::AlignedByResolution,
        FusionStrategy::AlignedByDepth,
    ] {
        let cfg = FusionConfig {
            strategy,
            common_channels: common,
            extra_levels: 0,
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fusion = build_fusion(&cfg, &raw_channels, &mut store, &mut rng).unwrap();

        let mut g = Graph::new(&store);
        let nodes: Vec<NodeId> = raw.iter().map(|r| g.input(r.clone())).collect();
        let fused = fusion.fuse(&mut g, &[nodes]).unwrap();
        let out = fusion.project(&mut g, &fused[0]).unwrap();
        let got: Vec<Array3<f64>> = out
            .iter()
            .map(|&n| g.feature(n).to_owned().into_dimensionality().unwrap())
            .collect();

        // textbook FPN with the same weights: 1x1 laterals, nearest 2x
        // top-down additions, 3x3 output convs
        let mut td: Vec<Array3<f64>> = Vec::new();
        for j in 0..4 {
            let w = param_by_name(&store, &format!("fusion.lateral.0.{j}.w"));
            let mut t = ref_conv2d(&raw[j], &w, 1, 0);
            if j > 0 {
                t += &ref_upsample2x(&td[j - 1]);
            }
            td.push(t);
        }
        let expect: Vec<Array3<f64>> = (0..4)
            .map(|j| {
                let w = param_by_name(&store, &format!("fusion.output.{j}.w"));
                ref_conv2d(&td[j], &w, 1, 1)
            })
            .collect();

        for (j, (a, b)) in got.iter().zip(&expect).enumerate() {
            let max_diff = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(
                max_diff < 1e-6,
                "{} level {j}: max |model - reference| = {max_diff:e}",
                strategy.name()
            );
        }
        // at one stream, all three strategies must also agree exactly
        match &reference {
            None => reference = Some(got),
            Some(prev) => {
                for (a, b) in got.iter().zip(prev) {
                    let max_diff = a
                        .iter()
                        .zip(b.iter())
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0f64, f64::max);
                    assert!(max_diff < 1e-6, "strategies disagree at N=1");
                }
            }
        }
    }
    println!("ACCEPTANCE 2 single-stream FPN equivalence: PASS");
}

// ------------------------------- criterion 3: dependency closure oracle

#[test]
fn criterion_3_dependency_closure() {
    let n = 3usize;
    let m = 4usize;
    let raw_channels: Vec<Vec<usize>> = vec![vec![12, 10, 8, 6]; n];
    let cfg = FusionConfig {
        strategy: FusionStrategy::AlignedByDepth,
        common_channels: 8,
        extra_levels: 0,
    };
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fusion = build_fusion(&cfg, &raw_channels, &mut store, &mut rng).unwrap();

    // raw(i,j) is (4 * 2^(j-i)) pixels square, so both recurrence sources
    // (coarser same-stream level, deeper stream same level) align after 2x
    let base_raw: Vec<Vec<Array3<f64>>> = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let side = 4usize << j >> i;
                    random_image::<f64>(raw_channels[i][j], side.max(1), side.max(1), (i * 7 + j) as u64)
                })
                .collect()
        })
        .collect();

    let run = |raw_maps: &[Vec<Array3<f64>>]| -> Vec<Array3<f64>> {
        let mut g = Graph::new(&store);
        let nodes: Vec<Vec<NodeId>> = raw_maps
            .iter()
            .map(|row| row.iter().map(|r| g.input(r.clone())).collect())
            .collect();
        let fused = fusion.fuse(&mut g, &nodes).unwrap();
        let out = fusion.project(&mut g, &fused[0]).unwrap();
        out.iter()
            .map(|&id| g.feature(id).to_owned().into_dimensionality().unwrap())
            .collect()
    };
    let baseline = run(&base_raw);

    // brute-force reachability oracle over the recurrence edges:
    //   fused(i,j) <- raw(i,j), fused(i,j-1), fused(i+1,j); F'_k <- fused(0,k)
    let reaches = |src_i: usize, src_j: usize, k: usize| -> bool {
        let mut reach = vec![vec![false; m]; n];
        reach[src_i][src_j] = true; // raw(i,j) feeds fused(i,j)
        // evaluate in dependency order: deepest stream first, coarse to fine
        for i in (0..n).rev() {
            for j in 0..m {
                let mut r = reach[i][j];
                if j > 0 {
                    r = r || reach[i][j - 1];
                }
                if i + 1 < n {
                    r = r || reach[i + 1][j];
                }
                reach[i][j] = r;
            }
        }
        reach[0][k]
    };

    for i in 0..n {
        for j in 0..m {
            let mut perturbed = base_raw.clone();
            let mut prng = ChaCha8Rng::seed_from_u64(100 + (i * m + j) as u64);
            perturbed[i][j].mapv_inplace(|v| v + 0.1 + prng.gen::<f64>());
            let outputs = run(&perturbed);
            for k in 0..m {
                let changed = outputs[k]
                    .iter()
                    .zip(baseline[k].iter())
                    .any(|(a, b)| (a - b).abs() > 1e-12);
                let oracle = reaches(i, j, k);
                let formula = j <= k;
                assert_eq!(oracle, formula, "oracle vs closed form at ({i},{j})->{k}");
                assert_eq!(
                    changed, oracle,
                    "perturbation of raw({i},{j}) vs oracle at output {k}"
                );
            }
        }
    }
    println!("ACCEPTANCE 3 dependency closure: PASS");
}

// ------------------------------------- criterion 4: end-to-end gradients

/// Forward + loss only (no tape backward), used for finite differences.
fn loss_value(model: &HrdnetModel<f64>, sample: &AnnotatedImage<f64>) -> f64 {
    let mut g = Graph::new(&model.params);
    let pass = model.forward(&mut g, &sample.image).unwrap();
    let preds: Vec<(Array3<f64>, Array3<f64>)> = pass
        .preds
        .iter()
        .map(|&(l, d)| (g.feature(l).to_owned(), g.feature(d).to_owned()))
        .collect();
    let (logits, deltas) = flatten_predictions(&preds, model.cfg.head.num_classes).unwrap();
    let anchors = generate_anchors(
        &pass.level_shapes,
        &model.cfg.head.anchor_scales,
        &model.cfg.head.anchor_ratios,
    )
    .unwrap()
    .flattened();
    let targets = assign_targets(
        &anchors,
        &sample.boxes,
        &sample.labels,
        model.cfg.head.positive_iou,
        model.cfg.head.negative_iou,
    );
    let (bundle, _, _) = compute_loss_flat(&logits, &deltas, &targets, &model.cfg.head).unwrap();
    bundle.total
}

#[test]
fn criterion_4_gradient_check() {
    // tiny model: N=2, M=2, 8 channels, 32x32 input, 3 anchors per cell
    let cfg = HrdnetConfig {
        n_streams: 2,
        alpha: 0.5,
        levels: 2,
        stream_specs: vec![
            stream_spec(&[1, 1], &[8, 8], 8),
            stream_spec(&[2, 2], &[8, 8], 8),
        ],
        fusion: FusionConfig {
            strategy: FusionStrategy::AlignedByDepth,
            common_channels: 8,
            extra_levels: 0,
        },
        head: head_config(2, &[1.0, 1.26, 1.59], &[1.0], 1),
        schedule: Schedule::default(),
        dataset: Default::default(),
        resolution: (32, 32),
        seed: 0,
        train_on_patches: false,
        batch_size: 1,
        input_channels: 3,
        nms_iou: 0.5,
        multi_scale_factors: vec![1.0],
    };
    let mut model = build_model::<f64>(&cfg).unwrap();
    let sample = AnnotatedImage {
        image: random_image::<f64>(3, 32, 32, 2),
        boxes: vec![BBox::new(6.0, 8.0, 14.0, 12.0), BBox::new(20.0, 18.0, 9.0, 11.0)],
        labels: vec![0, 1],
    };
    let (_, grads) = model.loss_on_sample(&sample).unwrap();
    let analytic: Vec<(hrdnet::nn::ParamId, ndarray::ArrayD<f64>)> = model
        .params
        .ids()
        .map(|id| (id, grads.get(id).clone()))
        .collect();

    let step = 1e-5;
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    for (id, grad) in &analytic {
        let len = model.params.value(*id).len();
        for idx in 0..len {
            let orig = model.params.value(*id).as_slice().unwrap()[idx];
            model.params.value_mut(*id).as_slice_mut().unwrap()[idx] = orig + step;
            let plus = loss_value(&model, &sample);
            model.params.value_mut(*id).as_slice_mut().unwrap()[idx] = orig - step;
            let minus = loss_value(&model, &sample);
            model.params.value_mut(*id).as_slice_mut().unwrap()[idx] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let an = grad.as_slice().unwrap()[idx];
            // relative error with a unit floor so near-zero gradients are
            // compared absolutely
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            assert!(
                rel < 1e-4,
                "param {} [{idx}]: analytic {an:e} vs fd {fd:e} (rel {rel:e})",
                model.params.name(*id)
            );
            checked += 1;
        }
    }
    println!("ACCEPTANCE 4 gradient check: PASS ({checked} parameters, max rel err {max_rel:.2e})");
}

// --------------------------------- criterion 5: postprocessing oracles

/// Independent O(n^2) greedy NMS: walk candidates by (score desc, index
/// asc), keep a box iff no already-kept same-class box overlaps it above
/// the threshold.
fn oracle_nms(dets: &DetectionSet, thr: f64) -> DetectionSet {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets.scores[b]
            .partial_cmp(&dets.scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let ok = kept.iter().all(|&k| {
            dets.labels[k] != dets.labels[i] || iou(&dets.boxes[k], &dets.boxes[i]) <= thr
        });
        if ok {
            kept.push(i);
        }
    }
    let mut out = DetectionSet::new();
    for &i in &kept {
        out.push(dets.boxes[i], dets.scores[i], dets.labels[i]);
    }
    out
}

fn assert_same_dets(a: &DetectionSet, b: &DetectionSet, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: cardinality");
    for i in 0..a.len() {
        assert_eq!(a.boxes[i], b.boxes[i], "{what}: box {i}");
        assert_eq!(a.scores[i], b.scores[i], "{what}: score {i}");
        assert_eq!(a.labels[i], b.labels[i], "{what}: label {i}");
    }
}

fn random_dets(rng: &mut ChaCha8Rng, max_boxes: usize) -> DetectionSet {
    let n = rng.gen_range(0..=max_boxes);
    let mut d = DetectionSet::new();
    for _ in 0..n {
        let w = rng.gen_range(1.0..30.0);
        let h = rng.gen_range(1.0..30.0);
        let x = rng.gen_range(0.0..60.0);
        let y = rng.gen_range(0.0..60.0);
        // two-decimal scores force frequent ties
        let score = (rng.gen_range(0.0..1.0f64) * 100.0).round() / 100.0;
        let label = rng.gen_range(0..3);
        d.push(BBox::new(x, y, w, h), score, label);
    }
    d
}

#[test]
fn criterion_5_postprocess_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for case in 0..200 {
        let thr = [0.3, 0.5, 0.7][case % 3];
        let dets = random_dets(&mut rng, 30);
        assert_same_dets(&nms(&dets, thr), &oracle_nms(&dets, thr), "nms");

        // ensemble: pool every model's candidates, then one joint NMS
        let sets: Vec<DetectionSet> = (0..3).map(|_| random_dets(&mut rng, 10)).collect();
        let mut pooled = DetectionSet::new();
        for s in &sets {
            pooled.extend(s);
        }
        assert_same_dets(
            &ensemble_merge(&sets, thr),
            &oracle_nms(&pooled, thr),
            "ensemble",
        );

        // multi-scale: map each set back by its factor, then one joint NMS
        let factors = [0.5, 1.0, 2.0];
        let mut mapped = DetectionSet::new();
        for (s, &f) in sets.iter().zip(&factors) {
            for i in 0..s.len() {
                let b = s.boxes[i];
                mapped.push(
                    BBox::new(b.x / f, b.y / f, b.w / f, b.h / f),
                    s.scores[i],
                    s.labels[i],
                );
            }
        }
        assert_same_dets(
            &multi_scale_merge(&sets, &factors, thr).unwrap(),
            &oracle_nms(&mapped, thr),
            "multi-scale",
        );
    }
    println!("ACCEPTANCE 5 postprocess oracles: PASS");
}

// ------------------------------------- criterion 6: evaluator goldens

#[test]
fn criterion_6_evaluator_golden() {
    let fixture: serde_json::Value = serde_json::from_str(include_str!("fixtures/eval_fixture.json")).unwrap();
    let golden: serde_json::Value = serde_json::from_str(include_str!("fixtures/eval_golden.json")).unwrap();
    let num_classes = fixture["num_classes"].as_u64().unwrap() as usize;
    let images: Vec<EvalInput> = fixture["images"]
        .as_array()
        .unwrap()
        .iter()
        .map(|img| {
            let mut gt_boxes = Vec::new();
            let mut gt_labels = Vec::new();
            for g in img["gt"].as_array().unwrap() {
                let g = g.as_array().unwrap();
                gt_boxes.push(BBox::new(
                    g[0].as_f64().unwrap(),
                    g[1].as_f64().unwrap(),
                    g[2].as_f64().unwrap(),
                    g[3].as_f64().unwrap(),
                ));
                gt_labels.push(g[4].as_u64().unwrap() as usize);
            }
            let mut dets = DetectionSet::new();
            for d in img["dets"].as_array().unwrap() {
                let d = d.as_array().unwrap();
                dets.push(
                    BBox::new(
                        d[0].as_f64().unwrap(),
                        d[1].as_f64().unwrap(),
                        d[2].as_f64().unwrap(),
                        d[3].as_f64().unwrap(),
                    ),
                    d[4].as_f64().unwrap(),
                    d[5].as_u64().unwrap() as usize,
                );
            }
            EvalInput {
                id: img["id"].as_u64().unwrap(),
                dets,
                gt_boxes,
                gt_labels,
            }
        })
        .collect();

    let report = evaluate(&images, num_classes);
    let got = [
        ("ap", report.ap),
        ("ap50", report.ap50),
        ("ap75", report.ap75),
        ("ap_small", report.ap_small),
        ("ap_medium", report.ap_medium),
        ("ap_large", report.ap_large),
        ("ar1", report.ar1),
        ("ar10", report.ar10),
        ("ar100", report.ar100),
        ("ar500", report.ar500),
    ];
    for (key, value) in got {
        let expect = golden[key].as_f64().unwrap();
        let value = value.unwrap_or(f64::NAN);
        assert!(
            (value - expect).abs() < 1e-6,
            "{key}: got {value}, golden {expect}"
        );
    }
    println!("ACCEPTANCE 6 evaluator golden: PASS");
}

// --------------------------------------- criterion 7: schedule exactness

#[test]
fn criterion_7_schedule_exactness() {
    let s = Schedule::default(); // base 0.02, warmup 500 @ ratio 1/3, decay 0.1 at epochs 7 and 11
    let tol = 1e-15; // a few ULP; the protocol values are exact up to float rounding
    assert!((lr_at(0, 0, &s) - 0.02 / 3.0).abs() < tol, "warmup start");
    assert_eq!(lr_at(500, 0, &s), 0.02, "post-warmup");
    assert_eq!(lr_at(10_000, 3, &s), 0.02, "mid-schedule");
    assert!((lr_at(100_000, 11, &s) - 2e-4).abs() < tol, "after both decays");
    println!("ACCEPTANCE 7 schedule exactness: PASS");
}

// ------------------------------------ criterion 8: parameter counting

/// Analytic parameter count, written against the declared architecture:
/// stem of two (conv3x3 no-bias + GN), per stage one transition (conv3x3 +
/// GN) and B pre-activation blocks (GN+conv3x3, twice); 1x1 bias-free
/// laterals, strategy-dependent 1x1 crosses, 3x3 outputs and extras; head
/// towers of (conv3x3 no-bias + GN) and biased 3x3 predictors.
fn analytic_param_count(cfg: &HrdnetConfig) -> usize {
    let gn = |c: usize| 2 * c;
    let conv = |co: usize, ci: usize, k: usize| co * ci * k * k;
    let mut total = 0;
    for spec in &cfg.stream_specs {
        let c0 = spec.stem_channels;
        total += conv(c0, cfg.input_channels, 3) + gn(c0) + conv(c0, c0, 3) + gn(c0);
        let mut prev = c0;
        for (&b, &c) in spec.blocks_per_stage.iter().zip(&spec.stage_channels) {
            total += conv(c, prev, 3) + gn(c);
            total += b * (gn(c) + conv(c, c, 3) + gn(c) + conv(c, c, 3));
            prev = c;
        }
    }
    let n = cfg.n_streams;
    let m = cfg.levels;
    let cc = cfg.fusion.common_channels;
    for spec in &cfg.stream_specs {
        for &c in &spec.stage_channels {
            total += conv(cc, c, 1); // one lateral per (stream, level)
        }
    }
    total += match cfg.fusion.strategy {
        FusionStrategy::AlignedByDepth => 0,
        FusionStrategy::AlignedByResolution => (n - 1) * (m - 1) * conv(cc, cc, 1),
        FusionStrategy::SimpleFpn => (n - 1) * m * conv(cc, cc, 1),
    };
    total += m * conv(cc, cc, 3); // output projections
    total += cfg.fusion.extra_levels * conv(cc, cc, 3);
    let a = cfg.head.anchors_per_cell();
    let k = cfg.head.num_classes;
    total += 2 * cfg.head.tower_convs * (conv(cc, cc, 3) + gn(cc)); // cls + reg towers
    total += conv(a * k, cc, 3) + a * k; // class predictor + bias
    total += conv(a * 4, cc, 3) + a * 4; // box predictor + bias
    total
}

#[test]
fn criterion_8_parameter_count() {
    let mut c1 = small_config(2, (128, 128), FusionStrategy::AlignedByDepth);
    c1.head = head_config(3, &[1.0, 1.3], &[0.5, 1.0, 2.0], 2);

    let mut c2 = small_config(3, (256, 256), FusionStrategy::AlignedByResolution);
    c2.fusion.extra_levels = 1;

    let mut c3 = small_config(1, (128, 128), FusionStrategy::SimpleFpn);
    c3.stream_specs = vec![stream_spec(&[2, 3, 4, 2], &[16, 24, 40, 56], 12)];
    c3.fusion.common_channels = 24;

    for (name, cfg) in [("two-stream", c1), ("three-stream", c2), ("one-stream", c3)] {
        let model = build_model::<f32>(&cfg).unwrap();
        assert_eq!(
            model.count_parameters(),
            analytic_param_count(&cfg),
            "parameter count for {name} config"
        );
    }
    println!("ACCEPTANCE 8 parameter count: PASS");
}

// ------------------------------------ criterion 10: quadrant cropping

#[test]
fn criterion_10_quadrant_crops() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let h = rng.gen_range(2..40);
        let w = rng.gen_range(2..40);
        let image = random_image::<f32>(3, h, w, 1000 + case);
        let mut boxes = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..rng.gen_range(0..6) {
            let bw = rng.gen_range(0.5..w as f64);
            let bh = rng.gen_range(0.5..h as f64);
            let x = rng.gen_range(0.0..(w as f64 - bw));
            let y = rng.gen_range(0.0..(h as f64 - bh));
            boxes.push(BBox::new(x, y, bw, bh));
            labels.push(rng.gen_range(0..4usize));
        }
        let sample = AnnotatedImage { image: image.clone(), boxes: boxes.clone(), labels: labels.clone() };
        let patches = crop_quadrants(&sample).unwrap();
        assert_eq!(patches.len(), 4);

        // rectangle-arithmetic oracle for the tiling
        let h0 = h.div_ceil(2);
        let w0 = w.div_ceil(2);
        let rects = [
            (0usize, 0usize, h0, w0),
            (0, w0, h0, w - w0),
            (h0, 0, h - h0, w0),
            (h0, w0, h - h0, w - w0),
        ];
        assert_eq!(rects.iter().map(|r| r.2 * r.3).sum::<usize>(), h * w, "tiling");
        for (patch, &(py, px, ph, pw)) in patches.iter().zip(&rects) {
            let (_, gh, gw) = patch.image.dim();
            assert_eq!((gh, gw), (ph, pw), "patch size");
            // pixels must be exact slices of the original
            for c in 0..3 {
                for y in 0..ph {
                    for x in 0..pw {
                        assert_eq!(patch.image[[c, y, x]], image[[c, py + y, px + x]]);
                    }
                }
            }
            // box remap oracle: clip to the patch rectangle, shift, apply
            // the 25% retained-area rule
            let mut expect_boxes = Vec::new();
            let mut expect_labels = Vec::new();
            for (b, &l) in boxes.iter().zip(&labels) {
                let ix = b.x.max(px as f64);
                let iy = b.y.max(py as f64);
                let ix2 = b.x2().min((px + pw) as f64);
                let iy2 = b.y2().min((py + ph) as f64);
                if ix2 > ix && iy2 > iy {
                    let area = (ix2 - ix) * (iy2 - iy);
                    if area >= MIN_RETAINED_AREA * b.area() {
                        expect_boxes.push(BBox::new(ix - px as f64, iy - py as f64, ix2 - ix, iy2 - iy));
                        expect_labels.push(l);
                    }
                }
            }
            assert_eq!(patch.labels, expect_labels, "patch labels");
            assert_eq!(patch.boxes.len(), expect_boxes.len());
            for (a, b) in patch.boxes.iter().zip(&expect_boxes) {
                assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
                assert!((a.w - b.w).abs() < 1e-12 && (a.h - b.h).abs() < 1e-12);
            }
            // every kept box lies inside its patch
            for b in &patch.boxes {
                assert!(b.x >= 0.0 && b.y >= 0.0 && b.x2() <= pw as f64 + 1e-9 && b.y2() <= ph as f64 + 1e-9);
            }
        }
    }
    println!("ACCEPTANCE 10 quadrant crops: PASS");
}

// ------------------------------------------ criterion 9: desk-scale trend

/// Deterministic mini training loop (shuffled batches, SGD with the
/// configured schedule), without per-epoch validation.
fn train_for(cfg: &HrdnetConfig, pool: &[AnnotatedImage<f32>], epochs: usize) -> HrdnetModel<f32> {
    let mut model = build_model::<f32>(cfg).unwrap();
    let mut state = SgdState::new(&model.params);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<AnnotatedImage<f32>> =
                chunk.iter().map(|&i| pool[i].clone()).collect();
            train_step(&mut model, &batch, &mut state, epoch).unwrap();
        }
    }
    model
}

fn to_pool(ds: &hrdnet::data::Dataset) -> Vec<AnnotatedImage<f32>> {
    ds.samples
        .iter()
        .map(|s| AnnotatedImage {
            image: s.data.image.clone(),
            boxes: s.data.boxes.clone(),
            labels: s.data.labels.clone(),
        })
        .collect()
}

/// The same pool downscaled to half resolution (boxes follow).
fn half_res_pool(pool: &[AnnotatedImage<f32>]) -> Vec<AnnotatedImage<f32>> {
    pool.iter()
        .map(|s| {
            let (_, h, w) = s.image.dim();
            AnnotatedImage {
                image: resize_bilinear(&s.image, h / 2, w / 2),
                boxes: s
                    .boxes
                    .iter()
                    .map(|b| BBox::new(b.x * 0.5, b.y * 0.5, b.w * 0.5, b.h * 0.5))
                    .collect(),
                labels: s.labels.clone(),
            }
        })
        .collect()
}

#[test]
fn criterion_9_desk_scale_trend() {
    let scene = SceneSpec {
        image_size: (256, 256),
        objects_per_image: (3, 8),
        object_size_px: (4, 24),
        num_classes: 5,
        clutter_level: 0.4,
        seed: 42,
    };
    let train = generate_dataset(&scene, 1000, "train").unwrap();
    let val = {
        let mut s = scene.clone();
        s.seed = scene.seed.wrapping_add(1 << 40);
        generate_dataset(&s, 200, "val").unwrap()
    };
    let pool_full = to_pool(&train);
    let pool_half = half_res_pool(&pool_full);
    let epochs = 6;

    let base = |strategy: FusionStrategy, seed: u64| -> HrdnetConfig {
        let mut cfg = small_config(2, (256, 256), strategy);
        cfg.stream_specs = vec![
            stream_spec(&[1, 1, 1, 1], &[8, 16, 32, 64], 8), // shallow @ 256
            stream_spec(&[2, 2, 2, 2], &[8, 16, 32, 64], 8), // deep @ 128
        ];
        cfg.head = head_config(5, &[1.0, 1.26, 1.59], &[1.0], 1);
        cfg.schedule.base_lr = 0.01;
        cfg.schedule.warmup_iters = 100;
        cfg.schedule.decay_epochs = vec![epochs - 2];
        cfg.schedule.total_epochs = epochs;
        cfg.seed = seed;
        cfg
    };
    let single = |seed: u64| -> HrdnetConfig {
        let mut cfg = base(FusionStrategy::AlignedByDepth, seed);
        cfg.n_streams = 1;
        cfg.resolution = (128, 128);
        cfg.stream_specs = vec![stream_spec(&[2, 2, 2, 2], &[8, 16, 32, 64], 8)]; // deep @ 128
        // evaluate on the 256px validation frame by running inference at
        // half scale and mapping boxes back
        cfg.multi_scale_factors = vec![0.5];
        cfg
    };

    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in [0u64, 1, 2] {
        let model_a = train_for(&base(FusionStrategy::AlignedByDepth, seed), &pool_full, epochs);
        let ap_a = evaluate_model(&model_a, &val, false)
            .unwrap()
            .ap_small
            .unwrap_or(0.0);
        let model_b = train_for(&single(seed), &pool_half, epochs);
        let ap_b = evaluate_model(&model_b, &val, true)
            .unwrap()
            .ap_small
            .unwrap_or(0.0);
        if ap_a > ap_b {
            wins += 1;
        }
        lines.push(format!(
            "  seed {seed}: AP_small two-stream {ap_a:.4} vs single deep @128 {ap_b:.4}"
        ));
    }

    // informational only: fusion strategy comparison at one seed
    let model_depth = train_for(&base(FusionStrategy::AlignedByDepth, 0), &pool_full, epochs);
    let model_res = train_for(
        &base(FusionStrategy::AlignedByResolution, 0),
        &pool_full,
        epochs,
    );
    let ap_depth = evaluate_model(&model_depth, &val, false).unwrap();
    let ap_res = evaluate_model(&model_res, &val, false).unwrap();
    lines.push(format!(
        "  informational (seed 0): aligned_by_depth AP {:.4} / AP_small {:.4}, aligned_by_resolution AP {:.4} / AP_small {:.4}",
        ap_depth.ap.unwrap_or(0.0),
        ap_depth.ap_small.unwrap_or(0.0),
        ap_res.ap.unwrap_or(0.0),
        ap_res.ap_small.unwrap_or(0.0)
    ));

    for l in &lines {
        println!("{l}");
    }
    assert!(
        wins >= 2,
        "two-stream model beat the single deep backbone on AP_small in only {wins}/3 seeds:\n{}",
        lines.join("\n")
    );
    println!("ACCEPTANCE 9 desk-scale trend: PASS ({wins}/3 seeds)");
}
