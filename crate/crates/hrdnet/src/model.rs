//! Whole-detector assembly: image pyramid, parallel backbone streams,
//! fusion and the detection head behind one parameter store.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::HrdnetConfig;
use crate::error::{Error, Result};
use crate::geometry::{build_pyramid, pad_to_alignment, resize_bilinear, AnnotatedImage};
use crate::head::{
    assign_targets, build_head, compute_loss_flat, decode, flatten_predictions, generate_anchors,
    unflatten_gradients, HeadModel, LossBundle,
};
use crate::msfpn::{build_fusion, FusionModel};
use crate::nn::{GradStore, Graph, NodeId, ParamStore, Real};
use crate::postprocess::{multi_scale_merge, nms, DetectionSet};
use crate::streams::{build_stream, StreamModel};

/// The full detector. All trainable tensors live in `params`; the model
/// structs only hold parameter handles, so cloning is cheap.
#[derive(Debug, Clone)]
pub struct HrdnetModel<F: Real> {
    pub cfg: HrdnetConfig,
    pub params: ParamStore<F>,
    pub streams: Vec<StreamModel>,
    pub fusion: FusionModel,
    pub head: HeadModel,
}

/// Handles into one forward tape plus the level geometry needed to anchor it.
pub struct ForwardPass {
    /// Per output level: (class logits node, box delta node), coarsest first.
    pub preds: Vec<(NodeId, NodeId)>,
    /// Per output level: (stride, height, width), coarsest first.
    pub level_shapes: Vec<(usize, usize, usize)>,
    /// Image size after alignment padding.
    pub padded_size: (usize, usize),
}

pub fn build_model<F: Real>(cfg: &HrdnetConfig) -> Result<HrdnetModel<F>> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let streams = cfg
        .stream_specs
        .iter()
        .enumerate()
        .map(|(i, spec)| build_stream(spec, cfg.input_channels, i, &mut params, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    // level 0 is the coarsest, so fusion sees stage channels deepest-first
    let raw_channels: Vec<Vec<usize>> = cfg
        .stream_specs
        .iter()
        .map(|s| s.stage_channels.iter().rev().copied().collect())
        .collect();
    let fusion = build_fusion(&cfg.fusion, &raw_channels, &mut params, &mut rng)?;
    let head = build_head(&cfg.head, cfg.fusion.common_channels, &mut params, &mut rng)?;
    Ok(HrdnetModel {
        cfg: cfg.clone(),
        params,
        streams,
        fusion,
        head,
    })
}

impl<F: Real> HrdnetModel<F> {
    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Pad, build the image pyramid, and run every stage on one tape.
    pub fn forward(&self, g: &mut Graph<'_, F>, image: &Array3<F>) -> Result<ForwardPass> {
        let (padded, _) = pad_to_alignment(
            image,
            self.cfg.n_streams,
            self.cfg.alpha,
            self.cfg.max_stride(),
        )?;
        let (_, ph, pw) = padded.dim();
        let pyramid = build_pyramid(&padded, self.cfg.n_streams, self.cfg.alpha)?;
        let raw: Vec<Vec<NodeId>> = self
            .streams
            .iter()
            .zip(&pyramid.images)
            .map(|(stream, img)| {
                let input = g.input(img.clone());
                stream.forward(g, input)
            })
            .collect::<Result<_>>()?;
        let fused = self.fusion.fuse(g, &raw)?;
        let output = self.fusion.project(g, &fused[0])?;
        let total = output.len();
        let level_shapes = output
            .iter()
            .enumerate()
            .map(|(p, &n)| {
                let (_, h, w) = g.feature(n).dim();
                (4usize << (total - 1 - p), h, w)
            })
            .collect();
        let preds = self.head.forward(g, &output)?;
        Ok(ForwardPass {
            preds,
            level_shapes,
            padded_size: (ph, pw),
        })
    }

    /// Loss and parameter gradients for one annotated image.
    pub fn loss_on_sample(&self, sample: &AnnotatedImage<F>) -> Result<(LossBundle, GradStore<F>)> {
        let mut g = Graph::new(&self.params);
        let pass = self.forward(&mut g, &sample.image)?;
        let pred_values: Vec<(Array3<F>, Array3<F>)> = pass
            .preds
            .iter()
            .map(|&(l, d)| (g.feature(l).to_owned(), g.feature(d).to_owned()))
            .collect();
        let (logit_rows, delta_rows) =
            flatten_predictions(&pred_values, self.cfg.head.num_classes)?;
        let anchors = generate_anchors(
            &pass.level_shapes,
            &self.cfg.head.anchor_scales,
            &self.cfg.head.anchor_ratios,
        )?
        .flattened();
        let targets = assign_targets(
            &anchors,
            &sample.boxes,
            &sample.labels,
            self.cfg.head.positive_iou,
            self.cfg.head.negative_iou,
        );
        let (bundle, dlogits, ddeltas) =
            compute_loss_flat(&logit_rows, &delta_rows, &targets, &self.cfg.head)?;
        let level_grads =
            unflatten_gradients(&pred_values, self.cfg.head.num_classes, &dlogits, &ddeltas);
        let seeds = pass
            .preds
            .iter()
            .zip(level_grads)
            .flat_map(|(&(l, d), (gl, gd))| [(l, gl.into_dyn()), (d, gd.into_dyn())])
            .collect();
        let mut grads = GradStore::zeros_like(&self.params);
        g.backward(seeds, &mut grads);
        Ok((bundle, grads))
    }

    /// Pre-NMS candidates for one image (scores already thresholded).
    pub fn predict_raw(&self, image: &Array3<F>) -> Result<DetectionSet> {
        let (_, h, w) = image.dim();
        let mut g = Graph::new(&self.params);
        let pass = self.forward(&mut g, image)?;
        let pred_values: Vec<(Array3<F>, Array3<F>)> = pass
            .preds
            .iter()
            .map(|&(l, d)| (g.feature(l).to_owned(), g.feature(d).to_owned()))
            .collect();
        let (logit_rows, delta_rows) =
            flatten_predictions(&pred_values, self.cfg.head.num_classes)?;
        let anchors = generate_anchors(
            &pass.level_shapes,
            &self.cfg.head.anchor_scales,
            &self.cfg.head.anchor_ratios,
        )?
        .flattened();
        // clip to the unpadded image so boxes never land in the zero fill
        Ok(decode(
            &logit_rows,
            &delta_rows,
            &anchors,
            self.cfg.head.score_threshold,
            (h, w),
        ))
    }

    /// Single-scale inference: decode then per-class NMS.
    pub fn predict(&self, image: &Array3<F>) -> Result<DetectionSet> {
        Ok(nms(&self.predict_raw(image)?, self.cfg.nms_iou))
    }

    /// Multi-scale inference over `cfg.multi_scale_factors`: run the model
    /// on resized copies, map boxes back and merge with one joint NMS.
    pub fn predict_multi_scale(&self, image: &Array3<F>) -> Result<DetectionSet> {
        let (_, h, w) = image.dim();
        let mut per_scale = Vec::with_capacity(self.cfg.multi_scale_factors.len());
        for &f in &self.cfg.multi_scale_factors {
            if f <= 0.0 {
                return Err(Error::Config(format!("non-positive test scale {f}")));
            }
            let sh = ((h as f64) * f).round().max(1.0) as usize;
            let sw = ((w as f64) * f).round().max(1.0) as usize;
            let scaled = resize_bilinear(image, sh, sw);
            per_scale.push(self.predict_raw(&scaled)?);
        }
        multi_scale_merge(&per_scale, &self.cfg.multi_scale_factors, self.cfg.nms_iou)
    }
}
