//! The multi-depth image pyramid network: N parallel residual backbones,
//! each consuming one pyramid member and emitting an M-level feature group.

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

use crate::config::StreamSpec;
use crate::error::{Error, Result};
use crate::geometry::ImagePyramid;
use crate::nn::layers::{conv_init, gn_init, ConvParams, GnParams};
use crate::nn::{Graph, NodeId, ParamStore, Real};

/// One backbone/fusion output map with its place in the (stream, level) grid.
///
/// Level 0 is the coarsest level; `stride` is relative to the stream's own
/// input image.
#[derive(Debug, Clone)]
pub struct FeatureMap<F> {
    pub data: Array3<F>,
    pub stream_index: usize,
    pub level_index: usize,
    pub stride: usize,
}

/// The M maps emitted by one stream, ordered coarsest (level 0) to finest.
#[derive(Debug, Clone)]
pub struct FeatureGroup<F> {
    pub maps: Vec<FeatureMap<F>>,
}

#[derive(Debug, Clone)]
struct BlockParams {
    gn1: GnParams,
    conv1: ConvParams,
    gn2: GnParams,
    conv2: ConvParams,
}

#[derive(Debug, Clone)]
struct StageParams {
    transition: ConvParams,
    transition_gn: GnParams,
    blocks: Vec<BlockParams>,
}

/// One residual backbone: a stride-4 stem (two stride-2 convs) followed by
/// M stages; every stage but the first halves resolution.
#[derive(Debug, Clone)]
pub struct StreamModel {
    pub spec: StreamSpec,
    pub stream_index: usize,
    stem: Vec<(ConvParams, GnParams)>,
    stages: Vec<StageParams>,
}

/// Number of levels a stream emits.
impl StreamModel {
    pub fn num_levels(&self) -> usize {
        self.stages.len()
    }

    /// Stride of the coarsest level relative to the stream input.
    pub fn coarsest_stride(&self) -> usize {
        4 << (self.stages.len() - 1)
    }
}

pub fn build_stream<F: Real>(
    spec: &StreamSpec,
    input_channels: usize,
    stream_index: usize,
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
) -> Result<StreamModel> {
    if input_channels == 0 || spec.stem_channels == 0 {
        return Err(Error::Config("stream channels must be positive".into()));
    }
    if spec.blocks_per_stage.len() != spec.stage_channels.len() || spec.stage_channels.is_empty() {
        return Err(Error::Config(
            "blocks_per_stage and stage_channels must have equal, non-zero length".into(),
        ));
    }
    if spec.stage_channels.iter().any(|&c| c == 0) {
        return Err(Error::Config("stage channels must be positive".into()));
    }
    let prefix = format!("streams.{stream_index}");
    let mut stem = Vec::new();
    let mut c_prev = input_channels;
    for s in 0..2 {
        let name = format!("{prefix}.stem.{s}");
        let conv = conv_init(store, rng, &name, spec.stem_channels, c_prev, 3, false, 2, 1);
        let gn = gn_init(store, &format!("{name}.gn"), spec.stem_channels);
        stem.push((conv, gn));
        c_prev = spec.stem_channels;
    }
    let mut stages = Vec::new();
    for (s, (&blocks, &channels)) in spec
        .blocks_per_stage
        .iter()
        .zip(&spec.stage_channels)
        .enumerate()
    {
        let name = format!("{prefix}.stages.{s}");
        let stride = if s == 0 { 1 } else { 2 };
        let transition = conv_init(
            store,
            rng,
            &format!("{name}.transition"),
            channels,
            c_prev,
            3,
            false,
            stride,
            1,
        );
        let transition_gn = gn_init(store, &format!("{name}.transition.gn"), channels);
        let mut block_params = Vec::new();
        for b in 0..blocks {
            let bname = format!("{name}.blocks.{b}");
            block_params.push(BlockParams {
                gn1: gn_init(store, &format!("{bname}.gn1"), channels),
                conv1: conv_init(store, rng, &format!("{bname}.conv1"), channels, channels, 3, false, 1, 1),
                gn2: gn_init(store, &format!("{bname}.gn2"), channels),
                conv2: conv_init(store, rng, &format!("{bname}.conv2"), channels, channels, 3, false, 1, 1),
            });
        }
        stages.push(StageParams {
            transition,
            transition_gn,
            blocks: block_params,
        });
        c_prev = channels;
    }
    Ok(StreamModel {
        spec: spec.clone(),
        stream_index,
        stem,
        stages,
    })
}

impl StreamModel {
    /// Graph-level forward; returns per-level nodes ordered coarsest first.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, input: NodeId) -> Result<Vec<NodeId>> {
        let (_, h, w) = g.feature(input).dim();
        let coarsest = self.coarsest_stride();
        if h % coarsest != 0 || w % coarsest != 0 {
            return Err(Error::Alignment(format!(
                "stream {} input {h}x{w} not divisible by coarsest stride {coarsest}",
                self.stream_index
            )));
        }
        let mut x = input;
        for (conv, gn) in &self.stem {
            x = conv.apply(g, x)?;
            x = gn.apply(g, x)?;
            x = g.relu(x);
        }
        let mut levels_fine_to_coarse = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.transition.apply(g, x)?;
            x = stage.transition_gn.apply(g, x)?;
            x = g.relu(x);
            for block in &stage.blocks {
                // pre-activation residual: x + conv(relu(gn(conv(relu(gn(x))))))
                let mut y = block.gn1.apply(g, x)?;
                y = g.relu(y);
                y = block.conv1.apply(g, y)?;
                y = block.gn2.apply(g, y)?;
                y = g.relu(y);
                y = block.conv2.apply(g, y)?;
                x = g.add(x, y);
            }
            levels_fine_to_coarse.push(x);
        }
        levels_fine_to_coarse.reverse();
        Ok(levels_fine_to_coarse)
    }
}

/// Materialize one stream's feature group from an image.
pub fn extract_features<F: Real>(
    model: &StreamModel,
    store: &ParamStore<F>,
    image: &Array3<F>,
) -> Result<FeatureGroup<F>> {
    let mut g = Graph::new(store);
    let input = g.input(image.clone());
    let nodes = model.forward(&mut g, input)?;
    let coarsest = model.coarsest_stride();
    let maps = nodes
        .iter()
        .enumerate()
        .map(|(j, &n)| FeatureMap {
            data: g.feature(n).to_owned(),
            stream_index: model.stream_index,
            level_index: j,
            stride: coarsest >> j,
        })
        .collect();
    Ok(FeatureGroup { maps })
}

/// Run every stream on its pyramid member.
pub fn forward_mdipn<F: Real>(
    pyramid: &ImagePyramid<F>,
    models: &[StreamModel],
    store: &ParamStore<F>,
) -> Result<Vec<FeatureGroup<F>>> {
    if models.len() != pyramid.images.len() {
        return Err(Error::Config(format!(
            "{} stream models for a {}-member pyramid",
            models.len(),
            pyramid.images.len()
        )));
    }
    models
        .iter()
        .zip(&pyramid.images)
        .map(|(m, img)| extract_features(m, store, img))
        .collect()
}
