//! Multi-scale FPN: fuses the N per-stream feature groups into a single
//! detection pyramid. Three wiring styles are supported: an independent FPN
//! per stream with a final merge, cross-stream links at equal resolution,
//! and cross-stream links at equal depth (2x upsampled).
//!
//! Fusion order is streams deep-to-shallow, levels coarse-to-fine, so every
//! upsampling source is already fused. Fusion convs carry no bias and no
//! activation; the whole fusion path is linear.

use rand_chacha::ChaCha8Rng;

use crate::config::{FusionConfig, FusionStrategy};
use crate::error::{Error, Result};
use crate::nn::layers::{conv_init_glorot, ConvParams};
use crate::nn::{Graph, NodeId, ParamStore, Real};
use crate::streams::{FeatureGroup, FeatureMap};

/// The fused detection pyramid, ordered coarsest to finest. All maps share
/// the fusion channel width; consecutive maps differ by exactly 2x per dim.
#[derive(Debug, Clone)]
pub struct OutputPyramid<F> {
    pub maps: Vec<FeatureMap<F>>,
}

impl<F> OutputPyramid<F> {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    n_streams: usize,
    levels: usize,
    /// 1x1 lateral conv per (stream, level), raw channels -> common.
    lateral: Vec<Vec<ConvParams>>,
    /// Strategy-dependent 1x1 cross-stream convs (common -> common).
    cross: Vec<Vec<Option<ConvParams>>>,
    /// 3x3 output projection per level.
    output: Vec<ConvParams>,
    /// Stride-2 3x3 convs appending coarser output levels.
    extra: Vec<ConvParams>,
}

/// Build the fusion network. `raw_channels[i][j]` is the channel width of
/// stream `i` at level `j` (level 0 coarsest).
pub fn build_fusion<F: Real>(
    cfg: &FusionConfig,
    raw_channels: &[Vec<usize>],
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
) -> Result<FusionModel> {
    let n = raw_channels.len();
    if n == 0 {
        return Err(Error::Config("fusion needs at least one stream".into()));
    }
    let m = raw_channels[0].len();
    if m == 0 || raw_channels.iter().any(|c| c.len() != m) {
        return Err(Error::Config(
            "all streams must expose the same, non-zero level count".into(),
        ));
    }
    let c = cfg.common_channels;
    let mut lateral = Vec::with_capacity(n);
    for (i, chans) in raw_channels.iter().enumerate() {
        let mut row = Vec::with_capacity(m);
        for (j, &cj) in chans.iter().enumerate() {
            row.push(conv_init_glorot(
                store,
                rng,
                &format!("fusion.lateral.{i}.{j}"),
                c,
                cj,
                1,
                false,
                1,
                0,
            ));
        }
        lateral.push(row);
    }
    let mut cross: Vec<Vec<Option<ConvParams>>> = vec![vec![None; m]; n];
    match cfg.strategy {
        FusionStrategy::AlignedByDepth => {}
        FusionStrategy::AlignedByResolution => {
            // source is the equal-resolution map fused(i+1, j+1)
            for (i, row) in cross.iter_mut().enumerate().take(n.saturating_sub(1)) {
                for (j, slot) in row.iter_mut().enumerate() {
                    if j + 1 < m {
                        *slot = Some(conv_init_glorot(
                            store,
                            rng,
                            &format!("fusion.cross.{i}.{j}"),
                            c,
                            c,
                            1,
                            false,
                            1,
                            0,
                        ));
                    }
                }
            }
        }
        FusionStrategy::SimpleFpn => {
            // merge conv applied to each deeper stream's FPN output
            for (i, row) in cross.iter_mut().enumerate().skip(1) {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = Some(conv_init_glorot(
                        store,
                        rng,
                        &format!("fusion.cross.{i}.{j}"),
                        c,
                        c,
                        1,
                        false,
                        1,
                        0,
                    ));
                }
            }
        }
    }
    let output = (0..m)
        .map(|j| conv_init_glorot(store, rng, &format!("fusion.output.{j}"), c, c, 3, false, 1, 1))
        .collect();
    let extra = (0..cfg.extra_levels)
        .map(|k| conv_init_glorot(store, rng, &format!("fusion.extra.{k}"), c, c, 3, false, 2, 1))
        .collect();
    Ok(FusionModel {
        cfg: cfg.clone(),
        n_streams: n,
        levels: m,
        lateral,
        cross,
        output,
        extra,
    })
}

impl FusionModel {
    pub fn n_streams(&self) -> usize {
        self.n_streams
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    fn check_shape<F: Real>(
        g: &Graph<'_, F>,
        node: NodeId,
        expected: (usize, usize),
        i: usize,
        j: usize,
    ) -> Result<()> {
        let (_, h, w) = g.feature(node).dim();
        if (h, w) != expected {
            return Err(Error::Alignment(format!(
                "fusion term at stream {i}, level {j}: got {h}x{w}, expected {}x{}",
                expected.0, expected.1
            )));
        }
        Ok(())
    }

    /// Fuse raw per-stream level nodes (`raw[i][j]`, level 0 coarsest) into
    /// fused groups of `common_channels` maps with unchanged spatial sizes.
    pub fn fuse<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        raw: &[Vec<NodeId>],
    ) -> Result<Vec<Vec<NodeId>>> {
        let n = self.n_streams;
        let m = self.levels;
        if raw.len() != n || raw.iter().any(|r| r.len() != m) {
            return Err(Error::Config(format!(
                "fusion built for {n} streams x {m} levels, got {} groups",
                raw.len()
            )));
        }
        let shapes: Vec<Vec<(usize, usize)>> = raw
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&id| {
                        let (_, h, w) = g.feature(id).dim();
                        (h, w)
                    })
                    .collect()
            })
            .collect();

        let mut fused: Vec<Vec<Option<NodeId>>> = vec![vec![None; m]; n];
        match self.cfg.strategy {
            FusionStrategy::AlignedByDepth | FusionStrategy::AlignedByResolution => {
                let by_depth = self.cfg.strategy == FusionStrategy::AlignedByDepth;
                for i in (0..n).rev() {
                    for j in 0..m {
                        let mut t = self.lateral[i][j].apply(g, raw[i][j])?;
                        if j > 0 {
                            let up = g.upsample2x(fused[i][j - 1].unwrap());
                            Self::check_shape(g, up, shapes[i][j], i, j)?;
                            t = g.add(t, up);
                        }
                        if i != n - 1 {
                            let src = if by_depth {
                                let up = g.upsample2x(fused[i + 1][j].unwrap());
                                Some(up)
                            } else if j + 1 < m {
                                let conv = self.cross[i][j].as_ref().unwrap();
                                Some(conv.apply(g, fused[i + 1][j + 1].unwrap())?)
                            } else {
                                None
                            };
                            if let Some(s) = src {
                                Self::check_shape(g, s, shapes[i][j], i, j)?;
                                t = g.add(t, s);
                            }
                        }
                        fused[i][j] = Some(t);
                    }
                }
            }
            FusionStrategy::SimpleFpn => {
                // independent standard FPN inside each group
                for i in 0..n {
                    for j in 0..m {
                        let mut t = self.lateral[i][j].apply(g, raw[i][j])?;
                        if j > 0 {
                            let up = g.upsample2x(fused[i][j - 1].unwrap());
                            Self::check_shape(g, up, shapes[i][j], i, j)?;
                            t = g.add(t, up);
                        }
                        fused[i][j] = Some(t);
                    }
                }
                // then fold every deeper stream into stream 0, level by level
                for j in 0..m {
                    let mut acc = fused[0][j].unwrap();
                    for i in 1..n {
                        let conv = self.cross[i][j].as_ref().unwrap();
                        let mut s = conv.apply(g, fused[i][j].unwrap())?;
                        for _ in 0..i {
                            s = g.upsample2x(s);
                        }
                        Self::check_shape(g, s, shapes[0][j], i, j)?;
                        acc = g.add(acc, s);
                    }
                    fused[0][j] = Some(acc);
                }
            }
        }
        Ok(fused
            .into_iter()
            .map(|row| row.into_iter().map(Option::unwrap).collect())
            .collect())
    }

    /// Project fused group 0 through the 3x3 output convs and append the
    /// extra coarser levels. Returned nodes are ordered coarsest first.
    pub fn project<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        fused_group_0: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        if fused_group_0.len() != self.levels {
            return Err(Error::Config(format!(
                "expected {} fused levels, got {}",
                self.levels,
                fused_group_0.len()
            )));
        }
        let mut projected = Vec::with_capacity(self.levels + self.extra.len());
        for (j, &node) in fused_group_0.iter().enumerate() {
            projected.push(self.output[j].apply(g, node)?);
        }
        let mut extras = Vec::with_capacity(self.extra.len());
        let mut coarsest = projected[0];
        for conv in &self.extra {
            coarsest = conv.apply(g, coarsest)?;
            extras.push(coarsest);
        }
        extras.reverse();
        extras.extend(projected);
        Ok(extras)
    }
}

/// Strategy-tagged array-level entry point: fuse materialized feature
/// groups, returning fused groups with unchanged spatial sizes.
pub fn fuse_groups<F: Real>(
    model: &FusionModel,
    store: &ParamStore<F>,
    groups: &[FeatureGroup<F>],
) -> Result<Vec<FeatureGroup<F>>> {
    let mut g = Graph::new(store);
    let raw: Vec<Vec<NodeId>> = groups
        .iter()
        .map(|grp| grp.maps.iter().map(|m| g.input(m.data.clone())).collect())
        .collect();
    let fused = model.fuse(&mut g, &raw)?;
    Ok(fused
        .iter()
        .zip(groups)
        .map(|(row, grp)| FeatureGroup {
            maps: row
                .iter()
                .zip(&grp.maps)
                .map(|(&id, meta)| FeatureMap {
                    data: g.feature(id).to_owned(),
                    stream_index: meta.stream_index,
                    level_index: meta.level_index,
                    stride: meta.stride,
                })
                .collect(),
        })
        .collect())
}

/// Array-level output projection of fused group 0.
pub fn project_outputs<F: Real>(
    model: &FusionModel,
    store: &ParamStore<F>,
    fused_group_0: &FeatureGroup<F>,
) -> Result<OutputPyramid<F>> {
    let mut g = Graph::new(store);
    let nodes: Vec<NodeId> = fused_group_0
        .maps
        .iter()
        .map(|m| g.input(m.data.clone()))
        .collect();
    let out = model.project(&mut g, &nodes)?;
    Ok(materialize_pyramid(&g, &out, model))
}

/// Read projected nodes back into an [`OutputPyramid`] with level metadata.
pub fn materialize_pyramid<F: Real>(
    g: &Graph<'_, F>,
    nodes: &[NodeId],
    _model: &FusionModel,
) -> OutputPyramid<F> {
    let total = nodes.len();
    let maps = nodes
        .iter()
        .enumerate()
        .map(|(p, &id)| FeatureMap {
            data: g.feature(id).to_owned(),
            stream_index: 0,
            level_index: p,
            // coarsest map has stride 4 * 2^(levels-1+extra)
            stride: 4 << (total - 1 - p),
        })
        .collect();
    OutputPyramid { maps }
}
