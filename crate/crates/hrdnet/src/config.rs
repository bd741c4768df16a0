//! Declarative model/training configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One backbone stream: residual blocks and channel widths per stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub blocks_per_stage: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub stem_channels: usize,
}

impl StreamSpec {
    pub fn total_blocks(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }
}

/// How the per-stream feature groups are fused into one pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    SimpleFpn,
    AlignedByResolution,
    AlignedByDepth,
}

impl FusionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            FusionStrategy::SimpleFpn => "simple_fpn",
            FusionStrategy::AlignedByResolution => "aligned_by_resolution",
            FusionStrategy::AlignedByDepth => "aligned_by_depth",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    #[serde(default = "default_common_channels")]
    pub common_channels: usize,
    #[serde(default)]
    pub extra_levels: usize,
}

fn default_common_channels() -> usize {
    256
}

/// Single-stage anchor head settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_classes: usize,
    #[serde(default = "default_tower_convs")]
    pub tower_convs: usize,
    #[serde(default = "default_anchor_scales")]
    pub anchor_scales: Vec<f64>,
    #[serde(default = "default_anchor_ratios")]
    pub anchor_ratios: Vec<f64>,
    #[serde(default = "default_iou_pos")]
    pub positive_iou: f64,
    #[serde(default = "default_iou_neg")]
    pub negative_iou: f64,
    #[serde(default = "default_focal_gamma")]
    pub focal_gamma: f64,
    #[serde(default = "default_focal_alpha")]
    pub focal_alpha: f64,
    #[serde(default = "default_smooth_l1_beta")]
    pub smooth_l1_beta: f64,
    #[serde(default = "default_reg_weight")]
    pub regression_weight: f64,
    #[serde(default = "default_score_threshold")]
    pub score_threshold: f64,
}

fn default_tower_convs() -> usize {
    2
}
fn default_anchor_scales() -> Vec<f64> {
    vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)]
}
fn default_anchor_ratios() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_iou_pos() -> f64 {
    0.5
}
fn default_iou_neg() -> f64 {
    0.4
}
fn default_focal_gamma() -> f64 {
    2.0
}
fn default_focal_alpha() -> f64 {
    0.25
}
fn default_smooth_l1_beta() -> f64 {
    0.11
}
fn default_reg_weight() -> f64 {
    1.0
}
fn default_score_threshold() -> f64 {
    0.05
}

impl HeadConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }
}

/// SGD schedule: linear warmup then step decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_decay_epochs")]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_warmup_iters")]
    pub warmup_iters: usize,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Global L2-norm gradient clipping threshold; `None` disables clipping.
    #[serde(default = "default_grad_clip_norm")]
    pub grad_clip_norm: Option<f64>,
    #[serde(default = "default_total_epochs")]
    pub total_epochs: usize,
}

fn default_base_lr() -> f64 {
    0.02
}
fn default_grad_clip_norm() -> Option<f64> {
    Some(35.0)
}
fn default_decay_epochs() -> Vec<usize> {
    vec![7, 11]
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_warmup_iters() -> usize {
    500
}
fn default_warmup_ratio() -> f64 {
    1.0 / 3.0
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_momentum() -> f64 {
    0.9
}
fn default_total_epochs() -> usize {
    12
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: default_base_lr(),
            decay_epochs: default_decay_epochs(),
            decay_factor: default_decay_factor(),
            warmup_iters: default_warmup_iters(),
            warmup_ratio: default_warmup_ratio(),
            weight_decay: default_weight_decay(),
            momentum: default_momentum(),
            grad_clip_norm: default_grad_clip_norm(),
            total_epochs: default_total_epochs(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub val: Option<PathBuf>,
}

/// Top-level model + experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrdnetConfig {
    pub n_streams: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_levels")]
    pub levels: usize,
    pub stream_specs: Vec<StreamSpec>,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub dataset: DatasetPaths,
    pub resolution: (usize, usize),
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train_on_patches: bool,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
    #[serde(default = "default_test_scales")]
    pub multi_scale_factors: Vec<f64>,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_levels() -> usize {
    4
}
fn default_batch_size() -> usize {
    2
}
fn default_input_channels() -> usize {
    3
}
fn default_nms_iou() -> f64 {
    0.5
}
fn default_test_scales() -> Vec<f64> {
    vec![0.75, 1.0, 1.25]
}

impl HrdnetConfig {
    /// Stride of the coarsest backbone level (stem stride 4, each further
    /// stage halves resolution).
    pub fn max_stride(&self) -> usize {
        4 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.n_streams < 1 {
            return fail("n_streams", "must be >= 1".into());
        }
        if self.stream_specs.len() != self.n_streams {
            return fail(
                "stream_specs",
                format!(
                    "expected {} specs, got {}",
                    self.n_streams,
                    self.stream_specs.len()
                ),
            );
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail("alpha", format!("{} not in (0, 1]", self.alpha));
        }
        if self.levels < 1 {
            return fail("levels", "must be >= 1".into());
        }
        let aligned = matches!(
            self.fusion.strategy,
            FusionStrategy::AlignedByDepth | FusionStrategy::AlignedByResolution
        );
        if aligned && self.alpha != 0.5 {
            return fail(
                "alpha",
                format!(
                    "{} strategy requires alpha = 0.5, got {}",
                    self.fusion.strategy.name(),
                    self.alpha
                ),
            );
        }
        for (i, spec) in self.stream_specs.iter().enumerate() {
            if spec.blocks_per_stage.len() != self.levels {
                return fail(
                    &format!("stream_specs[{i}].blocks_per_stage"),
                    format!("expected {} stages, got {}", self.levels, spec.blocks_per_stage.len()),
                );
            }
            if spec.stage_channels.len() != self.levels {
                return fail(
                    &format!("stream_specs[{i}].stage_channels"),
                    format!("expected {} stages, got {}", self.levels, spec.stage_channels.len()),
                );
            }
            if spec.stem_channels == 0 || spec.stage_channels.iter().any(|&c| c == 0) {
                return fail(
                    &format!("stream_specs[{i}]"),
                    "channel widths must be positive".into(),
                );
            }
        }
        // shallow nets take high resolution: depth non-decreasing per stream
        for i in 1..self.stream_specs.len() {
            if self.stream_specs[i].total_blocks() < self.stream_specs[i - 1].total_blocks() {
                return fail(
                    &format!("stream_specs[{i}]"),
                    format!(
                        "total block count {} decreases from stream {} ({})",
                        self.stream_specs[i].total_blocks(),
                        i - 1,
                        self.stream_specs[i - 1].total_blocks()
                    ),
                );
            }
        }
        if self.fusion.common_channels == 0 {
            return fail("fusion.common_channels", "must be positive".into());
        }
        if self.head.num_classes == 0 {
            return fail("head.num_classes", "must be >= 1".into());
        }
        if self.head.anchor_scales.is_empty() || self.head.anchor_ratios.is_empty() {
            return fail("head.anchor_scales", "scales and ratios must be non-empty".into());
        }
        if !(self.schedule.warmup_ratio > 0.0 && self.schedule.warmup_ratio <= 1.0) {
            return fail(
                "schedule.warmup_ratio",
                format!("{} not in (0, 1]", self.schedule.warmup_ratio),
            );
        }
        if !self.schedule.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return fail(
                "schedule.decay_epochs",
                "must be strictly increasing".into(),
            );
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return fail("resolution", "must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1".into());
        }
        if self.input_channels == 0 {
            return fail("input_channels", "must be >= 1".into());
        }
        if self.multi_scale_factors.is_empty() {
            return fail("multi_scale_factors", "must be non-empty".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: HrdnetConfig =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy_config(n_streams: usize) -> HrdnetConfig {
        let mut specs = Vec::new();
        for i in 0..n_streams {
            specs.push(StreamSpec {
                blocks_per_stage: vec![1 + i; 4],
                stage_channels: vec![8, 16, 32, 64],
                stem_channels: 8,
            });
        }
        HrdnetConfig {
            n_streams,
            alpha: 0.5,
            levels: 4,
            stream_specs: specs,
            fusion: FusionConfig {
                strategy: FusionStrategy::AlignedByDepth,
                common_channels: 16,
                extra_levels: 0,
            },
            head: HeadConfig {
                num_classes: 3,
                tower_convs: 1,
                anchor_scales: vec![1.0],
                anchor_ratios: vec![1.0],
                positive_iou: 0.5,
                negative_iou: 0.4,
                focal_gamma: 2.0,
                focal_alpha: 0.25,
                smooth_l1_beta: 0.11,
                regression_weight: 1.0,
                score_threshold: 0.05,
            },
            schedule: Schedule::default(),
            dataset: DatasetPaths::default(),
            resolution: (128, 128),
            seed: 0,
            train_on_patches: false,
            batch_size: 2,
            input_channels: 3,
            nms_iou: 0.5,
            multi_scale_factors: vec![0.75, 1.0, 1.25],
        }
    }

    #[test]
    fn toml_round_trip_is_identity() {
        let cfg = toy_config(2);
        let text = cfg.to_toml();
        let back = HrdnetConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn aligned_strategy_rejects_other_alpha() {
        let mut cfg = toy_config(2);
        cfg.alpha = 0.7;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("alpha"));
        assert!(err.to_string().contains("0.5"));
    }

    #[test]
    fn depth_monotonicity_is_enforced() {
        let mut cfg = toy_config(2);
        cfg.stream_specs[1].blocks_per_stage = vec![0; 4];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("stream_specs[1]"));
    }

    #[test]
    fn stream_count_must_match_spec_count() {
        let mut cfg = toy_config(2);
        cfg.stream_specs.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn schedule_defaults_follow_the_training_protocol() {
        let s = Schedule::default();
        assert_eq!(s.base_lr, 0.02);
        assert_eq!(s.decay_epochs, vec![7, 11]);
        assert_eq!(s.warmup_iters, 500);
        assert!((s.warmup_ratio - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.weight_decay, 1e-4);
        assert_eq!(s.total_epochs, 12);
    }
}
