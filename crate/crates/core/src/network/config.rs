use serde::{Deserialize, Serialize};

use crate::cst::BlockOptions;
use crate::error::{config_err, Result};

/// Architecture hyper-parameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channel width `C` after embedding; stage `s` has `C * 2^s`.
    pub base_dim: usize,
    /// `[height, width]`.
    pub input_size: [usize; 2],
    /// Blocks per encoder stage; the decoder mirrors it.
    pub depths: Vec<usize>,
    pub bottleneck_depth: usize,
    /// Heads per encoder stage followed by the bottleneck.
    pub heads: Vec<usize>,
    pub window_size: usize,
    /// Four overlapping 3x3 convs instead of a 4x4 patch projection.
    pub conv_embedding: bool,
    pub conv_projection: bool,
    pub use_bias_table: bool,
    pub conv_attention_refine: bool,
    pub use_dsf: bool,
    /// Convolutional up-sampling with skip convolutions instead of patch
    /// expanding and linear skip fusion.
    pub use_sc: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 9,
            base_dim: 96,
            input_size: [224, 224],
            depths: vec![2, 2, 2],
            bottleneck_depth: 2,
            heads: vec![3, 6, 12, 24],
            window_size: 7,
            conv_embedding: true,
            conv_projection: true,
            use_bias_table: false,
            conv_attention_refine: true,
            use_dsf: true,
            use_sc: true,
        }
    }
}

pub const ABLATION_METHODS: std::ops::RangeInclusive<usize> = 0..=6;

impl ModelConfig {
    /// Desk-scale model: `C = 16`, 128x128 grayscale input, `M = 4`, 4 classes.
    pub fn tiny() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 4,
            base_dim: 16,
            input_size: [128, 128],
            heads: vec![1, 2, 4, 8],
            window_size: 4,
            ..Default::default()
        }
    }

    /// Switches for ablation row `method` (0 = Swin-like baseline, 6 = final model).
    pub fn with_ablation(mut self, method: usize) -> Result<Self> {
        if !ABLATION_METHODS.contains(&method) {
            return Err(config_err!("ablation method {method} is outside 0..=6"));
        }
        self.conv_embedding = method >= 1;
        self.conv_projection = method >= 2;
        self.use_bias_table = method <= 2 || method == 5;
        self.conv_attention_refine = method >= 3;
        self.use_dsf = method >= 4;
        self.use_sc = method >= 5;
        Ok(self)
    }

    /// The ablation row these switches correspond to, if any.
    pub fn ablation_method(&self) -> Option<usize> {
        ABLATION_METHODS.clone().find(|&m| self.clone().with_ablation(m).ok().as_ref() == Some(self))
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            conv_projection: self.conv_projection,
            bias_table: self.use_bias_table,
            conv_refine: self.conv_attention_refine,
            dsf: self.use_dsf,
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Channel width at encoder stage `s` (`s == stages()` is the bottleneck).
    pub fn dim(&self, stage: usize) -> usize {
        self.base_dim << stage
    }

    /// Token-map extent `[h, w]` at encoder stage `s`.
    pub fn extent(&self, stage: usize) -> [usize; 2] {
        let f = 4 << stage;
        [self.input_size[0] / f, self.input_size[1] / f]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(config_err!("in_channels and num_classes must be positive"));
        }
        if self.base_dim == 0 || !self.base_dim.is_multiple_of(2) {
            return Err(config_err!("base_dim must be a positive even number, got {}", self.base_dim));
        }
        if self.window_size == 0 {
            return Err(config_err!("window_size must be positive"));
        }
        if self.heads.len() != s + 1 {
            return Err(config_err!(
                "heads lists {} entries, expected {} (one per stage plus bottleneck)",
                self.heads.len(),
                s + 1
            ));
        }
        let f = 4 << s;
        for (axis, &len) in ["height", "width"].iter().zip(&self.input_size) {
            if len % f != 0 {
                return Err(config_err!(
                    "input {axis} {len} is not divisible by {f} (4 * 2^{s})"
                ));
            }
        }
        for stage in 0..=s {
            let [h, w] = self.extent(stage);
            if h % self.window_size != 0 || w % self.window_size != 0 {
                return Err(config_err!(
                    "stage {stage} map {h}x{w} is not divisible by window_size {}",
                    self.window_size
                ));
            }
            let heads = self.heads[stage];
            if heads == 0 || !self.dim(stage).is_multiple_of(heads) {
                return Err(config_err!(
                    "heads[{stage}] = {heads} does not divide {} channels",
                    self.dim(stage)
                ));
            }
        }
        Ok(())
    }
}
