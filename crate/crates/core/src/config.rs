//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-stage downsample rates relative to the input image.
pub const DOWNSAMPLE: [usize; 4] = [4, 8, 16, 32];

/// Every architecture knob of the network, including the ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input bands per temporal image (1 = VV only, 2 = VV+VH).
    pub in_channels: usize,
    /// Token dimension of each stage.
    pub dims: [usize; 4],
    pub heads: [usize; 4],
    pub ffn_ratio: f64,
    /// Cross-temporal attention + enhancement blocks after each TWFE.
    pub blocks_per_stage: usize,
    /// Dilation rates of the pyramid reduction convolutions.
    pub prm_rates: Vec<usize>,
    /// Output width of each per-stage differential convolution.
    pub fuse_channels: usize,
    /// Width between the two upsampling deconvolutions of the head.
    pub head_channels: usize,
    pub use_oel: bool,
    pub use_ctca_tace: bool,
    pub use_semantic_token: bool,
    pub class_token_std: f64,
    /// Added to each token norm of the cosine attention logits.
    pub attn_norm_eps: f64,
    pub layer_norm_eps: f64,
    pub batch_norm_eps: f64,
    pub batch_norm_momentum: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-width configuration.
    pub fn full() -> Self {
        Self {
            in_channels: 1,
            dims: [64, 128, 256, 512],
            heads: [1, 2, 4, 8],
            ffn_ratio: 4.0,
            blocks_per_stage: 1,
            prm_rates: vec![1, 2, 3, 4],
            fuse_channels: 64,
            head_channels: 64,
            use_oel: true,
            use_ctca_tace: true,
            use_semantic_token: true,
            class_token_std: 0.02,
            attn_norm_eps: 1e-8,
            layer_norm_eps: 1e-5,
            batch_norm_eps: 1e-5,
            batch_norm_momentum: 0.1,
            init_seed: 0,
        }
    }

    /// Desk-scale configuration used for gradient checks and smoke training.
    pub fn tiny() -> Self {
        Self {
            dims: [8, 16, 32, 64],
            heads: [1, 1, 2, 2],
            ffn_ratio: 2.0,
            fuse_channels: 8,
            head_channels: 8,
            ..Self::full()
        }
    }

    /// Look up a named preset (`full` or `tiny`).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset `{other}` (expected `full` or `tiny`)"))),
        }
    }

    /// Baseline of the ablation table: no cross-temporal blocks, no token.
    pub fn without_change_attention(mut self) -> Self {
        self.use_ctca_tace = false;
        self.use_semantic_token = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return err("in_channels must be positive".into());
        }
        for i in 0..4 {
            if self.heads[i] == 0 || self.dims[i] % self.heads[i] != 0 {
                return err(format!("dims[{i}]={} is not divisible by heads[{i}]={}", self.dims[i], self.heads[i]));
            }
            if i > 0 && self.dims[i] <= self.dims[i - 1] {
                return err(format!("dims must be strictly increasing, got {:?}", self.dims));
            }
        }
        if self.prm_rates.is_empty() || self.prm_rates.contains(&0) {
            return err(format!("prm_rates must be non-empty and positive, got {:?}", self.prm_rates));
        }
        if let Some(i) = (0..4).find(|&i| self.dims[i] % self.prm_rates.len() != 0) {
            return err(format!(
                "dims[{i}]={} is not divisible by the {} pyramid branches",
                self.dims[i],
                self.prm_rates.len()
            ));
        }
        if !(self.ffn_ratio > 0.0) {
            return err(format!("ffn_ratio must be positive, got {}", self.ffn_ratio));
        }
        if self.blocks_per_stage == 0 {
            return err("blocks_per_stage must be at least 1".into());
        }
        if self.fuse_channels == 0 || self.head_channels == 0 {
            return err("fuse_channels and head_channels must be positive".into());
        }
        if self.use_semantic_token && !self.use_ctca_tace {
            return err("use_semantic_token requires use_ctca_tace (the token is produced by the last enhancement block)".into());
        }
        if !(self.batch_norm_momentum > 0.0 && self.batch_norm_momentum <= 1.0) {
            return err(format!("batch_norm_momentum must lie in (0, 1], got {}", self.batch_norm_momentum));
        }
        Ok(())
    }

    pub fn stage(&self, index: usize) -> StageConfig {
        assert!((1..=4).contains(&index), "stage index out of range: {index}");
        let i = index - 1;
        let (oel_kernel, oel_stride, oel_pad) = match (self.use_oel, index) {
            (true, 1) => (7, 2, 3),
            (true, _) => (3, 2, 1),
            (false, _) => (2, 2, 0),
        };
        StageConfig {
            index,
            downsample: DOWNSAMPLE[i],
            in_channels: if index == 1 { self.in_channels } else { self.dims[i - 1] },
            dim: self.dims[i],
            heads: self.heads[i],
            oel_kernel,
            oel_stride,
            oel_pad,
            ffn_ratio: self.ffn_ratio,
            use_oel: self.use_oel,
            prm_rates: self.prm_rates.clone(),
            prm_stride: if index == 1 { 2 } else { 1 },
            pcm_strides: if index == 1 { [2, 2, 1] } else { [2, 1, 1] },
        }
    }

    /// Total channels of the concatenated differential features.
    pub fn fused_channels(&self) -> usize {
        4 * self.fuse_channels
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Resolved settings of one backbone stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub index: usize,
    pub downsample: usize,
    pub in_channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub oel_kernel: usize,
    pub oel_stride: usize,
    pub oel_pad: usize,
    pub ffn_ratio: f64,
    pub use_oel: bool,
    pub prm_rates: Vec<usize>,
    pub prm_stride: usize,
    /// Strides of the three convolutions of the TWFE local-context path.
    pub pcm_strides: [usize; 3],
}

impl StageConfig {
    pub fn ffn_hidden(&self) -> usize {
        ((self.dim as f64) * self.ffn_ratio).round().max(1.0) as usize
    }
}
