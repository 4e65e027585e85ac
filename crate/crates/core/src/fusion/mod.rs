//! Temporal-differential fusion, the prediction head and the losses.

pub mod loss;

pub use loss::{
    contrastive_loss, contrastive_loss_map, dice_loss, dice_loss_map, total_loss, total_loss_map, ContrastiveForm,
    LossConfig, DICE_SMOOTH,
};

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, sigmoid, Conv2d, ConvSpec, ConvTranspose2d, Linear, Scope};
use crate::tokens::FeatureMap;

/// Sigmoid gate computed from the semantic token.
#[derive(Clone)]
pub struct SemanticGate {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SemanticGate {
    pub fn new(scope: &Scope, token_dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&scope.pp("fc1"), token_dim, token_dim, true)?,
            fc2: Linear::new(&scope.pp("fc2"), token_dim, channels, true)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc2.weight().dims()[0]
    }

    /// `[B, D]` token to `[B, C]` gate values in `(0, 1)`.
    pub fn forward(&self, token: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(token)?.gelu()?;
        sigmoid(&self.fc2.forward(&h)?)
    }
}

/// Intermediate and final tensors of one fusion pass.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// `[B, 4F, H/4, W/4]` concatenated differential features.
    pub fused: Tensor,
    /// `[B, 4F, H/4, W/4]` after the 1x1 convolution and semantic gating.
    pub enhanced: Tensor,
    /// `[B, 1, H, W]` pre-sigmoid head output.
    pub logits: Tensor,
    /// `[B, 1, H, W]` change probabilities.
    pub probs: Tensor,
}

#[derive(Clone)]
pub struct TemporalDifferentialFusion {
    /// One 3x3 convolution per stage, applied to `|pre - post|`.
    pub diff_convs: Vec<Conv2d>,
    pub fuse: Conv2d,
    pub gate: Option<SemanticGate>,
    pub up1: ConvTranspose2d,
    pub up2: ConvTranspose2d,
}

impl TemporalDifferentialFusion {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let f = cfg.fuse_channels;
        let fused = cfg.fused_channels();
        let diff_convs = (0..4)
            .map(|i| Conv2d::new(&scope.pp(format!("diff{}", i + 1)), cfg.dims[i], f, ConvSpec::new(3, 1, 1), false))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv2d::new(&scope.pp("fuse"), fused, fused, ConvSpec::new(1, 1, 0), true)?;
        let gate = if cfg.use_semantic_token {
            Some(SemanticGate::new(&scope.pp("gate"), cfg.dims[3], fused)?)
        } else {
            None
        };
        let up = ConvSpec::new(4, 2, 1);
        let up1 = ConvTranspose2d::new(&scope.pp("head.up1"), fused, cfg.head_channels, up)?;
        let up2 = ConvTranspose2d::new(&scope.pp("head.up2"), cfg.head_channels, 1, up)?;
        Ok(Self { diff_convs, fuse, gate, up1, up2 })
    }

    /// Concatenation of the per-stage differential convolutions at the
    /// finest stage resolution.
    pub fn fused(&self, pre: &[FeatureMap], post: &[FeatureMap]) -> Result<Tensor> {
        if pre.len() != 4 || post.len() != 4 {
            return Err(Error::Shape(format!("expected 4 stage features per branch, got {} and {}", pre.len(), post.len())));
        }
        let (h4, w4) = pre[0].grid();
        let mut parts = Vec::with_capacity(4);
        for (i, conv) in self.diff_convs.iter().enumerate() {
            let (a, b) = (pre[i].tensor(), post[i].tensor());
            if a.dims() != b.dims() {
                return Err(Error::Shape(format!("stage {} features differ: {:?} vs {:?}", i + 1, a.dims(), b.dims())));
            }
            let d = (a - b)?.abs()?;
            parts.push(resize_bilinear(&conv.forward(&d)?, h4, w4)?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    /// Apply the 1x1 convolution and, when present, the semantic gate.
    pub fn enhance(&self, fused: &Tensor, semantic: Option<&Tensor>) -> Result<Tensor> {
        let x = self.fuse.forward(fused)?;
        match (&self.gate, semantic) {
            (Some(gate), Some(t)) => {
                let c = x.dims()[1];
                if gate.channels() != c {
                    return Err(Error::Config(format!(
                        "semantic gate produces {} channels but the fused map has {c}",
                        gate.channels()
                    )));
                }
                let g = gate.forward(t)?;
                Ok(x.broadcast_mul(&g.reshape((g.dims()[0], c, 1, 1))?)?)
            }
            (Some(_), None) => Err(Error::Contract("semantic gating is enabled but no semantic token was given".into())),
            (None, Some(_)) => Err(Error::Contract("a semantic token was given but gating is disabled".into())),
            (None, None) => Ok(x),
        }
    }

    pub fn head(&self, enhanced: &Tensor) -> Result<Tensor> {
        let h = self.up1.forward(enhanced)?.relu()?;
        self.up2.forward(&h)
    }

    pub fn forward(&self, pre: &[FeatureMap], post: &[FeatureMap], semantic: Option<&Tensor>) -> Result<FusionOutput> {
        let fused = self.fused(pre, post)?;
        let enhanced = self.enhance(&fused, semantic)?;
        let logits = self.head(&enhanced)?;
        let probs = sigmoid(&logits)?;
        Ok(FusionOutput { fused, enhanced, logits, probs })
    }
}
