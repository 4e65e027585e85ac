use crate::config::StageConfig;
use crate::error::{Error, Result};
use crate::nn::{Mlp, Mode, Scope};
use crate::tokens::{FeatureMap, TokenSequence};

use super::attention::MultiHeadAttention;
use super::embed::{OverlapEmbed, ParallelConv, PyramidReduction};

/// Temporal-wise feature extraction for one stage and one branch:
///
/// ```text
/// F_ms = PRM(OEL(inp))
/// T    = MHA(I2T(F_ms)) + PCM(inp) + I2T(F_ms)
/// R    = FFN(T) + T
/// ```
#[derive(Clone)]
pub struct Twfe {
    pub oel: OverlapEmbed,
    pub prm: PyramidReduction,
    pub mha: MultiHeadAttention,
    pub pcm: ParallelConv,
    pub ffn: Mlp,
    pub cfg: StageConfig,
}

impl Twfe {
    pub fn new(scope: &Scope, cfg: &StageConfig, ln_eps: f64, bn_eps: f64, bn_momentum: f64) -> Result<Self> {
        Ok(Self {
            oel: OverlapEmbed::new(&scope.pp("oel"), cfg)?,
            prm: PyramidReduction::new(&scope.pp("prm"), cfg)?,
            mha: MultiHeadAttention::new(&scope.pp("mha"), cfg.dim, cfg.heads, false, ln_eps)?,
            pcm: ParallelConv::new(&scope.pp("pcm"), cfg.in_channels, cfg.dim, cfg.pcm_strides, bn_eps, bn_momentum)?,
            ffn: Mlp::new(&scope.pp("ffn"), cfg.dim, cfg.ffn_hidden(), ln_eps)?,
            cfg: cfg.clone(),
        })
    }

    /// Multi-scale context `F_ms`.
    pub fn multiscale(&self, inp: &FeatureMap) -> Result<FeatureMap> {
        self.prm.forward(&self.oel.forward(inp)?)
    }

    pub fn forward(&self, inp: &FeatureMap, mode: Mode) -> Result<TokenSequence> {
        let ms = self.multiscale(inp)?.to_tokens()?;
        let local = self.pcm.forward(inp, mode)?;
        if local.grid() != ms.grid {
            return Err(Error::Config(format!(
                "stage {}: local-context path yields a {:?} grid but the reduction path yields {:?}",
                self.cfg.index,
                local.grid(),
                ms.grid
            )));
        }
        let local = local.to_tokens()?;
        let attn = self.mha.forward(&ms.tokens, None)?;
        let t = ((attn + &local.tokens)? + &ms.tokens)?;
        let r = (self.ffn.forward(&t)? + t)?;
        ms.with_tokens(r)
    }
}
