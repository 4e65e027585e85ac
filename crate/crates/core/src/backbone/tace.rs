use candle_core::Tensor;

use crate::config::StageConfig;
use crate::error::{Error, Result};
use crate::nn::{Mlp, Mode, Scope};
use crate::tokens::{FeatureMap, TokenSequence};

use super::attention::MultiHeadAttention;
use super::embed::ParallelConv;

/// Temporal-aware change enhancement:
///
/// ```text
/// T    = MHA(query = R, key/value = F) + PCM(T2I(R)) + R
/// F^e  = T2I(FFN(T) + T)
/// ```
///
/// In the last stage an optional class token is prepended to the queries.
/// Its output row carries no local-context term, is split off after the FFN
/// and returned as the semantic token.
#[derive(Clone)]
pub struct Tace {
    pub mha: MultiHeadAttention,
    pub pcm: ParallelConv,
    pub ffn: Mlp,
    pub stage: usize,
}

impl Tace {
    pub fn new(scope: &Scope, cfg: &StageConfig, ln_eps: f64, bn_eps: f64, bn_momentum: f64) -> Result<Self> {
        Ok(Self {
            mha: MultiHeadAttention::new(&scope.pp("mha"), cfg.dim, cfg.heads, true, ln_eps)?,
            pcm: ParallelConv::new(&scope.pp("pcm"), cfg.dim, cfg.dim, [1, 1, 1], bn_eps, bn_momentum)?,
            ffn: Mlp::new(&scope.pp("ffn"), cfg.dim, cfg.ffn_hidden(), ln_eps)?,
            stage: cfg.index,
        })
    }

    /// `class_token` is a `[D]` vector prepended to every batch item.
    pub fn forward(
        &self,
        r: &TokenSequence,
        f: &TokenSequence,
        class_token: Option<&Tensor>,
        mode: Mode,
    ) -> Result<(FeatureMap, Option<Tensor>)> {
        if r.tokens.dims() != f.tokens.dims() {
            return Err(Error::Shape(format!(
                "representation {:?} and change feature {:?} differ",
                r.tokens.dims(),
                f.tokens.dims()
            )));
        }
        if class_token.is_some() && self.stage != 4 {
            return Err(Error::Contract(format!(
                "class token supplied to the stage-{} enhancement block; only stage 4 carries it",
                self.stage
            )));
        }
        let (b, _, d) = r.tokens.dims3()?;
        let local = self.pcm.forward(&r.to_map()?, mode)?.to_tokens()?;
        let spatial_residual = (&local.tokens + &r.tokens)?;

        let (query, residual) = match class_token {
            Some(cls) => {
                let cls = cls.reshape((1, 1, d))?.broadcast_as((b, 1, d))?.contiguous()?;
                (
                    Tensor::cat(&[&cls, &r.tokens], 1)?,
                    Tensor::cat(&[&cls, &spatial_residual], 1)?,
                )
            }
            None => (r.tokens.clone(), spatial_residual),
        };
        let t = (self.mha.forward(&query, Some(&f.tokens))? + residual)?;
        let out = (self.ffn.forward(&t)? + t)?;

        match class_token {
            Some(_) => {
                let n = out.dims()[1];
                let sem = out.narrow(1, 0, 1)?.squeeze(1)?;
                let spatial = r.with_tokens(out.narrow(1, 1, n - 1)?)?;
                Ok((spatial.to_map()?, Some(sem)))
            }
            None => Ok((r.with_tokens(out)?.to_map()?, None)),
        }
    }
}
