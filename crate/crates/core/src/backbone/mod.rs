//! Weight-sharing Siamese backbone.
//!
//! Each of the four stages runs TWFE on both temporal branches, then
//! `blocks_per_stage` rounds of cross-temporal change attention (CTCA) and
//! temporal-aware change enhancement (TACE). The enhanced change feature of
//! a branch is the input of that same branch's next stage.
//!
//! Both branches travel through every module as one joint batch
//! `[pre; post]`, so they share weights by construction and identical
//! inputs give bit-identical outputs.

mod attention;
mod embed;
mod tace;
mod twfe;

pub use attention::{CrossTemporalAttention, MultiHeadAttention};
pub use embed::{OverlapEmbed, ParallelConv, PyramidReduction};
pub use tace::Tace;
pub use twfe::Twfe;

use candle_core::{Tensor, Var};

use crate::config::{ModelConfig, StageConfig, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::nn::{Init, Mode, Scope};
use crate::tokens::FeatureMap;

/// One CTCA + TACE round.
#[derive(Clone)]
pub struct ChangeBlock {
    pub ctca: CrossTemporalAttention,
    pub tace: Tace,
}

#[derive(Clone)]
pub struct Stage {
    pub twfe: Twfe,
    pub blocks: Vec<ChangeBlock>,
    pub cfg: StageConfig,
}

/// Per-stage enhanced change features of both branches plus the semantic
/// token of the pre-event branch.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub pre: Vec<FeatureMap>,
    pub post: Vec<FeatureMap>,
    /// `[B, D_4]`, present when the semantic token is enabled.
    pub semantic: Option<Tensor>,
}

#[derive(Clone)]
pub struct Backbone {
    pub stages: Vec<Stage>,
    pub class_token: Option<Var>,
    cfg: ModelConfig,
}

impl Backbone {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(4);
        for i in 1..=4 {
            let sc = cfg.stage(i);
            let s = scope.pp(format!("stage{i}"));
            let twfe = Twfe::new(&s.pp("twfe"), &sc, cfg.layer_norm_eps, cfg.batch_norm_eps, cfg.batch_norm_momentum)?;
            let mut blocks = Vec::new();
            if cfg.use_ctca_tace {
                for b in 0..cfg.blocks_per_stage {
                    let bs = s.pp(format!("block{b}"));
                    blocks.push(ChangeBlock {
                        ctca: CrossTemporalAttention::new(
                            &bs.pp("ctca"),
                            sc.dim,
                            sc.ffn_hidden(),
                            cfg.attn_norm_eps,
                            cfg.layer_norm_eps,
                        )?,
                        tace: Tace::new(&bs.pp("tace"), &sc, cfg.layer_norm_eps, cfg.batch_norm_eps, cfg.batch_norm_momentum)?,
                    });
                }
            }
            stages.push(Stage { twfe, blocks, cfg: sc });
        }
        let class_token = if cfg.use_semantic_token {
            Some(scope.param("class_token", &[cfg.dims[3]], Init::Normal(cfg.class_token_std))?)
        } else {
            None
        };
        Ok(Self { stages, class_token, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn check_input(&self, pre: &Tensor, post: &Tensor) -> Result<()> {
        let (_, c, h, w) = pre.dims4()?;
        if pre.dims() != post.dims() {
            return Err(Error::Shape(format!("pre {:?} and post {:?} differ", pre.dims(), post.dims())));
        }
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!("expected {} input channels, got {c}", self.cfg.in_channels)));
        }
        let s = DOWNSAMPLE[3];
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by {s}")));
        }
        Ok(())
    }

    /// Run one stage on the joint batch. Returns the enhanced joint features
    /// and, on the last stage, the semantic token rows of the pre half.
    pub fn stage_forward(
        &self,
        index: usize,
        joint: &FeatureMap,
        mode: Mode,
    ) -> Result<(FeatureMap, Option<Tensor>)> {
        let stage = &self.stages[index - 1];
        let run = || -> Result<(FeatureMap, Option<Tensor>)> {
            let mut r = stage.twfe.forward(joint, mode)?;
            if stage.blocks.is_empty() {
                return Ok((r.to_map()?, None));
            }
            let last = stage.blocks.len() - 1;
            let mut out = None;
            for (bi, block) in stage.blocks.iter().enumerate() {
                let f = r.with_tokens(block.ctca.forward_joint(&r.tokens)?)?;
                let cls = match (&self.class_token, index == 4 && bi == last) {
                    (Some(c), true) => Some(c.as_tensor()),
                    _ => None,
                };
                let (fe, sem) = block.tace.forward(&r, &f, cls, mode)?;
                if bi < last {
                    r = fe.to_tokens()?;
                } else {
                    out = Some((fe, sem));
                }
            }
            Ok(out.expect("at least one block"))
        };
        run().map_err(|e| e.in_stage(index))
    }

    pub fn forward(&self, pre: &Tensor, post: &Tensor, mode: Mode) -> Result<BackboneOutput> {
        self.check_input(pre, post)?;
        let b = pre.dims()[0];
        let mut x = FeatureMap(Tensor::cat(&[pre, post], 0)?);
        let mut out = BackboneOutput { pre: Vec::with_capacity(4), post: Vec::with_capacity(4), semantic: None };
        for i in 1..=4 {
            let (fe, sem) = self.stage_forward(i, &x, mode)?;
            out.pre.push(FeatureMap(fe.tensor().narrow(0, 0, b)?));
            out.post.push(FeatureMap(fe.tensor().narrow(0, b, b)?));
            if let Some(sem) = sem {
                // the post half's token row is a by-product of the joint pass
                out.semantic = Some(sem.narrow(0, 0, b)?);
            }
            x = fe;
        }
        Ok(out)
    }
}
