//! Attention blocks: standard multi-head attention and the cross-temporal
//! subtraction attention with cosine-normalized logits.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::layers::debug_check_rows_sum_to_one;
use crate::nn::{softmax_last_dim, LayerNorm, Linear, Mlp, Scope};
use crate::tokens::TokenSequence;

/// Pre-norm multi-head scaled dot-product attention with an output
/// projection. In cross mode queries and keys/values come from different
/// token sets and each gets its own layer norm.
#[derive(Clone)]
pub struct MultiHeadAttention {
    pub norm_q: LayerNorm,
    pub norm_kv: Option<LayerNorm>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(scope: &Scope, dim: usize, heads: usize, cross: bool, ln_eps: f64) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(&scope.pp("norm_q"), dim, ln_eps)?,
            norm_kv: if cross { Some(LayerNorm::new(&scope.pp("norm_kv"), dim, ln_eps)?) } else { None },
            q: Linear::new(&scope.pp("q"), dim, dim, true)?,
            k: Linear::new(&scope.pp("k"), dim, dim, true)?,
            v: Linear::new(&scope.pp("v"), dim, dim, true)?,
            proj: Linear::new(&scope.pp("proj"), dim, dim, true)?,
            heads,
        })
    }

    /// `query`: `[B, Nq, D]`; `context`: `[B, Nk, D]` (cross mode only).
    pub fn forward(&self, query: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let qn = self.norm_q.forward(query)?;
        let kv = match (&self.norm_kv, context) {
            (Some(norm), Some(ctx)) => norm.forward(ctx)?,
            (None, None) => qn.clone(),
            (Some(_), None) => return Err(Error::Contract("cross attention called without a context".into())),
            (None, Some(_)) => return Err(Error::Contract("self attention called with a context".into())),
        };
        let (b, nq, d) = qn.dims3()?;
        let nk = kv.dims()[1];
        let hd = d / self.heads;
        let split = |x: Tensor, n: usize| -> Result<Tensor> {
            Ok(x.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(&qn)?, nq)?;
        let k = split(self.k.forward(&kv)?, nk)?;
        let v = split(self.v.forward(&kv)?, nk)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = softmax_last_dim(&scores)?;
        debug_check_rows_sum_to_one(&attn)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, nq, d))?;
        self.proj.forward(&out)
    }
}

/// Cross-temporal change attention.
///
/// For the pre-event branch, `Q = R_pre W_Q`, `K = R_post W_K`,
/// `V = R_post W_V` and
/// `CA = Q - softmax(Q K^T / (|Q| |K|)) V`, with the norms taken per token
/// along the feature axis. The output is `MLP(CA) + CA`. The post-event
/// branch is the same computation with the roles swapped, using the same
/// weights.
#[derive(Clone)]
pub struct CrossTemporalAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub mlp: Mlp,
    pub eps: f64,
}

impl CrossTemporalAttention {
    pub fn new(scope: &Scope, dim: usize, hidden: usize, eps: f64, ln_eps: f64) -> Result<Self> {
        Ok(Self {
            w_q: Linear::new(&scope.pp("w_q"), dim, dim, false)?,
            w_k: Linear::new(&scope.pp("w_k"), dim, dim, false)?,
            w_v: Linear::new(&scope.pp("w_v"), dim, dim, false)?,
            mlp: Mlp::new(&scope.pp("mlp"), dim, hidden, ln_eps)?,
            eps,
        })
    }

    fn unit_rows(&self, x: &Tensor) -> Result<Tensor> {
        let norm = (x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()? + self.eps)?;
        Ok(x.broadcast_div(&norm)?)
    }

    /// The subtraction attention `CA` with queries from `query_src` and
    /// keys/values from `kv_src`, both `[B, N, D]`.
    pub fn change_attention(&self, query_src: &Tensor, kv_src: &Tensor) -> Result<Tensor> {
        let q = self.w_q.forward(query_src)?;
        let k = self.w_k.forward(kv_src)?;
        let v = self.w_v.forward(kv_src)?;
        let logits = self.unit_rows(&q)?.matmul(&self.unit_rows(&k)?.t()?)?;
        let attn = softmax_last_dim(&logits)?;
        debug_check_rows_sum_to_one(&attn)?;
        Ok((&q - attn.matmul(&v)?)?)
    }

    /// Both directions at once on a joint batch `[pre; post]` of shape
    /// `[2B, N, D]`; returns `[F_pre; F_post]` in the same layout.
    pub fn forward_joint(&self, joint: &Tensor) -> Result<Tensor> {
        let b2 = joint.dims()[0];
        if b2 % 2 != 0 {
            return Err(Error::Shape(format!("joint batch of {b2} cannot be split into two branches")));
        }
        let half = b2 / 2;
        let swapped = Tensor::cat(&[joint.narrow(0, half, half)?, joint.narrow(0, 0, half)?], 0)?;
        let ca = self.change_attention(joint, &swapped)?;
        Ok((self.mlp.forward(&ca)? + ca)?)
    }

    pub fn forward(&self, r_pre: &TokenSequence, r_post: &TokenSequence) -> Result<(TokenSequence, TokenSequence)> {
        if r_pre.tokens.dims() != r_post.tokens.dims() || r_pre.grid != r_post.grid {
            return Err(Error::Shape(format!(
                "pre tokens {:?} and post tokens {:?} differ",
                r_pre.tokens.dims(),
                r_post.tokens.dims()
            )));
        }
        let b = r_pre.tokens.dims()[0];
        let joint = Tensor::cat(&[&r_pre.tokens, &r_post.tokens], 0)?;
        let out = self.forward_joint(&joint)?;
        Ok((r_pre.with_tokens(out.narrow(0, 0, b)?)?, r_post.with_tokens(out.narrow(0, b, b)?)?))
    }
}
