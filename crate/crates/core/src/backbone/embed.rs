//! Convolutional pieces of a stage: overlapping embedding, pyramid
//! reduction and the parallel convolutional (local context) module.

use candle_core::Tensor;

use crate::config::StageConfig;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, Mode, Scope};
use crate::tokens::FeatureMap;

/// Strided convolution that halves the grid while overlapping neighbouring
/// receptive fields. With `use_oel = false` it degrades to a non-overlapping
/// 2x2 patch split.
#[derive(Clone)]
pub struct OverlapEmbed {
    pub conv: Conv2d,
}

impl OverlapEmbed {
    pub fn new(scope: &Scope, cfg: &StageConfig) -> Result<Self> {
        let spec = ConvSpec::new(cfg.oel_kernel, cfg.oel_stride, cfg.oel_pad);
        Ok(Self { conv: Conv2d::new(&scope.pp("conv"), cfg.in_channels, cfg.dim, spec, true)? })
    }

    pub fn output_grid(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let s = self.conv.spec();
        Some((s.output_len(h)?, s.output_len(w)?))
    }

    pub fn forward(&self, inp: &FeatureMap) -> Result<FeatureMap> {
        let (h, w) = inp.grid();
        let stride = self.conv.spec().stride;
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Shape(format!(
                "embedding input {h}x{w} is not divisible by the stride {stride}"
            )));
        }
        let out = self.conv.forward(inp.tensor())?;
        let (_, _, oh, ow) = out.dims4()?;
        if (oh, ow) != (h / stride, w / stride) {
            return Err(Error::Shape(format!(
                "embedding maps {h}x{w} to {oh}x{ow}, expected {}x{}",
                h / stride,
                w / stride
            )));
        }
        Ok(FeatureMap(out))
    }
}

/// Parallel dilated convolutions whose outputs are concatenated along the
/// channel axis, followed by GELU.
#[derive(Clone)]
pub struct PyramidReduction {
    pub branches: Vec<Conv2d>,
}

impl PyramidReduction {
    pub fn new(scope: &Scope, cfg: &StageConfig) -> Result<Self> {
        let per_branch = cfg.dim / cfg.prm_rates.len();
        let branches = cfg
            .prm_rates
            .iter()
            .enumerate()
            .map(|(i, &rate)| {
                let spec = ConvSpec::new(3, cfg.prm_stride, rate).dilated(rate);
                Conv2d::new(&scope.pp(format!("branch{i}")), cfg.dim, per_branch, spec, true)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { branches })
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let outs = self.branches.iter().map(|b| b.forward(x.tensor())).collect::<Result<Vec<_>>>()?;
        Ok(FeatureMap(Tensor::cat(&outs, 1)?.gelu()?))
    }
}

/// Three 3x3 convolutions with batch norm + SiLU between them.
#[derive(Clone)]
pub struct ParallelConv {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub conv3: Conv2d,
}

impl ParallelConv {
    pub fn new(
        scope: &Scope,
        in_ch: usize,
        dim: usize,
        strides: [usize; 3],
        bn_eps: f64,
        bn_momentum: f64,
    ) -> Result<Self> {
        let spec = |s| ConvSpec::new(3, s, 1);
        Ok(Self {
            conv1: Conv2d::new(&scope.pp("conv1"), in_ch, dim, spec(strides[0]), true)?,
            bn1: BatchNorm2d::new(&scope.pp("bn1"), dim, bn_eps, bn_momentum)?,
            conv2: Conv2d::new(&scope.pp("conv2"), dim, dim, spec(strides[1]), true)?,
            bn2: BatchNorm2d::new(&scope.pp("bn2"), dim, bn_eps, bn_momentum)?,
            conv3: Conv2d::new(&scope.pp("conv3"), dim, dim, spec(strides[2]), true)?,
        })
    }

    pub fn forward(&self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let h = self.bn1.forward(&self.conv1.forward(x.tensor())?, mode)?.silu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?.silu()?;
        Ok(FeatureMap(self.conv3.forward(&h)?))
    }
}
