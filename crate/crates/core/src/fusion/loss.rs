//! Training objective: per-pixel contrastive loss plus soft dice loss.

use candle_core::{DType, Device, Tensor};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{check_binary, mask_to_tensor, ProbabilityMap};

/// Smoothing constant added to the dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// `1/2 [(1-y) p^2 + y max(m - p, 0)^2]`
    StandardHinge,
    /// `1/2 [(1-y) p^2 + y max(p - m, 0)^2]`. Its change term vanishes for
    /// `m = 1`.
    Overshoot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
    pub contrastive_form: ContrastiveForm,
    pub binarize_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { margin: 1.0, lambda: 0.4, contrastive_form: ContrastiveForm::StandardHinge, binarize_threshold: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config(format!("binarize_threshold must lie in (0, 1), got {}", self.binarize_threshold)));
        }
        Ok(())
    }
}

fn check_pair(probs: &Tensor, label: &Tensor) -> Result<()> {
    if probs.dims() != label.dims() {
        return Err(Error::Shape(format!("probabilities {:?} vs label {:?}", probs.dims(), label.dims())));
    }
    let off = (label * (1.0 - label)?)?.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if off != 0.0 {
        return Err(Error::Data("label values must be 0 or 1".into()));
    }
    Ok(())
}

/// Mean over pixels of the per-pixel contrastive term. `probs` and `label`
/// share any shape; `label` holds 0/1 values.
pub fn contrastive_loss(probs: &Tensor, label: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    check_pair(probs, label)?;
    let unchanged = ((1.0 - label)? * probs.sqr()?)?;
    let gap = match cfg.contrastive_form {
        ContrastiveForm::StandardHinge => probs.affine(-1.0, cfg.margin)?.relu()?,
        ContrastiveForm::Overshoot => probs.affine(1.0, -cfg.margin)?.relu()?,
    };
    let changed = (label * gap.sqr()?)?;
    Ok(((unchanged + changed)?.mean_all()? * 0.5)?)
}

/// Soft dice loss `1 - (2 sum(p y) + 1) / (sum p + sum y + 1)` computed per
/// batch item (leading axis) and averaged.
pub fn dice_loss(probs: &Tensor, label: &Tensor) -> Result<Tensor> {
    check_pair(probs, label)?;
    let b = probs.dims()[0];
    let p = probs.reshape((b, ()))?;
    let y = label.reshape((b, ()))?;
    let inter = (&p * &y)?.sum(1)?;
    let num = ((inter * 2.0)? + DICE_SMOOTH)?;
    let den = ((p.sum(1)? + y.sum(1)?)? + DICE_SMOOTH)?;
    Ok((1.0 - (num / den)?)?.mean_all()?)
}

/// `L_con + lambda * L_dice`.
pub fn total_loss(probs: &Tensor, label: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let con = contrastive_loss(probs, label, cfg)?;
    if cfg.lambda == 0.0 {
        return Ok(con);
    }
    Ok((con + (dice_loss(probs, label)? * cfg.lambda)?)?)
}

fn map_pair(probs: &ProbabilityMap, label: ArrayView2<'_, u8>) -> Result<(Tensor, Tensor)> {
    if probs.dim() != label.dim() {
        return Err(Error::Shape(format!("probabilities {:?} vs label {:?}", probs.dim(), label.dim())));
    }
    check_binary(label)?;
    let dev = Device::Cpu;
    Ok((probs.to_tensor(DType::F64, &dev)?, mask_to_tensor(label, DType::F64, &dev)?))
}

fn scalar(t: Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// [`contrastive_loss`] on a single probability map.
pub fn contrastive_loss_map(probs: &ProbabilityMap, label: ArrayView2<'_, u8>, cfg: &LossConfig) -> Result<f64> {
    let (p, y) = map_pair(probs, label)?;
    scalar(contrastive_loss(&p, &y, cfg)?)
}

/// [`dice_loss`] on a single probability map.
pub fn dice_loss_map(probs: &ProbabilityMap, label: ArrayView2<'_, u8>) -> Result<f64> {
    let (p, y) = map_pair(probs, label)?;
    scalar(dice_loss(&p, &y)?)
}

/// [`total_loss`] on a single probability map.
pub fn total_loss_map(probs: &ProbabilityMap, label: ArrayView2<'_, u8>, cfg: &LossConfig) -> Result<f64> {
    let (p, y) = map_pair(probs, label)?;
    scalar(total_loss(&p, &y, cfg)?)
}
