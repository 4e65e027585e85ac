//! Per-pixel probability maps and binary masks.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Binary raster with values in `{0, 1}`.
pub type BinaryMask = Array2<u8>;

/// Per-pixel change probability, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Array2<f32>);

impl ProbabilityMap {
    pub fn new(probs: Array2<f32>) -> Result<Self> {
        if let Some(v) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Data(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self(probs))
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn binarize(&self, threshold: f64) -> Result<BinaryMask> {
        binarize(self, threshold)
    }

    /// Split a `[B, 1, H, W]` probability tensor into one map per item.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Self>> {
        let (b, c, h, w) = t.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("expected one probability channel, got {c}")));
        }
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        flat.chunks(h * w)
            .take(b)
            .map(|chunk| {
                let a = Array2::from_shape_vec((h, w), chunk.to_vec()).expect("chunk size matches");
                Self::new(a)
            })
            .collect()
    }

    /// `[1, 1, H, W]` tensor of the probabilities.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.0.dim();
        let v: Vec<f32> = self.0.iter().copied().collect();
        Ok(Tensor::from_vec(v, (1, 1, h, w), device)?.to_dtype(dtype)?)
    }
}

/// Pixels with `p >= threshold` become 1.
pub fn binarize(probs: &ProbabilityMap, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("binarize threshold must lie in (0, 1), got {threshold}")));
    }
    Ok(probs.0.mapv(|p| u8::from(p as f64 >= threshold)))
}

pub fn check_binary(mask: ArrayView2<'_, u8>) -> Result<()> {
    match mask.iter().find(|v| **v > 1) {
        Some(v) => Err(Error::Data(format!("mask value {v} is not binary"))),
        None => Ok(()),
    }
}

/// `[1, 1, H, W]` tensor of a binary mask.
pub fn mask_to_tensor(mask: ArrayView2<'_, u8>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = mask.dim();
    let v: Vec<f32> = mask.iter().map(|&m| m as f32).collect();
    Ok(Tensor::from_vec(v, (1, 1, h, w), device)?.to_dtype(dtype)?)
}
