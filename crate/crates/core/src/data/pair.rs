use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::config::DOWNSAMPLE;
use crate::error::{Error, Result};
use crate::maps::check_binary;

/// Co-registered pre- and post-event images `[H, W, C]` with an optional
/// binary change label `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTemporalPair {
    pub pre: Array3<f32>,
    pub post: Array3<f32>,
    pub label: Option<Array2<u8>>,
}

impl MultiTemporalPair {
    pub fn new(pre: Array3<f32>, post: Array3<f32>, label: Option<Array2<u8>>) -> Result<Self> {
        if pre.dim() != post.dim() {
            return Err(Error::Shape(format!("pre {:?} and post {:?} differ", pre.dim(), post.dim())));
        }
        let (h, w, c) = pre.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("empty image {:?}", pre.dim())));
        }
        if let Some(l) = &label {
            if l.dim() != (h, w) {
                return Err(Error::Shape(format!("label {:?} does not match image {h}x{w}", l.dim())));
            }
            check_binary(l.view())?;
        }
        Ok(Self { pre, post, label })
    }

    /// `(H, W, C)`
    pub fn dim(&self) -> (usize, usize, usize) {
        self.pre.dim()
    }

    pub fn height(&self) -> usize {
        self.pre.dim().0
    }

    pub fn width(&self) -> usize {
        self.pre.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pre.dim().2
    }

    /// Check that the network can consume this pair directly.
    pub fn check_model_input(&self) -> Result<()> {
        let s = DOWNSAMPLE[3];
        let (h, w, _) = self.dim();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!("image {h}x{w} is not divisible by {s}")));
        }
        Ok(())
    }

    pub fn label_required(&self) -> Result<&Array2<u8>> {
        self.label.as_ref().ok_or_else(|| Error::Data("pair has no label".into()))
    }
}

/// `[H, W, C]` image to a `[1, C, H, W]` tensor.
pub fn image_to_tensor(img: ArrayView3<'_, f32>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w, c) = img.dim();
    let chw = img.permuted_axes([2, 0, 1]);
    let v: Vec<f32> = chw.iter().copied().collect();
    Ok(Tensor::from_vec(v, (1, c, h, w), device)?.to_dtype(dtype)?)
}

/// A stacked minibatch: `pre`, `post` are `[B, C, H, W]`, `label` is `[B, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pre: Tensor,
    pub post: Tensor,
    pub label: Option<Tensor>,
}

pub fn stack_batch(pairs: &[&MultiTemporalPair], dtype: DType, device: &Device) -> Result<Batch> {
    let first = pairs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let dim = first.dim();
    let mut pre = Vec::with_capacity(pairs.len());
    let mut post = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.dim() != dim {
            return Err(Error::Shape(format!("batch mixes sizes {:?} and {:?}", dim, p.dim())));
        }
        pre.push(image_to_tensor(p.pre.view(), dtype, device)?);
        post.push(image_to_tensor(p.post.view(), dtype, device)?);
        if let Some(l) = &p.label {
            labels.push(image_to_tensor(l.mapv(f32::from).insert_axis(Axis(2)).view(), dtype, device)?);
        }
    }
    let label = match labels.len() {
        0 => None,
        n if n == pairs.len() => Some(Tensor::cat(&labels, 0)?),
        _ => return Err(Error::Data("batch mixes labelled and unlabelled pairs".into())),
    };
    Ok(Batch { pre: Tensor::cat(&pre, 0)?, post: Tensor::cat(&post, 0)?, label })
}
