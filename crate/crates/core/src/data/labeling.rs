//! Semi-automatic flood labels from a pair of calibrated backscatter images.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphOp {
    Erode,
    Dilate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelingConfig {
    /// Water where backscatter is below this value, in dB.
    pub threshold_db: f64,
    pub morph_radius: usize,
    pub morph_ops: Vec<MorphOp>,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self { threshold_db: -18.0, morph_radius: 2, morph_ops: vec![MorphOp::Erode, MorphOp::Dilate] }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold_db.is_finite() {
            return Err(Error::Config(format!("threshold_db must be finite, got {}", self.threshold_db)));
        }
        if self.morph_radius == 0 {
            return Err(Error::Config("morph_radius must be at least 1".into()));
        }
        Ok(())
    }
}

/// Flood and permanent-water masks derived from two water masks.
#[derive(Debug, Clone, PartialEq)]
pub struct FloodLabel {
    pub flood: Array2<u8>,
    pub permanent: Array2<u8>,
}

/// `10 log10(x)`
pub fn linear_to_db(x: f32) -> f32 {
    10.0 * x.log10()
}

pub fn db_to_linear(db: f32) -> f32 {
    10f32.powf(db / 10.0)
}

/// 1 where `sar_db < threshold_db`. Non-finite pixels are an error.
pub fn threshold_water_mask(sar_db: ArrayView2<'_, f32>, cfg: &LabelingConfig) -> Result<Array2<u8>> {
    let bad = sar_db.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::Data(format!("{bad} non-finite backscatter pixels")));
    }
    let t = cfg.threshold_db;
    Ok(sar_db.mapv(|v| u8::from((v as f64) < t)))
}

/// Offsets `(dr, dc)` of a disk of the given radius.
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if dr * dr + dc * dc <= r * r {
                out.push((dr, dc));
            }
        }
    }
    out
}

// Offsets falling outside the image are skipped, so the border neither
// erodes nor dilates the mask.
fn morph(mask: ArrayView2<'_, u8>, radius: usize, keep_if_all: bool) -> Array2<u8> {
    let (h, w) = mask.dim();
    let se = disk(radius);
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut inside = se.iter().filter_map(|&(dr, dc)| {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            (rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w).then(|| mask[[rr as usize, cc as usize]] != 0)
        });
        u8::from(if keep_if_all { inside.all(|v| v) } else { inside.any(|v| v) })
    })
}

pub fn erode(mask: ArrayView2<'_, u8>, radius: usize) -> Array2<u8> {
    morph(mask, radius, true)
}

pub fn dilate(mask: ArrayView2<'_, u8>, radius: usize) -> Array2<u8> {
    morph(mask, radius, false)
}

/// Apply `cfg.morph_ops` in order with a disk of `cfg.morph_radius`.
pub fn morphological_refine(mask: ArrayView2<'_, u8>, cfg: &LabelingConfig) -> Array2<u8> {
    let mut m = mask.to_owned();
    for op in &cfg.morph_ops {
        m = match op {
            MorphOp::Erode => erode(m.view(), cfg.morph_radius),
            MorphOp::Dilate => dilate(m.view(), cfg.morph_radius),
        };
    }
    m
}

/// Flood is new water (`post & !pre`); permanent water is `pre & post`.
pub fn diff_flood_label(mask_pre: ArrayView2<'_, u8>, mask_post: ArrayView2<'_, u8>) -> Result<FloodLabel> {
    if mask_pre.dim() != mask_post.dim() {
        return Err(Error::Shape(format!("pre mask {:?} vs post mask {:?}", mask_pre.dim(), mask_post.dim())));
    }
    let flood = Zip::from(&mask_pre).and(&mask_post).map_collect(|&a, &b| u8::from(b != 0 && a == 0));
    let permanent = Zip::from(&mask_pre).and(&mask_post).map_collect(|&a, &b| u8::from(b != 0 && a != 0));
    Ok(FloodLabel { flood, permanent })
}

/// Threshold, refine and difference two single-band dB images.
pub fn label_pair(pre_db: ArrayView2<'_, f32>, post_db: ArrayView2<'_, f32>, cfg: &LabelingConfig) -> Result<FloodLabel> {
    cfg.validate()?;
    let pre = morphological_refine(threshold_water_mask(pre_db, cfg)?.view(), cfg);
    let post = morphological_refine(threshold_water_mask(post_db, cfg)?.view(), cfg);
    diff_flood_label(pre.view(), post.view())
}
