//! Sliding-window mapping of scenes larger than one network patch.

use std::f64::consts::PI;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::DOWNSAMPLE;
use crate::data::{image_to_tensor, MultiTemporalPair};
use crate::error::{Error, Result};
use crate::maps::ProbabilityMap;
use crate::model::DamNet;
use crate::nn::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Blend {
    /// Cosine ramps across the overlap, normalized to sum to one.
    Feather,
    /// Per-pixel maximum over the covering tiles.
    Max,
    /// Each pixel is taken from the tile whose centre region holds it.
    CenterCrop,
}

impl std::str::FromStr for Blend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feather" => Ok(Blend::Feather),
            "max" => Ok(Blend::Max),
            "center-crop" => Ok(Blend::CenterCrop),
            o => Err(Error::Config(format!("unknown blend `{o}` (expected feather, max or center-crop)"))),
        }
    }
}

/// Tile size, overlap and blend mode. Scenes are padded on the bottom and
/// right edges by reflection until the tiles cover them exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileScheme {
    pub tile: usize,
    pub overlap: usize,
    pub blend: Blend,
}

impl Default for TileScheme {
    fn default() -> Self {
        Self { tile: 256, overlap: 32, blend: Blend::Feather }
    }
}

impl TileScheme {
    pub fn validate(&self) -> Result<()> {
        let m = DOWNSAMPLE[3];
        if self.tile == 0 || self.tile % m != 0 {
            return Err(Error::Config(format!("tile {} is not a positive multiple of {m}", self.tile)));
        }
        if self.overlap >= self.tile {
            return Err(Error::Config(format!("overlap {} must be smaller than tile {}", self.overlap, self.tile)));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.tile - self.overlap
    }

    /// Padded length and tile starts along an axis of length `n`.
    pub fn axis_layout(&self, n: usize) -> (usize, Vec<usize>) {
        let stride = self.stride();
        let steps = if n <= self.tile { 0 } else { (n - self.tile).div_ceil(stride) };
        let starts: Vec<usize> = (0..=steps).map(|k| k * stride).collect();
        (self.tile + steps * stride, starts)
    }

    /// Weights of one tile along one axis, given which sides border
    /// another tile.
    fn axis_weights(&self, before: bool, after: bool) -> Vec<f64> {
        let (t, o) = (self.tile, self.overlap);
        match self.blend {
            Blend::Feather | Blend::Max => {
                let ramp = |i: usize| 0.5 * (1.0 - (PI * (i as f64 + 0.5) / o as f64).cos());
                (0..t)
                    .map(|i| {
                        let mut w = 1.0;
                        if before && i < o {
                            w *= ramp(i);
                        }
                        if after && i >= t - o {
                            w *= ramp(t - 1 - i);
                        }
                        w
                    })
                    .collect()
            }
            Blend::CenterCrop => {
                let lo = if before { o / 2 } else { 0 };
                let hi = if after { t - (o - o / 2) } else { t };
                (0..t).map(|i| if (lo..hi).contains(&i) { 1.0 } else { 0.0 }).collect()
            }
        }
    }
}

/// Reflect index `i` into `0..n` without repeating the edge sample,
/// folding as often as needed.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pad `[H, W, C]` on the bottom and right by reflection.
pub fn reflect_pad(img: ArrayView3<'_, f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((out_h, out_w, c), |(r, col, k)| img[[reflect_index(r, h), reflect_index(col, w), k]])
}

/// Anything that maps one tile to per-pixel change probabilities.
pub trait PatchPredictor: Sync {
    fn predict_patch(&self, patch: &MultiTemporalPair) -> Result<ProbabilityMap>;
}

impl PatchPredictor for DamNet {
    fn predict_patch(&self, patch: &MultiTemporalPair) -> Result<ProbabilityMap> {
        patch.check_model_input()?;
        let pre = image_to_tensor(patch.pre.view(), self.dtype(), self.device())?;
        let post = image_to_tensor(patch.post.view(), self.dtype(), self.device())?;
        let mut maps = ProbabilityMap::from_batch(&self.forward(&pre, &post, Mode::Eval)?)?;
        Ok(maps.remove(0))
    }
}

/// Sum over all tiles of the normalized blend weights at every pixel of an
/// `h x w` scene; equals one everywhere for the feather and centre-crop
/// modes.
pub fn blend_weight_sum(h: usize, w: usize, scheme: &TileScheme) -> Result<Array2<f64>> {
    scheme.validate()?;
    let (hp, rows) = scheme.axis_layout(h);
    let (wp, cols) = scheme.axis_layout(w);
    let raw = accumulate_weights(hp, wp, &rows, &cols, scheme);
    let mut total = Array2::<f64>::zeros((hp, wp));
    for (ri, &r) in rows.iter().enumerate() {
        for (ci, &c) in cols.iter().enumerate() {
            let tw = tile_weights(scheme, ri, rows.len(), ci, cols.len());
            let mut dst = total.slice_mut(s![r..r + scheme.tile, c..c + scheme.tile]);
            let norm = raw.slice(s![r..r + scheme.tile, c..c + scheme.tile]);
            ndarray::Zip::from(&mut dst).and(&tw).and(&norm).for_each(|d, &t, &n| *d += t / n);
        }
    }
    Ok(total.slice(s![..h, ..w]).to_owned())
}

fn tile_weights(scheme: &TileScheme, ri: usize, nr: usize, ci: usize, nc: usize) -> Array2<f64> {
    let wy = scheme.axis_weights(ri > 0, ri + 1 < nr);
    let wx = scheme.axis_weights(ci > 0, ci + 1 < nc);
    Array2::from_shape_fn((scheme.tile, scheme.tile), |(y, x)| wy[y] * wx[x])
}

fn accumulate_weights(hp: usize, wp: usize, rows: &[usize], cols: &[usize], scheme: &TileScheme) -> Array2<f64> {
    let mut acc = Array2::<f64>::zeros((hp, wp));
    for (ri, &r) in rows.iter().enumerate() {
        for (ci, &c) in cols.iter().enumerate() {
            let tw = tile_weights(scheme, ri, rows.len(), ci, cols.len());
            acc.slice_mut(s![r..r + scheme.tile, c..c + scheme.tile]).zip_mut_with(&tw, |a, &t| *a += t);
        }
    }
    acc
}

/// Predict a whole scene tile by tile and blend the tiles back together.
///
/// Tiles of one tile row are predicted in parallel; their results are
/// blended in tile order, so the output does not depend on scheduling.
pub fn map_large_scene(
    predictor: &impl PatchPredictor,
    scene: &MultiTemporalPair,
    scheme: &TileScheme,
) -> Result<ProbabilityMap> {
    scheme.validate()?;
    let (h, w, _) = scene.dim();
    let (hp, rows) = scheme.axis_layout(h);
    let (wp, cols) = scheme.axis_layout(w);
    let pre = reflect_pad(scene.pre.view(), hp, wp);
    let post = reflect_pad(scene.post.view(), hp, wp);
    let t = scheme.tile;

    let mut acc = Array2::<f64>::zeros((hp, wp));
    let mut wsum = Array2::<f64>::zeros((hp, wp));
    if scheme.blend == Blend::Max {
        acc.fill(f64::NEG_INFINITY);
    }
    for (ri, &r) in rows.iter().enumerate() {
        let preds: Vec<ProbabilityMap> = cols
            .par_iter()
            .map(|&c| {
                let win = s![r..r + t, c..c + t, ..];
                let patch = MultiTemporalPair::new(pre.slice(win).to_owned(), post.slice(win).to_owned(), None)?;
                let p = predictor.predict_patch(&patch)?;
                if p.dim() != (t, t) {
                    return Err(Error::Shape(format!("predictor returned {:?} for a {t}x{t} tile", p.dim())));
                }
                Ok(p)
            })
            .collect::<Result<_>>()?;
        for (ci, (&c, p)) in cols.iter().zip(&preds).enumerate() {
            let win = s![r..r + t, c..c + t];
            match scheme.blend {
                Blend::Max => acc.slice_mut(win).zip_mut_with(&p.view(), |a, &v| *a = a.max(v as f64)),
                Blend::Feather | Blend::CenterCrop => {
                    let tw = tile_weights(scheme, ri, rows.len(), ci, cols.len());
                    ndarray::Zip::from(acc.slice_mut(win)).and(&p.view()).and(&tw).for_each(|a, &v, &wt| *a += wt * v as f64);
                    wsum.slice_mut(win).zip_mut_with(&tw, |a, &wt| *a += wt);
                }
            }
        }
    }
    let out = match scheme.blend {
        Blend::Max => acc.slice(s![..h, ..w]).mapv(|v| v as f32),
        _ => ndarray::Zip::from(acc.slice(s![..h, ..w]))
            .and(wsum.slice(s![..h, ..w]))
            .map_collect(|&a, &n| ((a / n) as f32).clamp(0.0, 1.0)),
    };
    ProbabilityMap::new(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaReport {
    pub flooded_pixels: u64,
    pub pixel_area_m2: f64,
    pub flooded_km2: f64,
}

impl AreaReport {
    pub fn to_key_value(&self) -> String {
        format!(
            "flooded_pixels = {}\npixel_area_m2 = {}\nflooded_km2 = {}\n",
            self.flooded_pixels, self.pixel_area_m2, self.flooded_km2
        )
    }
}

/// Default ground area of one pixel at 10 m resolution.
pub const DEFAULT_PIXEL_AREA_M2: f64 = 100.0;

pub fn area_stats(mask: ArrayView2<'_, u8>, pixel_area_m2: f64) -> AreaReport {
    let flooded_pixels = mask.iter().filter(|&&v| v != 0).count() as u64;
    AreaReport { flooded_pixels, pixel_area_m2, flooded_km2: flooded_pixels as f64 * pixel_area_m2 / 1e6 }
}
