//! Synthetic SAR-like flood pairs with exactly known change labels.
//!
//! Each pair shares a smooth land texture. Water regions are unions of
//! Gaussian bumps thresholded at one half; some are permanent (dark on both
//! dates) and the rest are flooding (dark only after the event). Speckle is
//! multiplicative gamma noise in linear power, drawn independently for
//! every image.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::config::DOWNSAMPLE;
use crate::data::MultiTemporalPair;
use crate::determinism::derive_seed;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_pairs: usize,
    /// Side length in pixels, a multiple of 32.
    pub size: usize,
    pub channels: usize,
    pub speckle: bool,
    pub speckle_looks: u32,
    pub n_blobs: usize,
    /// Gaussian bump width as a fraction of `size`.
    pub blob_scale: f64,
    pub permanent_water_fraction: f64,
    pub land_db: f64,
    /// Amplitude of the land texture in dB.
    pub land_texture_db: f64,
    pub water_db: f64,
    pub water_texture_db: f64,
    /// Second-band offset in dB (cross-polarized returns are weaker).
    pub band_offset_db: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pairs: 16,
            size: 64,
            channels: 1,
            speckle: true,
            speckle_looks: 4,
            n_blobs: 4,
            blob_scale: 0.15,
            permanent_water_fraction: 0.3,
            land_db: -8.0,
            land_texture_db: 2.5,
            water_db: -26.0,
            water_texture_db: 1.0,
            band_offset_db: -6.0,
            val_fraction: 0.2,
            test_fraction: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.size == 0 || self.size % DOWNSAMPLE[3] != 0 {
            return err(format!("synthetic size {} is not a positive multiple of {}", self.size, DOWNSAMPLE[3]));
        }
        if !(1..=2).contains(&self.channels) {
            return err(format!("channels must be 1 or 2, got {}", self.channels));
        }
        if self.speckle && self.speckle_looks == 0 {
            return err("speckle_looks must be positive".into());
        }
        if !(self.blob_scale > 0.0) {
            return err(format!("blob_scale must be positive, got {}", self.blob_scale));
        }
        if !(0.0..=1.0).contains(&self.permanent_water_fraction) {
            return err(format!("permanent_water_fraction must lie in [0, 1], got {}", self.permanent_water_fraction));
        }
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && self.val_fraction + self.test_fraction <= 1.0) {
            return err("val_fraction and test_fraction must be non-negative and sum to at most 1".into());
        }
        Ok(())
    }

    /// Number of pairs in (train, val, test); held-out pairs come last.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let val = (self.val_fraction * self.n_pairs as f64).round() as usize;
        let test = ((self.test_fraction * self.n_pairs as f64).round() as usize).min(self.n_pairs - val.min(self.n_pairs));
        let val = val.min(self.n_pairs);
        (self.n_pairs - val - test, val, test)
    }
}

/// One generated pair in dB with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    /// Backscatter in dB; `label` is the injected flood region.
    pub pair: MultiTemporalPair,
    pub permanent: Array2<u8>,
}

/// Smooth field in `[-1, 1]` built from a few low-frequency plane waves.
fn smooth_field(size: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..8)
        .map(|_| {
            (rng.random_range(0.2..1.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.0).sum();
    let n = size as f64;
    Array2::from_shape_fn((size, size), |(r, c)| {
        waves.iter().map(|&(a, u, v, ph)| a * (2.0 * PI * (u * r as f64 + v * c as f64) / n + ph).cos()).sum::<f64>() / norm
    })
}

fn blob(size: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<u8> {
    let n = size as f64;
    let (cy, cx) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
    let bumps: Vec<(f64, f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| {
            let sigma = scale * n * rng.random_range(0.6..1.4);
            let jitter = Normal::new(0.0, sigma).expect("positive sigma");
            (cy + jitter.sample(rng), cx + jitter.sample(rng), sigma)
        })
        .collect();
    Array2::from_shape_fn((size, size), |(r, c)| {
        let f: f64 = bumps
            .iter()
            .map(|&(y, x, s)| (-((r as f64 - y).powi(2) + (c as f64 - x).powi(2)) / (2.0 * s * s)).exp())
            .sum();
        u8::from(f > 0.5)
    })
}

/// Generate pair `index` of the dataset described by `cfg`.
pub fn synth_scene(cfg: &SynthConfig, index: usize) -> Result<SynthScene> {
    cfg.validate()?;
    let n = cfg.size;
    let stream = |name: &str| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("pair{index}/{name}")));
    let mut rng = stream("texture");
    let land = smooth_field(n, &mut rng);
    let water_tex = smooth_field(n, &mut rng);

    let mut rng = stream("blobs");
    let mut flood_any = Array2::<u8>::zeros((n, n));
    let mut permanent = Array2::<u8>::zeros((n, n));
    for _ in 0..cfg.n_blobs {
        let permanent_blob = rng.random::<f64>() < cfg.permanent_water_fraction;
        let b = blob(n, cfg.blob_scale, &mut rng);
        let dst = if permanent_blob { &mut permanent } else { &mut flood_any };
        dst.zip_mut_with(&b, |d, &v| *d |= v);
    }
    let flood = Array2::from_shape_fn((n, n), |ix| u8::from(flood_any[ix] == 1 && permanent[ix] == 0));

    let render = |water: &Array2<u8>, name: &str| -> Result<Array3<f32>> {
        let mut rng = stream(name);
        let gamma = if cfg.speckle {
            let l = cfg.speckle_looks as f64;
            Some(Gamma::new(l, 1.0 / l).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        let mut img = Array3::<f32>::zeros((n, n, cfg.channels));
        for ((r, c, k), v) in img.indexed_iter_mut() {
            let base = if water[[r, c]] == 1 {
                cfg.water_db + cfg.water_texture_db * water_tex[[r, c]]
            } else {
                cfg.land_db + cfg.land_texture_db * land[[r, c]]
            } + cfg.band_offset_db * k as f64;
            let db = match &gamma {
                Some(g) => base + 10.0 * g.sample(&mut rng).log10(),
                None => base,
            };
            *v = db as f32;
        }
        Ok(img)
    };
    let post_water = Array2::from_shape_fn((n, n), |ix| flood_any[ix] | permanent[ix]);
    let pre = render(&permanent, "pre")?;
    let post = render(&post_water, "post")?;
    Ok(SynthScene { pair: MultiTemporalPair::new(pre, post, Some(flood))?, permanent })
}

/// All pairs of `cfg`, in dB.
pub fn synth_scenes(cfg: &SynthConfig) -> Result<Vec<SynthScene>> {
    use rayon::prelude::*;
    (0..cfg.n_pairs).into_par_iter().map(|i| synth_scene(cfg, i)).collect()
}
