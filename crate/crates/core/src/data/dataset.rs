//! Writing patch datasets to disk and reading them back for training.

use std::path::Path;

use ndarray::Array3;
use rayon::prelude::*;

use crate::data::manifest::{entry_paths, DatasetManifest, ManifestEntry, Split};
use crate::data::raster::{read_mask, read_raster, write_mask, write_raster, GeoTags};
use crate::data::synth::{synth_scenes, SynthConfig};
use crate::data::tiling::tile;
use crate::data::MultiTemporalPair;
use crate::error::{Error, Result};

/// Joint `(min, max)` over both dates and all bands.
pub fn scene_range(pair: &MultiTemporalPair) -> (f32, f32) {
    pair.pre.iter().chain(pair.post.iter()).fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn scale(a: &Array3<f32>, (lo, hi): (f32, f32)) -> Array3<f32> {
    let span = hi - lo;
    if span > 0.0 {
        a.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0))
    } else {
        a.mapv(|_| 0.0)
    }
}

/// Map both dates linearly from `range` to `[0, 1]`.
pub fn scale_pair(pair: &MultiTemporalPair, range: (f32, f32)) -> Result<MultiTemporalPair> {
    MultiTemporalPair::new(scale(&pair.pre, range), scale(&pair.post, range), pair.label.clone())
}

/// Inverse of [`scale_pair`] for values inside the range.
pub fn unscale_pair(pair: &MultiTemporalPair, (lo, hi): (f32, f32)) -> Result<MultiTemporalPair> {
    let f = |a: &Array3<f32>| a.mapv(|v| lo + v * (hi - lo));
    MultiTemporalPair::new(f(&pair.pre), f(&pair.post), pair.label.clone())
}

/// Tile a labelled dB scene and write its patches under `root`.
pub fn write_scene_patches(
    root: &Path,
    event_id: &str,
    split: Split,
    scene_db: &MultiTemporalPair,
    patch_size: usize,
    geo: Option<&GeoTags>,
) -> Result<Vec<ManifestEntry>> {
    scene_db.label_required()?;
    let range = scene_range(scene_db);
    tile(scene_db, patch_size)?
        .into_iter()
        .map(|t| {
            let (pre, post, label) = entry_paths(split, event_id, t.origin);
            write_raster(&root.join(&pre), t.pair.pre.view(), geo)?;
            write_raster(&root.join(&post), t.pair.post.view(), geo)?;
            write_mask(&root.join(&label), t.pair.label_required()?.view(), None)?;
            Ok(ManifestEntry { pre, post, label, split, event_id: event_id.to_string(), origin: t.origin, scale: range })
        })
        .collect()
}

/// Generate a synthetic dataset on disk and write its manifest.
pub fn synth_generate(cfg: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let (n_train, n_val, _) = cfg.split_counts();
    let scenes = synth_scenes(cfg)?;
    let entries: Vec<Vec<ManifestEntry>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            write_scene_patches(root, &format!("synth{}-{i:04}", cfg.seed), split, &s.pair, cfg.size, None)
        })
        .collect::<Result<_>>()?;
    let source = serde_json::json!({ "generator": "synthetic", "config": cfg });
    let manifest = DatasetManifest::new(cfg.size, entries.into_iter().flatten().collect(), source)?;
    manifest.save(root)?;
    Ok(manifest)
}

/// In-memory synthetic dataset, scaled to `[0, 1]` per pair.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<MultiTemporalPair>> {
    synth_scenes(cfg)?.iter().map(|s| scale_pair(&s.pair, scene_range(&s.pair))).collect()
}

/// Read and scale one manifest entry.
pub fn load_entry(root: &Path, entry: &ManifestEntry) -> Result<MultiTemporalPair> {
    let (pre, _) = read_raster(&root.join(&entry.pre))?;
    let (post, _) = read_raster(&root.join(&entry.post))?;
    let label = read_mask(&root.join(&entry.label))?;
    scale_pair(&MultiTemporalPair::new(pre, post, Some(label))?, entry.scale)
}

pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<MultiTemporalPair>> {
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    entries.par_iter().map(|e| load_entry(root, e)).collect()
}

/// Load a split and fail when it is empty.
pub fn load_nonempty_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<MultiTemporalPair>> {
    let pairs = load_split(root, manifest, split)?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("split {split} of {} is empty", root.display())));
    }
    Ok(pairs)
}
