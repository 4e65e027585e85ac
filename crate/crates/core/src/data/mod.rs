//! Dataset construction: labeling, tiling, augmentation, synthetic pairs,
//! raster I/O and manifests.

pub mod augment;
pub mod dataset;
pub mod labeling;
pub mod manifest;
mod pair;
pub mod raster;
pub mod synth;
pub mod tiling;

pub use augment::{augment, Transform};
pub use dataset::{load_split, scale_pair, scene_range, synth_dataset, synth_generate};
pub use labeling::{
    diff_flood_label, label_pair, morphological_refine, threshold_water_mask, FloodLabel, LabelingConfig, MorphOp,
};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use pair::{image_to_tensor, stack_batch, Batch, MultiTemporalPair};
pub use synth::{synth_scene, synth_scenes, SynthConfig, SynthScene};
pub use tiling::{mosaic, tile, Tile};
