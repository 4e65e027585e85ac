use std::path::{Path, PathBuf};

use damnet::checkpoint;
use damnet::data::dataset::{load_nonempty_split, write_scene_patches};
use damnet::data::manifest::MANIFEST_FILE;
use damnet::data::raster::{read_mask, read_raster, write_mask, write_probability};
use damnet::data::{
    label_pair, scale_pair, scene_range, synth_generate, DatasetManifest, LabelingConfig, MultiTemporalPair, Split,
    SynthConfig,
};
use damnet::gradcheck::gradcheck as run_gradcheck;
use damnet::inference::{area_stats, map_large_scene, TileScheme, DEFAULT_PIXEL_AREA_M2};
use damnet::metrics::{accumulate, compute, ConfusionCounts, MetricsReport};
use damnet::train::{evaluate, predict as predict_pairs, train as run_train};
use damnet::{Device, Error, Result};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::resolve::{finish, flatten, load_config, overlay, render, take, take_gradcheck, take_model, take_train, Table};
use crate::{
    EvalArgs, GradcheckArgs, LabelArgs, MapArgs, PredictArgs, SynthArgs, TileArgs, TrainArgs, EXIT_CHECK_FAILED,
};

fn layered(config: Option<&str>, flags: &impl Serialize) -> Result<Table> {
    overlay(load_config(config)?, flags)
}

fn log_resolved(parts: Vec<Value>, seed: Option<u64>) {
    log::info!("resolved config:\n{}", render(&flatten(parts)));
    if let Some(s) = seed {
        log::info!("seed: {s}");
    }
}

fn json(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn default_split() -> Split {
    Split::Test
}

fn default_threshold() -> f64 {
    0.5
}

fn default_batch() -> usize {
    4
}

fn cpu() -> Device {
    Device::Cpu
}

fn band(img: &ndarray::Array3<f32>, band: usize, path: &Path) -> Result<ndarray::Array2<f32>> {
    if band >= img.dim().2 {
        return Err(Error::Data(format!("{} has {} bands, band {band} requested", path.display(), img.dim().2)));
    }
    Ok(img.index_axis(Axis(2), band).to_owned())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthRun {
    data_root: PathBuf,
}

pub fn synth(a: SynthArgs) -> Result<u8> {
    let mut t = layered(a.config.config.as_deref(), &a)?;
    let cfg = take(SynthConfig::default(), &mut t)?;
    let run: SynthRun = finish(t)?;
    log_resolved(vec![json(&run), json(&cfg)], Some(cfg.seed));
    let manifest = synth_generate(&cfg, &run.data_root)?;
    for s in Split::ALL {
        println!("{s}: {} patches", manifest.split(s).count());
    }
    println!("manifest: {}", run.data_root.join(MANIFEST_FILE).display());
    Ok(0)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRun {
    pre: PathBuf,
    post: PathBuf,
    out: PathBuf,
    permanent_out: Option<PathBuf>,
    #[serde(default)]
    band: usize,
}

pub fn label(a: LabelArgs) -> Result<u8> {
    let mut t = layered(a.config.config.as_deref(), &a)?;
    let cfg = take(LabelingConfig::default(), &mut t)?;
    let run: LabelRun = finish(t)?;
    log_resolved(vec![json(&run), json(&cfg)], None);
    let (pre, geo) = read_raster(&run.pre)?;
    let (post, _) = read_raster(&run.post)?;
    let fl = label_pair(band(&pre, run.band, &run.pre)?.view(), band(&post, run.band, &run.post)?.view(), &cfg)?;
    write_mask(&run.out, fl.flood.view(), Some(&geo))?;
    if let Some(p) = &run.permanent_out {
        write_mask(p, fl.permanent.view(), Some(&geo))?;
    }
    let n = fl.flood.iter().filter(|&&v| v != 0).count();
    println!("flooded_pixels = {n}");
    Ok(0)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TileRun {
    pre: PathBuf,
    post: PathBuf,
    label: Option<PathBuf>,
    data_root: PathBuf,
    event_id: String,
    #[serde(default = "train_split")]
    split: Split,
    #[serde(default = "default_patch")]
    patch_size: usize,
    #[serde(default)]
    band: usize,
}

fn train_split() -> Split {
    Split::Train
}

fn default_patch() -> usize {
    256
}

pub fn tile(a: TileArgs) -> Result<u8> {
    let mut t = layered(a.config.config.as_deref(), &a)?;
    let cfg = take(LabelingConfig::default(), &mut t)?;
    let run: TileRun = finish(t)?;
    log_resolved(vec![json(&run), json(&cfg)], None);
    let (pre, geo) = read_raster(&run.pre)?;
    let (post, _) = read_raster(&run.post)?;
    let label = match &run.label {
        Some(p) => read_mask(p)?,
        None => label_pair(band(&pre, run.band, &run.pre)?.view(), band(&post, run.band, &run.post)?.view(), &cfg)?.flood,
    };
    let scene = MultiTemporalPair::new(pre, post, Some(label))?;
    let existing = if run.data_root.join(MANIFEST_FILE).exists() {
        Some(DatasetManifest::load(&run.data_root)?)
    } else {
        None
    };
    if let Some(old) = &existing {
        if old.patch_size != run.patch_size {
            return Err(Error::Data(format!(
                "dataset at {} uses patch size {}, not {}",
                run.data_root.display(),
                old.patch_size,
                run.patch_size
            )));
        }
        if old.entries.iter().any(|e| e.event_id == run.event_id) {
            return Err(Error::Data(format!("event {} is already in {}", run.event_id, run.data_root.display())));
        }
    }
    let mut entries = write_scene_patches(&run.data_root, &run.event_id, run.split, &scene, run.patch_size, Some(&geo))?;
    let added = entries.len();
    let manifest = match existing {
        Some(old) => {
            let mut all = old.entries;
            all.append(&mut entries);
            DatasetManifest::new(run.patch_size, all, old.source)?
        }
        None => DatasetManifest::new(run.patch_size, entries, serde_json::json!({ "generator": "tile" }))?,
    };
    manifest.save(&run.data_root)?;
    println!("{added} patches of event {} added to {}", run.event_id, run.split);
    Ok(0)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRun {
    data_root: PathBuf,
    out: PathBuf,
}

pub fn train(a: TrainArgs) -> Result<u8> {
    let mut t = layered(a.config.config.as_deref(), &a)?;
    let model_cfg = take_model(&mut t, "full")?;
    let cfg = take_train(&mut t)?;
    let run: TrainRun = finish(t)?;
    let resolved = render(&flatten(vec![json(&run), json(&model_cfg), json(&cfg)]));
    log_resolved(vec![json(&run), json(&model_cfg), json(&cfg)], Some(cfg.seed));

    let manifest = DatasetManifest::load(&run.data_root)?;
    let train_set = load_nonempty_split(&run.data_root, &manifest, Split::Train)?;
    let val_set = load_nonempty_split(&run.data_root, &manifest, Split::Val)?;
    if let Some(p) = train_set.first() {
        if p.channels() != model_cfg.in_channels {
            return Err(Error::Config(format!(
                "dataset has {} bands but in_channels = {}",
                p.channels(),
                model_cfg.in_channels
            )));
        }
    }
    std::fs::create_dir_all(&run.out)?;
    std::fs::write(run.out.join("config.toml"), &resolved)?;
    let model = damnet::DamNet::new(&model_cfg, damnet::DType::F32, &cpu())?;
    let outcome = run_train(&model, &train_set, &val_set, &cfg, |_| {})?;
    outcome.history.write_tsv(&run.out.join("history.tsv"))?;
    let ckpt = run.out.join("best.safetensors");
    checkpoint::save(&model, &ckpt)?;
    match outcome.best_epoch {
        Some(e) => println!("best epoch {e}, checkpoint {}", ckpt.display()),
        None => println!("no epoch had a defined F1, checkpoint {}", ckpt.display()),
    }
    Ok(0)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRun {
    pred: Option<PathBuf>,
    label: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    data_root: Option<PathBuf>,
    #[serde(default = "default_split")]
    split: Split,
    #[serde(default = "default_threshold")]
    threshold: f64,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default = "default_format")]
    format: String,
}

fn default_format() -> String {
    "table".into()
}

const MASK_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];
const PROBABILITY_SUFFIX: &str = "_prob";

fn mask_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|x| x.to_str()).is_some_and(|x| MASK_EXTENSIONS.contains(&x)))
        // probability rasters written next to the masks by `predict`
        .filter(|p| !p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.ends_with(PROBABILITY_SUFFIX)))
        .collect();
    files.sort();
    Ok(files)
}

/// Confusion counts of every mask in `pred` against the mask with the same
/// stem in `label`.
fn score_directories(pred: &Path, label: &Path) -> Result<ConfusionCounts> {
    let files = mask_files(pred)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no masks in {}", pred.display())));
    }
    let mut counts = ConfusionCounts::default();
    for f in files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let reference = MASK_EXTENSIONS
            .iter()
            .map(|x| label.join(format!("{stem}.{x}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Data(format!("no reference mask for {stem} in {}", label.display())))?;
        counts = accumulate(read_mask(&f)?.view(), read_mask(&reference)?.view(), counts)?;
    }
    Ok(counts)
}

fn print_report(report: &MetricsReport, format: &str) -> Result<()> {
    match format {
        "table" => {
            println!("{}", MetricsReport::table_header());
            println!("{}", report.table_row());
        }
        "json" => println!("{}", report.to_json()),
        "kv" => print!("{}", report.to_key_value()),
        o => return Err(Error::Config(format!("unknown format `{o}` (expected table, json or kv)"))),
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<u8> {
    let t = layered(a.config.config.as_deref(), &a)?;
    let run: EvalRun = finish(t)?;
    log_resolved(vec![json(&run)], None);
    let report = match (&run.pred, &run.label, &run.checkpoint, &run.data_root) {
        (Some(p), Some(l), None, _) => compute(&score_directories(p, l)?)?,
        (None, None, Some(c), Some(root)) => {
            let model = checkpoint::load(c, &cpu())?;
            let manifest = DatasetManifest::load(root)?;
            let pairs = load_nonempty_split(root, &manifest, run.split)?;
            evaluate(&model, &pairs, run.batch_size, run.threshold)?
        }
        _ => {
            return Err(Error::Config(
                "eval needs either --pred and --label, or --checkpoint and --data-root".into(),
            ))
        }
    };
    print_report(&report, &run.format)?;
    Ok(0)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRun {
    checkpoint: PathBuf,
    data_root: PathBuf,
    out: PathBuf,
    #[serde(default = "default_split")]
    split: Split,
    #[serde(default = "default_threshold")]
    threshold: f64,
    #[serde(default = "default_batch")]
    batch_size: usize,
}

pub fn predict(a: PredictArgs) -> Result<u8> {
    let t = layered(a.config.config.as_deref(), &a)?;
    let run: PredictRun = finish(t)?;
    log_resolved(vec![json(&run)], None);
    let model = checkpoint::load(&run.checkpoint, &cpu())?;
    let manifest = DatasetManifest::load(&run.data_root)?;
    let entries: Vec<_> = manifest.split(run.split).collect();
    let pairs = load_nonempty_split(&run.data_root, &manifest, run.split)?;
    std::fs::create_dir_all(&run.out)?;
    let mut counts = ConfusionCounts::default();
    for (chunk, batch) in pairs.chunks(run.batch_size.max(1)).zip(entries.chunks(run.batch_size.max(1))) {
        for ((probs, pair), entry) in predict_pairs(&model, chunk, run.batch_size)?.iter().zip(chunk).zip(batch) {
            let stem = entry.label.file_stem().and_then(|s| s.to_str()).unwrap_or("patch").to_string();
            let mask = probs.binarize(run.threshold)?;
            write_probability(&run.out.join(format!("{stem}{PROBABILITY_SUFFIX}.tif")), probs.view(), None)?;
            write_mask(&run.out.join(format!("{stem}.png")), mask.view(), None)?;
            counts = accumulate(mask.view(), pair.label_required()?.view(), counts)?;
        }
    }
    println!("{} maps written to {}", pairs.len(), run.out.display());
    print_report(&compute(&counts)?, "table")?;
    Ok(0)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapRun {
    checkpoint: PathBuf,
    pre: PathBuf,
    post: PathBuf,
    out: PathBuf,
    mask_out: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    threshold: f64,
    #[serde(default = "default_area")]
    pixel_area_m2: f64,
}

fn default_area() -> f64 {
    DEFAULT_PIXEL_AREA_M2
}

pub fn map(a: MapArgs) -> Result<u8> {
    let mut t = layered(a.config.config.as_deref(), &a)?;
    let scheme = take(TileScheme::default(), &mut t)?;
    scheme.validate()?;
    let run: MapRun = finish(t)?;
    log_resolved(vec![json(&run), json(&scheme)], None);
    let model = checkpoint::load(&run.checkpoint, &cpu())?;
    let (pre, geo) = read_raster(&run.pre)?;
    let (post, _) = read_raster(&run.post)?;
    let scene = MultiTemporalPair::new(pre, post, None)?;
    let scene = scale_pair(&scene, scene_range(&scene))?;
    let probs = map_large_scene(&model, &scene, &scheme)?;
    write_probability(&run.out, probs.view(), Some(&geo))?;
    let mask = probs.binarize(run.threshold)?;
    if let Some(p) = &run.mask_out {
        write_mask(p, mask.view(), Some(&geo))?;
    }
    print!("{}", area_stats(mask.view(), run.pixel_area_m2).to_key_value());
    Ok(0)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<u8> {
    let mut t = layered(a.config.config.as_deref(), &a)?;
    let model_cfg = take_model(&mut t, "tiny")?;
    let cfg = take_gradcheck(&mut t)?;
    if let Some(k) = t.keys().next() {
        return Err(Error::Config(format!("unknown config key `{k}`")));
    }
    log_resolved(vec![json(&model_cfg), json(&cfg)], Some(cfg.seed));
    let report = run_gradcheck(&model_cfg, &cfg)?;
    println!("{:<14} {:>8} {:>8} {:>12}", "group", "size", "checked", "max_rel_err");
    for g in &report.groups {
        println!("{:<14} {:>8} {:>8} {:>12.3e}", g.group, g.size, g.checked, g.max_rel_error);
    }
    let verdict = if report.passed() { "pass" } else { "fail" };
    println!("max relative error {:.3e} (tolerance {:.1e}): {verdict}", report.max_rel_error, report.tolerance);
    Ok(if report.passed() { 0 } else { EXIT_CHECK_FAILED })
}
