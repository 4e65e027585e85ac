//! `damnet` command-line entry point.

mod commands;
mod resolve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use damnet::ErrorKind;
use serde::Serialize;

/// Exit status when a check ran to completion but failed its tolerance.
pub const EXIT_CHECK_FAILED: u8 = 5;

#[derive(Parser)]
#[command(name = "damnet", version, about = "Bi-temporal SAR flood change detection")]
struct Cli {
    /// Single-threaded kernels and bit-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic SAR pair dataset with a manifest.
    Synth(SynthArgs),
    /// Derive a flood label from a pre/post dB raster pair.
    Label(LabelArgs),
    /// Cut a labelled scene into patches and add them to a dataset.
    Tile(TileArgs),
    /// Train a model on a dataset and keep the best checkpoint.
    Train(TrainArgs),
    /// Score predicted masks or a checkpoint against reference labels.
    Eval(EvalArgs),
    /// Write probability maps and masks for a dataset split.
    Predict(PredictArgs),
    /// Map a whole scene with overlapping tiles.
    Map(MapArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Serialize)]
struct ConfigArg {
    /// Flat TOML config file, or a model preset name (`full`, `tiny`).
    #[arg(long)]
    #[serde(skip)]
    config: Option<String>,
}

#[derive(Args, Serialize)]
struct ModelFlags {
    /// Model preset the architecture keys start from.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    in_channels: Option<usize>,
    #[arg(long, value_parser = parse_list)]
    dims: Option<::std::vec::Vec<usize>>,
    #[arg(long, value_parser = parse_list)]
    heads: Option<::std::vec::Vec<usize>>,
    #[arg(long)]
    ffn_ratio: Option<f64>,
    #[arg(long)]
    blocks_per_stage: Option<usize>,
    #[arg(long, value_parser = parse_list)]
    prm_rates: Option<::std::vec::Vec<usize>>,
    #[arg(long)]
    fuse_channels: Option<usize>,
    #[arg(long)]
    head_channels: Option<usize>,
    #[arg(long)]
    use_oel: Option<bool>,
    #[arg(long)]
    use_ctca_tace: Option<bool>,
    #[arg(long)]
    use_semantic_token: Option<bool>,
    #[arg(long)]
    class_token_std: Option<f64>,
    #[arg(long)]
    attn_norm_eps: Option<f64>,
    #[arg(long)]
    layer_norm_eps: Option<f64>,
    #[arg(long)]
    batch_norm_eps: Option<f64>,
    #[arg(long)]
    batch_norm_momentum: Option<f64>,
    #[arg(long)]
    init_seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct LossFlags {
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// `standard_hinge` or `overshoot`.
    #[arg(long)]
    contrastive_form: Option<String>,
    #[arg(long)]
    binarize_threshold: Option<f64>,
}

#[derive(Args, Serialize)]
struct SynthFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    speckle: Option<bool>,
    #[arg(long)]
    speckle_looks: Option<u32>,
    #[arg(long)]
    n_blobs: Option<usize>,
    #[arg(long)]
    blob_scale: Option<f64>,
    #[arg(long)]
    permanent_water_fraction: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    land_db: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    land_texture_db: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    water_db: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    water_texture_db: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    band_offset_db: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Args, Serialize)]
struct LabelingFlags {
    #[arg(long, allow_negative_numbers = true)]
    threshold_db: Option<f64>,
    #[arg(long)]
    morph_radius: Option<usize>,
    /// Comma-separated `erode` / `dilate` sequence, or `none`.
    #[arg(long, value_parser = parse_words)]
    morph_ops: Option<::std::vec::Vec<String>>,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[command(flatten)]
    #[serde(skip)]
    config: ConfigArg,
    /// Dataset directory.
    #[arg(long, env = "DAMNET_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    synth: SynthFlags,
}

#[derive(Args, Serialize)]
struct LabelArgs {
    #[command(flatten)]
    #[serde(skip)]
    config: ConfigArg,
    /// Pre-event backscatter raster in dB.
    #[arg(long)]
    pre: Option<PathBuf>,
    /// Post-event backscatter raster in dB.
    #[arg(long)]
    post: Option<PathBuf>,
    /// Output flood mask.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional output for the permanent-water mask.
    #[arg(long)]
    permanent_out: Option<PathBuf>,
    /// Band used for thresholding.
    #[arg(long)]
    band: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    labeling: LabelingFlags,
}

#[derive(Args, Serialize)]
struct TileArgs {
    #[command(flatten)]
    #[serde(skip)]
    config: ConfigArg,
    #[arg(long)]
    pre: Option<PathBuf>,
    #[arg(long)]
    post: Option<PathBuf>,
    /// Reference flood mask; derived by thresholding when absent.
    #[arg(long)]
    label: Option<PathBuf>,
    #[arg(long, env = "DAMNET_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[arg(long)]
    event_id: Option<String>,
    /// `train`, `val` or `test`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Band used for thresholding when the label is derived.
    #[arg(long)]
    band: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    labeling: LabelingFlags,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    config: ConfigArg,
    #[arg(long, env = "DAMNET_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// Run directory for the checkpoint, history and resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// `adamw` or `sgd`.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated milestone epochs, or `none`.
    #[arg(long, value_parser = parse_list)]
    decay_epochs: Option<::std::vec::Vec<usize>>,
    #[arg(long)]
    decay_factor: Option<f64>,
    /// `step` or `linear`.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    augment: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    loss: LossFlags,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelFlags,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    #[serde(skip)]
    config: ConfigArg,
    /// Directory of predicted masks.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Directory of reference masks with matching file stems.
    #[arg(long)]
    label: Option<PathBuf>,
    /// Evaluate this checkpoint on a dataset split instead.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "DAMNET_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `table`, `json` or `kv`.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    #[command(flatten)]
    #[serde(skip)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "DAMNET_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Serialize)]
struct MapArgs {
    #[command(flatten)]
    #[serde(skip)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Pre-event scene raster in dB.
    #[arg(long)]
    pre: Option<PathBuf>,
    /// Post-event scene raster in dB.
    #[arg(long)]
    post: Option<PathBuf>,
    /// Output probability raster.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output flood mask.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    pixel_area_m2: Option<f64>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    /// `feather`, `max` or `center-crop`.
    #[arg(long)]
    blend: Option<String>,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[command(flatten)]
    #[serde(skip)]
    config: ConfigArg,
    #[arg(long)]
    samples_per_group: Option<usize>,
    /// Central-difference step.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    loss: LossFlags,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelFlags,
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    parse_words(s)?.iter().map(|w| w.parse::<usize>().map_err(|e| format!("`{w}`: {e}"))).collect()
}

fn parse_words(s: &str) -> Result<Vec<String>, String> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    Ok(s.split(',').map(|w| w.trim().to_string()).collect())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Divergence => 4,
        ErrorKind::Other => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp_millis().init();
    if cli.deterministic {
        damnet::determinism::set_deterministic(true);
    }
    log::info!("deterministic mode: {}", cli.deterministic);
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Label(a) => commands::label(a),
        Command::Tile(a) => commands::tile(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Map(a) => commands::map(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
