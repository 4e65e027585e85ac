//! Single-file model archive: named parameter arrays plus the config text.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::DamNet;

const HEADER_KEY: &str = "damnet";
const FORMAT_KEY: &str = "format";
const FORMAT: &str = "damnet-checkpoint/1";
const CONFIG_KEY: &str = "model_config";

/// Write every trainable parameter and normalization buffer of `model`
/// together with its configuration.
pub fn save(model: &DamNet, path: &Path) -> Result<()> {
    let tensors = model.store().snapshot()?;
    // a single entry keeps the header bytes independent of hash order
    let header = serde_json::json!({ FORMAT_KEY: FORMAT, CONFIG_KEY: model.config().to_toml() });
    let meta = HashMap::from([(HEADER_KEY.to_string(), header.to_string())]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(tensors.iter(), Some(meta), path).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Read only the configuration stored in a checkpoint.
pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let buf = read(path)?;
    config_from_buffer(&buf)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn config_from_buffer(buf: &[u8]) -> Result<ModelConfig> {
    let (_, header) = SafeTensors::read_metadata(buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint("missing damnet header".into()))?;
    let meta: serde_json::Value = serde_json::from_str(raw).map_err(|e| Error::Checkpoint(e.to_string()))?;
    match meta.get(FORMAT_KEY).and_then(|v| v.as_str()) {
        Some(FORMAT) => {}
        other => return Err(Error::Checkpoint(format!("unsupported format tag {other:?}"))),
    }
    let text = meta
        .get(CONFIG_KEY)
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Checkpoint("missing model config".into()))?;
    ModelConfig::from_toml(text)
}

/// Rebuild a model from a checkpoint on `device`. The parameter dtype is
/// the one stored in the file.
pub fn load(path: &Path, device: &Device) -> Result<DamNet> {
    let buf = read(path)?;
    let cfg = config_from_buffer(&buf)?;
    let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load_buffer(&buf, device)?.into_iter().collect();
    let dtype = tensors
        .values()
        .next()
        .map(|t| t.dtype())
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no tensors".into()))?;
    let model = DamNet::new(&cfg, dtype, device)?;
    model.store().restore(&tensors)?;
    Ok(model)
}
