//! Layered configuration: file, then environment, then flags.
//!
//! A config file is a flat TOML table whose keys are the flag names with
//! underscores. Every resolved config is logged in the same flat form, so
//! a logged run can be replayed with `--config`.

use std::path::Path;

use damnet::fusion::LossConfig;
use damnet::gradcheck::GradcheckConfig;
use damnet::train::TrainConfig;
use damnet::{Error, ModelConfig, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub type Table = Map<String, Value>;

/// Parse `--config`: either a model preset name or a TOML file.
pub fn load_config(arg: Option<&str>) -> Result<Table> {
    let Some(arg) = arg else { return Ok(Table::new()) };
    if !Path::new(arg).exists() && ModelConfig::preset(arg).is_ok() {
        let mut t = Table::new();
        t.insert("model".into(), Value::String(arg.into()));
        return Ok(t);
    }
    let text = std::fs::read_to_string(arg).map_err(|e| Error::Config(format!("cannot read config {arg}: {e}")))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{arg}: {e}")))?;
    match serde_json::to_value(table)? {
        Value::Object(m) => Ok(m),
        _ => unreachable!("a TOML document is a table"),
    }
}

/// Overlay the set flags of `flags` onto `table`.
pub fn overlay(mut table: Table, flags: &impl Serialize) -> Result<Table> {
    if let Value::Object(m) = serde_json::to_value(flags)? {
        for (k, v) in m {
            if !v.is_null() {
                table.insert(k, v);
            }
        }
    }
    Ok(table)
}

/// Replace the fields of `base` by the matching keys of `table`, removing
/// them from the table.
pub fn take<T: Serialize + DeserializeOwned>(base: T, table: &mut Table) -> Result<T> {
    let Value::Object(mut fields) = serde_json::to_value(&base)? else {
        return Err(Error::Config("config section is not a table".into()));
    };
    let mut touched = false;
    for (k, v) in fields.iter_mut() {
        if let Some(new) = table.remove(k) {
            *v = new;
            touched = true;
        }
    }
    if !touched {
        return Ok(base);
    }
    serde_json::from_value(Value::Object(fields)).map_err(|e| Error::Config(e.to_string()))
}

/// Resolve the model architecture from the `model` preset key plus any
/// architecture keys.
pub fn take_model(table: &mut Table, default_preset: &str) -> Result<ModelConfig> {
    let preset = match table.remove("model") {
        None => default_preset.to_string(),
        Some(Value::String(s)) => s,
        Some(v) => return Err(Error::Config(format!("model must be a preset name, got {v}"))),
    };
    let cfg = take(ModelConfig::preset(&preset)?, table)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Training settings, with the loss keys given flat.
pub fn take_train(table: &mut Table) -> Result<TrainConfig> {
    let loss = take(LossConfig::default(), table)?;
    let cfg = take(TrainConfig { loss, ..TrainConfig::default() }, table)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn take_gradcheck(table: &mut Table) -> Result<GradcheckConfig> {
    let loss = take(LossConfig::default(), table)?;
    take(GradcheckConfig { loss, ..GradcheckConfig::default() }, table)
}

/// Deserialize the command-level keys and reject anything left over.
pub fn finish<T: DeserializeOwned>(table: Table) -> Result<T> {
    serde_json::from_value(Value::Object(table)).map_err(|e| Error::Config(e.to_string()))
}

/// Merge serialized parts into one flat table, descending into nested
/// tables such as the loss settings.
pub fn flatten(parts: Vec<Value>) -> Table {
    let mut out = Table::new();
    for p in parts {
        flatten_into(p, &mut out);
    }
    out
}

fn flatten_into(v: Value, out: &mut Table) {
    if let Value::Object(m) = v {
        for (k, v) in m {
            match v {
                Value::Object(_) => flatten_into(v, out),
                Value::Null => {}
                v => {
                    out.insert(k, v);
                }
            }
        }
    }
}

/// Flat TOML rendering of a resolved config.
pub fn render(table: &Table) -> String {
    toml::to_string(table).unwrap_or_else(|e| format!("<unrenderable config: {e}>"))
}
