//! Finite-difference verification of the analytic gradients.
//!
//! The network is rebuilt in double precision, a scalar training loss is
//! differentiated once by backpropagation, and sampled parameters are then
//! perturbed one at a time for central differences.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::determinism::derive_seed;
use crate::error::{Error, Result};
use crate::fusion::{total_loss, LossConfig};
use crate::model::DamNet;
use crate::nn::Mode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub samples_per_group: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    pub input_size: usize,
    pub batch: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            samples_per_group: 200,
            step: 1e-4,
            tolerance: 1e-3,
            input_size: 32,
            batch: 2,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    /// Scalars in the group.
    pub size: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Relative error with a floor on the scale, so that two near-zero
/// gradients compare by absolute difference.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Component kind of a parameter, shared across stages and blocks.
pub fn parameter_group(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let after = |key: &str, n: usize| {
        parts.iter().position(|p| *p == key).map(|i| parts[i..(i + 1 + n).min(parts.len())].join("."))
    };
    if let Some(g) = after("twfe", 1).or_else(|| after("tace", 1)) {
        return g;
    }
    if parts.contains(&"ctca") {
        return "ctca".into();
    }
    if parts.contains(&"class_token") {
        return "class_token".into();
    }
    match parts.get(1) {
        Some(p) if parts[0] == "fusion" && p.starts_with("diff") => "fusion.diff".into(),
        Some(p) if parts[0] == "fusion" => format!("fusion.{p}"),
        _ => name.to_string(),
    }
}

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
}

fn set_element(var: &Var, base: &[f64], idx: usize, value: f64) -> Result<()> {
    let mut v = base.to_vec();
    v[idx] = value;
    var.set(&Tensor::from_vec(v, var.dims(), var.device())?)?;
    Ok(())
}

/// Check every parameter group of a freshly initialized `model_cfg`.
pub fn gradcheck(model_cfg: &ModelConfig, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let dev = Device::Cpu;
    let model = DamNet::new(model_cfg, DType::F64, &dev)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gradcheck/input"));
    let (b, c, n) = (cfg.batch, model_cfg.in_channels, cfg.input_size);
    let mut rand_t = |shape: (usize, usize, usize, usize), binary: bool| -> Result<Tensor> {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> =
            (0..len).map(|_| if binary { f64::from(u8::from(rng.random::<bool>())) } else { rng.random::<f64>() }).collect();
        Ok(Tensor::from_vec(v, shape, &dev)?)
    };
    let pre = rand_t((b, c, n, n), false)?;
    let post = rand_t((b, c, n, n), false)?;
    let label = rand_t((b, 1, n, n), true)?;
    let loss_of = || -> Result<Tensor> {
        let probs = model.forward(&pre, &post, Mode::Train)?;
        total_loss(&probs, &label, &cfg.loss)
    };
    let scalar = |t: Tensor| -> Result<f64> { Ok(t.to_scalar::<f64>()?) };

    let grads = loss_of()?.backward()?;
    let mut groups: BTreeMap<String, Vec<(String, Var)>> = BTreeMap::new();
    for (name, var) in model.store().trainable() {
        groups.entry(parameter_group(&name)).or_default().push((name, var));
    }

    let mut results = Vec::new();
    for (group, members) in &groups {
        let sizes: Vec<usize> = members.iter().map(|(_, v)| v.elem_count()).collect();
        let total: usize = sizes.iter().sum();
        let k = cfg.samples_per_group.min(total);
        let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("gradcheck/{group}")));
        let mut picks = sample(&mut srng, total, k).into_vec();
        picks.sort_unstable();
        let mut worst = (0.0f64, String::new());
        let mut offset = 0;
        let mut pi = 0;
        for ((name, var), &size) in members.iter().zip(&sizes) {
            let analytic = match grads.get(var.as_tensor()) {
                Some(g) => flat(g)?,
                None => vec![0.0; size],
            };
            let base = flat(var.as_tensor())?;
            while pi < picks.len() && picks[pi] < offset + size {
                let idx = picks[pi] - offset;
                let theta = base[idx];
                set_element(var, &base, idx, theta + cfg.step)?;
                let up = scalar(loss_of()?)?;
                set_element(var, &base, idx, theta - cfg.step)?;
                let down = scalar(loss_of()?)?;
                set_element(var, &base, idx, theta)?;
                let numeric = (up - down) / (2.0 * cfg.step);
                let err = relative_error(analytic[idx], numeric);
                if err > worst.0 || worst.1.is_empty() {
                    worst = (err, format!("{name}[{idx}] analytic {:.6e} numeric {numeric:.6e}", analytic[idx]));
                }
                pi += 1;
            }
            offset += size;
        }
        if !worst.0.is_finite() {
            return Err(Error::Contract(format!("non-finite gradient in group {group}: {}", worst.1)));
        }
        log::info!("gradcheck {group}: {k} of {total} checked, max rel error {:.3e}", worst.0);
        results.push(GroupResult { group: group.clone(), size: total, checked: k, max_rel_error: worst.0, worst: worst.1 });
    }
    let max_rel_error = results.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport { groups: results, max_rel_error, tolerance: cfg.tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_by_component() {
        assert_eq!(parameter_group("backbone.stage1.twfe.oel.weight"), "twfe.oel");
        assert_eq!(parameter_group("backbone.stage3.twfe.prm.branch2.weight"), "twfe.prm");
        assert_eq!(parameter_group("backbone.stage4.block0.tace.mha.q.weight"), "tace.mha");
        assert_eq!(parameter_group("backbone.stage2.block0.ctca.w_q.weight"), "ctca");
        assert_eq!(parameter_group("backbone.class_token"), "class_token");
        assert_eq!(parameter_group("fusion.diff3.weight"), "fusion.diff");
        assert_eq!(parameter_group("fusion.head.up1.bias"), "fusion.head");
        assert_eq!(parameter_group("fusion.gate.fc2.weight"), "fusion.gate");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 2e-9) - 1e-3).abs() < 1e-15);
    }
}
