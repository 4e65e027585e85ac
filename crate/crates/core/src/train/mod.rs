//! Minibatch training with best-on-validation model selection.

pub mod config;
pub mod history;
pub mod optim;

pub use config::{lr_at, OptimizerKind, ScheduleMode, TrainConfig};
pub use history::{EpochRecord, TrainHistory};
pub use optim::{AdamW, Optimizer, Sgd};

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::augment::{augment, Transform};
use crate::data::{stack_batch, MultiTemporalPair};
use crate::determinism::derive_seed;
use crate::error::{Error, Result};
use crate::fusion::total_loss;
use crate::maps::ProbabilityMap;
use crate::metrics::{accumulate, compute, ConfusionCounts, MetricsReport};
use crate::model::DamNet;
use crate::nn::Mode;

/// Result of [`train`]. The model itself is left holding the best weights.
pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Epoch of the selected weights; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best: BTreeMap<String, Tensor>,
}

/// Visiting order of the training samples in `epoch`.
pub fn epoch_order(n: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("shuffle/{epoch}"))));
    idx
}

fn augmented(pair: &MultiTemporalPair, epoch: usize, idx: usize, cfg: &TrainConfig) -> Result<MultiTemporalPair> {
    if !cfg.augment {
        return Ok(pair.clone());
    }
    let (h, w, _) = pair.dim();
    if h != w {
        // rotations need square patches; fall back to mirroring only
        let seed = derive_seed(cfg.seed, &format!("augment/{epoch}/{idx}"));
        let t = [Transform::Identity, Transform::FlipH, Transform::FlipV, Transform::Rot180][(seed % 4) as usize];
        return crate::data::augment::apply_to_pair(pair, t);
    }
    Ok(augment(pair, derive_seed(cfg.seed, &format!("augment/{epoch}/{idx}")))?.0)
}

fn first_non_finite(model: &DamNet) -> Result<Option<String>> {
    for (name, var) in model.store().trainable() {
        let s = var.as_tensor().sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !s.is_finite() {
            return Ok(Some(name));
        }
    }
    Ok(None)
}

/// Loss of one minibatch in training mode, followed by an optimizer step.
fn train_step(model: &DamNet, opt: &mut Optimizer, batch: &[&MultiTemporalPair], cfg: &TrainConfig, lr: f64) -> Result<f64> {
    let b = stack_batch(batch, model.dtype(), model.device())?;
    let label = b.label.ok_or_else(|| Error::Data("training pairs need labels".into()))?;
    let probs = model.forward(&b.pre, &b.post, Mode::Train)?;
    let loss = total_loss(&probs, &label, &cfg.loss)?;
    let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if value.is_finite() {
        opt.step(&loss.backward()?, lr)?;
    }
    Ok(value)
}

/// Probability maps of `pairs` in evaluation mode.
pub fn predict(model: &DamNet, pairs: &[MultiTemporalPair], batch_size: usize) -> Result<Vec<ProbabilityMap>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&MultiTemporalPair> = chunk.iter().collect();
        let b = stack_batch(&refs, model.dtype(), model.device())?;
        out.extend(ProbabilityMap::from_batch(&model.forward(&b.pre, &b.post, Mode::Eval)?)?);
    }
    Ok(out)
}

/// Confusion counts and scores of the binarized predictions on `pairs`.
pub fn evaluate(model: &DamNet, pairs: &[MultiTemporalPair], batch_size: usize, threshold: f64) -> Result<MetricsReport> {
    let mut counts = ConfusionCounts::default();
    for chunk in pairs.chunks(batch_size.max(1)) {
        for (p, pair) in predict(model, chunk, batch_size)?.iter().zip(chunk) {
            counts = accumulate(p.binarize(threshold)?.view(), pair.label_required()?.view(), counts)?;
        }
    }
    compute(&counts)
}

/// Train `model` in place. After the last epoch the weights of the epoch
/// with the best validation F1 are restored into the model.
pub fn train(
    model: &DamNet,
    train_set: &[MultiTemporalPair],
    val_set: &[MultiTemporalPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and val sets (got {} and {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let store = model.store();
    let mut opt = Optimizer::from_config(store.trainable().into_iter().map(|(_, v)| v).collect(), cfg)?;
    let mut history = TrainHistory::default();
    let mut best = store.snapshot()?;
    let mut best_epoch = None;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg);
        let order = epoch_order(train_set.len(), epoch, cfg.seed);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples = chunk
                .iter()
                .map(|&i| augmented(&train_set[i], epoch, i, cfg))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&MultiTemporalPair> = samples.iter().collect();
            let loss = train_step(model, &mut opt, &refs, cfg, lr)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi, detail: format!("loss is {loss}") });
            }
            if let Some(name) = first_non_finite(model)? {
                return Err(Error::Divergence { epoch, batch: bi, detail: format!("parameter {name} is no longer finite") });
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let report = evaluate(model, val_set, cfg.batch_size, cfg.loss.binarize_threshold)?;
        let record = EpochRecord::new(epoch, loss_sum / seen as f64, lr, &report, start.elapsed().as_secs_f64());
        log::info!(
            "epoch {epoch}: loss {:.5} lr {:.2e} val F1 {}",
            record.train_loss,
            lr,
            record.f1.map_or("undefined".to_string(), |f| format!("{f:.4}"))
        );
        on_epoch(&record);
        history.push(record);
        if history.best_epoch() == Some(epoch) {
            best = store.snapshot()?;
            best_epoch = Some(epoch);
        }
    }
    store.restore(&best)?;
    Ok(TrainOutcome { history, best_epoch, best })
}
