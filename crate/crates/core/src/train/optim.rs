//! First-order optimizers updating [`Var`]s in place.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::train::config::{OptimizerKind, TrainConfig};

/// Decoupled weight decay Adam.
pub struct AdamW {
    params: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: Vec<Var>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self> {
        let m = params.iter().map(|p| p.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { params, m, v, step: 0, beta1, beta2, eps, weight_decay })
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()).map(Tensor::detach) else { continue };
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let decayed = (p.as_tensor().detach() * (1.0 - lr * self.weight_decay))?;
            p.set(&(decayed - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 decay.
pub struct Sgd {
    params: Vec<Var>,
    buf: Vec<Option<Tensor>>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(params: Vec<Var>, momentum: f64, weight_decay: f64) -> Self {
        let buf = vec![None; params.len()];
        Self { params, buf, momentum, weight_decay }
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()).map(Tensor::detach) else { continue };
            let w = p.as_tensor().detach();
            let g = (g + (&w * self.weight_decay)?)?;
            let b = match &self.buf[i] {
                Some(b) => ((b * self.momentum)? + g)?,
                None => g,
            };
            p.set(&(w - (&b * lr)?)?)?;
            self.buf[i] = Some(b);
        }
        Ok(())
    }
}

pub enum Optimizer {
    AdamW(AdamW),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn from_config(params: Vec<Var>, cfg: &TrainConfig) -> Result<Self> {
        Ok(match cfg.optimizer {
            OptimizerKind::AdamW => {
                Optimizer::AdamW(AdamW::new(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)?)
            }
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(params, cfg.momentum, cfg.weight_decay)),
        })
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        match self {
            Optimizer::AdamW(o) => o.step(grads, lr),
            Optimizer::Sgd(o) => o.step(grads, lr),
        }
    }
}
