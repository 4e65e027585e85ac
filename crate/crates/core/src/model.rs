//! The full change-detection network: Siamese backbone plus fusion head.

use candle_core::{DType, Device, Tensor};

use crate::backbone::{Backbone, BackboneOutput};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::fusion::{FusionOutput, TemporalDifferentialFusion};
use crate::nn::{Mode, ParamStore};

/// Backbone features and fusion tensors of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub features: BackboneOutput,
    pub fusion: FusionOutput,
}

impl ModelOutput {
    pub fn probs(&self) -> &Tensor {
        &self.fusion.probs
    }
}

#[derive(Clone)]
pub struct DamNet {
    store: ParamStore,
    pub backbone: Backbone,
    pub fusion: TemporalDifferentialFusion,
    cfg: ModelConfig,
}

impl DamNet {
    /// Build a freshly initialized network. Initial weights depend only on
    /// `cfg.init_seed` and the parameter names.
    pub fn new(cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(dtype, device, cfg.init_seed);
        let root = store.root();
        let backbone = Backbone::new(&root.pp("backbone"), cfg)?;
        let fusion = TemporalDifferentialFusion::new(&root.pp("fusion"), cfg)?;
        Ok(Self { store, backbone, fusion, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// `pre`, `post`: `[B, C, H, W]` with `H`, `W` divisible by 32.
    pub fn forward_detailed(&self, pre: &Tensor, post: &Tensor, mode: Mode) -> Result<ModelOutput> {
        let features = self.backbone.forward(pre, post, mode)?;
        let fusion = self.fusion.forward(&features.pre, &features.post, features.semantic.as_ref())?;
        Ok(ModelOutput { features, fusion })
    }

    /// `[B, 1, H, W]` change probabilities.
    pub fn forward(&self, pre: &Tensor, post: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_detailed(pre, post, mode)?.fusion.probs)
    }
}
