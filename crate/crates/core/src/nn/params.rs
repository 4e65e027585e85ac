//! Named parameter storage shared by every module of the network.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::determinism::derive_seed;
use crate::error::{Error, Result};

/// Initialization scheme for a freshly created parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

#[derive(Default)]
struct Inner {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

/// Owns every trainable parameter and running buffer of a model.
///
/// Values are seeded per name, so the initial value of `stage1.twfe.oel.weight`
/// does not depend on which other modules were constructed before it.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    device: Device,
    dtype: DType,
    seed: u64,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner::default())),
            device: device.clone(),
            dtype,
            seed,
        }
    }

    pub fn root(&self) -> Scope {
        Scope { store: self.clone(), prefix: String::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Non-trainable running buffers (batch-norm statistics) in name order.
    pub fn buffers(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.buffers.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Deep copy of every parameter and buffer, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let inner = self.inner.lock().expect("param store poisoned");
        let mut out = BTreeMap::new();
        for (k, v) in inner.params.iter().chain(inner.buffers.iter()) {
            out.insert(k.clone(), v.as_tensor().copy()?);
        }
        Ok(out)
    }

    /// Overwrite every stored value from `tensors`; names must match exactly.
    pub fn restore(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().expect("param store poisoned");
        let expected = inner.params.len() + inner.buffers.len();
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} named arrays, found {}",
                tensors.len()
            )));
        }
        for (k, v) in inner.params.iter().chain(inner.buffers.iter()) {
            let t = tensors
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{k}`")))?;
            if t.dims() != v.dims() {
                return Err(Error::Checkpoint(format!(
                    "array `{k}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    fn create(&self, name: String, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        if inner.params.contains_key(&name) || inner.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => {
                let d = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::Config(format!("init `{name}`: {e}")))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std)
                    .map_err(|e| Error::Config(format!("init `{name}`: {e}")))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        if trainable {
            inner.params.insert(name, var.clone());
        } else {
            inner.buffers.insert(name, var.clone());
        }
        Ok(var)
    }
}

/// A name prefix inside a [`ParamStore`], handed to module constructors.
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        Scope { store: self.store.clone(), prefix: self.path(name.as_ref()) }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.path(name), shape, init, true)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.path(name), shape, init, false)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_by_name() {
        let a = ParamStore::new(DType::F64, &Device::Cpu, 3);
        let b = ParamStore::new(DType::F64, &Device::Cpu, 3);
        let wa = a.root().pp("x").param("w", &[4, 4], Init::Normal(1.0)).unwrap();
        // constructing another parameter first must not change `x.w`
        b.root().param("other", &[3], Init::Normal(1.0)).unwrap();
        let wb = b.root().pp("x").param("w", &[4, 4], Init::Normal(1.0)).unwrap();
        let va: Vec<f64> = wa.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f64> = wb.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let s = ParamStore::new(DType::F32, &Device::Cpu, 0);
        s.root().param("w", &[1], Init::Zeros).unwrap();
        assert!(s.root().param("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let s = ParamStore::new(DType::F32, &Device::Cpu, 1);
        let w = s.root().param("w", &[2, 3], Init::Uniform(1.0)).unwrap();
        s.root().buffer("rm", &[3], Init::Zeros).unwrap();
        let snap = s.snapshot().unwrap();
        w.set(&Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap()).unwrap();
        s.restore(&snap).unwrap();
        let got: Vec<f32> = w.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let want: Vec<f32> = snap["w"].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(got, want);
    }
}
