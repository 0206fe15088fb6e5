//! Named, seeded trainable parameters.
//!
//! [`ParamStore`] backs a candle `VarBuilder`. A parameter requested for
//! the first time is taken from preloaded weights when available, otherwise
//! initialised from a ChaCha stream seeded by `(store seed, name)`, so the
//! values do not depend on construction order or thread scheduling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Default)]
struct Inner {
    vars: BTreeMap<String, Var>,
    preload: HashMap<String, Tensor>,
    fresh: BTreeSet<String>,
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    seed: u64,
    zero_init: bool,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("params", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        ParamStore {
            inner: Arc::new(Mutex::new(Inner::default())),
            seed,
            zero_init: false,
            dtype,
            device,
        }
    }

    /// Every freshly created parameter starts at exactly zero.
    pub fn zeros(dtype: DType, device: Device) -> Self {
        ParamStore {
            zero_init: true,
            ..Self::new(0, dtype, device)
        }
    }

    /// Tensors consulted (by name) before falling back to seeded init.
    pub fn with_preload(self, tensors: HashMap<String, Tensor>) -> Self {
        self.inner.lock().unwrap().preload = tensors;
        self
    }

    pub fn var_builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), self.dtype, self.device.clone())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters in name order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .unwrap()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn get_var(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn element_count(&self) -> usize {
        self.inner
            .lock()
            .unwrap()
            .vars
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    /// Parameters that were initialised rather than taken from preload.
    pub fn fresh_names(&self) -> Vec<String> {
        self.inner.lock().unwrap().fresh.iter().cloned().collect()
    }

    /// Names of preloaded tensors that no parameter consumed.
    pub fn unused_preload(&self) -> Vec<String> {
        let inner = self.inner.lock().unwrap();
        let mut names: Vec<String> = inner
            .preload
            .keys()
            .filter(|k| !inner.vars.contains_key(*k))
            .cloned()
            .collect();
        names.sort();
        names
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .named_vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Overwrites existing parameters with same-named tensors from a
    /// safetensors file. Every parameter must be present.
    pub fn load_into(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        self.assign_from(&tensors)
    }

    pub fn assign_from(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.named_vars() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies of every parameter value, for snapshots.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
            .collect()
    }

    fn initial_value(&self, shape: &Shape, name: &str, init: Init) -> candle_core::Result<Tensor> {
        let n = shape.elem_count();
        if self.zero_init {
            return Tensor::zeros(shape, self.dtype, &self.device);
        }
        let mut rng = rng_for(self.seed, name);
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Randn { mean, stdev } => {
                let normal = Normal::new(mean, stdev).map_err(candle_core::Error::wrap)?;
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    candle_nn::init::NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    candle_nn::init::NormalOrUniform::Normal => {
                        let normal = Normal::new(0.0, std).map_err(candle_core::Error::wrap)?;
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                }
            }
        };
        Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(var) = inner.vars.get(name) {
            if var.shape() != &s {
                candle_core::bail!(
                    "parameter {name} requested with shape {s:?}, stored as {:?}",
                    var.shape()
                );
            }
            return Ok(var.as_tensor().clone());
        }
        let tensor = match inner.preload.get(name) {
            Some(t) => {
                if t.shape() != &s {
                    candle_core::bail!(
                        "pretrained tensor {name} has shape {:?}, model expects {s:?}",
                        t.shape()
                    );
                }
                t.to_dtype(dtype)?.to_device(dev)?
            }
            None => {
                inner.fresh.insert(name.to_string());
                self.initial_value(&s, name, h)?
            }
        };
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let inner = self.inner.lock().unwrap();
        if let Some(var) = inner.vars.get(name) {
            return Ok(var.as_tensor().clone());
        }
        match inner.preload.get(name) {
            Some(t) => t.to_dtype(dtype)?.to_device(dev),
            None => candle_core::bail!("no parameter named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        let inner = self.inner.lock().unwrap();
        inner.vars.contains_key(name) || inner.preload.contains_key(name)
    }
}
