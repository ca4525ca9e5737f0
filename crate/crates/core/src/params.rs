//! Named parameter storage, seeded initialisation and per-stage trainability.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Result, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

/// Which parameter group a tensor name belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Temporal attention layers inside the denoising UNet.
    Temporal,
    /// Every other parameter of the denoising UNet.
    BackboneSpatial,
    Appearance,
    Pose,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        if let Some(rest) = name.strip_prefix("backbone.") {
            if rest.contains("temporal.") {
                Some(ParamGroup::Temporal)
            } else {
                Some(ParamGroup::BackboneSpatial)
            }
        } else if name.starts_with("appearance.") {
            Some(ParamGroup::Appearance)
        } else if name.starts_with("pose.") {
            Some(ParamGroup::Pose)
        } else {
            None
        }
    }
}

/// Decides which parameters receive gradients when a model is bound.
///
/// Non-trainable parameters are bound as detached tensors, so they never
/// appear in the gradient store and the optimizer cannot touch them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMask {
    All,
    Frozen,
    /// Appearance encoder and pose conditioner; with `include_base` the
    /// spatial UNet layers as well.
    Stage1 { include_base: bool },
    /// Temporal attention layers only.
    Stage2,
}

impl TrainMask {
    pub fn is_trainable(&self, name: &str) -> bool {
        let group = ParamGroup::of(name);
        match self {
            TrainMask::All => true,
            TrainMask::Frozen => false,
            TrainMask::Stage1 { include_base } => match group {
                Some(ParamGroup::Appearance | ParamGroup::Pose) => true,
                Some(ParamGroup::BackboneSpatial) => *include_base,
                _ => false,
            },
            TrainMask::Stage2 => group == Some(ParamGroup::Temporal),
        }
    }
}

struct State {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    allow_create: bool,
}

/// Owns every parameter of a model, keyed by dotted path.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    state: Mutex<State>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            state: Mutex::new(State {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                allow_create: true,
            }),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Once sealed, binding a model fails on any parameter the store lacks.
    pub fn seal(&self) {
        self.state.lock().unwrap().allow_create = false;
    }

    pub fn root<'a>(&'a self, mask: &'a TrainMask) -> ParamBuilder<'a> {
        ParamBuilder { store: self, prefix: String::new(), mask, mirror: None }
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.state.lock().unwrap().vars.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.state.lock().unwrap().vars.get(name).cloned()
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let st = self.state.lock().unwrap();
        st.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn trainable_vars(&self, mask: &TrainMask) -> Vec<(String, Var)> {
        self.vars().into_iter().filter(|(n, _)| mask.is_trainable(n)).collect()
    }

    pub fn insert(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        self.state.lock().unwrap().vars.insert(name.to_string(), var);
        Ok(())
    }

    /// Deep copy with the given dtype; used to run gradient checks in f64.
    pub fn to_dtype(&self, dtype: DType) -> Result<ParamStore> {
        let out = ParamStore::new(0, dtype, &self.device);
        for (name, var) in self.vars() {
            out.insert(&name, var.as_tensor())?;
        }
        out.state.lock().unwrap().allow_create = self.state.lock().unwrap().allow_create;
        Ok(out)
    }

    /// Flattened f64 copy of every parameter, for delta audits.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars()
            .into_iter()
            .map(|(n, v)| {
                let flat = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Ok((n, flat))
            })
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn fetch(&self, name: &str, shape: Shape, init: Init, mirror: Option<&str>) -> Result<Var> {
        let mut st = self.state.lock().unwrap();
        if let Some(v) = st.vars.get(name) {
            if v.shape() != &shape {
                candle_core::bail!(
                    "parameter {name}: stored shape {:?}, model expects {:?}",
                    v.shape().dims(),
                    shape.dims()
                );
            }
            return Ok(v.clone());
        }
        if !st.allow_create {
            candle_core::bail!("missing parameter {name}");
        }
        // a trainable copy of another module starts from that module's values
        if let Some(src) = mirror.and_then(|m| {
            let (_, rest) = name.split_once('.')?;
            st.vars.get(&format!("{m}.{rest}"))
        }) {
            if src.shape() == &shape {
                let var = Var::from_tensor(&src.as_tensor().copy()?)?;
                st.vars.insert(name.to_string(), var.clone());
                return Ok(var);
            }
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| st.rng.random_range(-b..=b)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        st.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }
}

/// Path-scoped view of a [`ParamStore`] used while building modules.
#[derive(Clone)]
pub struct ParamBuilder<'a> {
    store: &'a ParamStore,
    prefix: String,
    mask: &'a TrainMask,
    mirror: Option<&'a str>,
}

impl<'a> ParamBuilder<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self { prefix, ..self.clone() }
    }

    /// Newly created parameters copy the same-path parameter under `module`.
    pub fn mirroring(&self, module: &'a str) -> Self {
        Self { mirror: Some(module), ..self.clone() }
    }

    pub fn path(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let var = self.store.fetch(&full, shape.into(), init, self.mirror)?;
        if self.mask.is_trainable(&full) {
            Ok(var.as_tensor().clone())
        } else {
            Ok(var.as_tensor().detach())
        }
    }
}
