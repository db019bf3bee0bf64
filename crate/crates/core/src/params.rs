//! Seeded parameter storage, the small layer kit built on top of it, and
//! the Adam optimizer.
//!
//! Candle's CPU backend cannot be seeded, so every trainable tensor in this
//! crate is created here from a ChaCha stream. Construction order fixes the
//! draw order, which makes model initialization a pure function of the seed.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How a freshly created layer is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    #[default]
    Uniform,
    Zeros,
    /// Identity weight (square layers only), zero bias.
    Identity,
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: device.clone(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.register(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.register(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DType::F64, &self.device)? * value)?;
        self.register(name, t)
    }

    pub fn linear(
        &mut self,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Result<Linear> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = match init {
            Init::Uniform => self.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?,
            Init::Zeros => self.constant(&format!("{name}.weight"), &[out_dim, in_dim], 0.0)?,
            Init::Identity => {
                if in_dim != out_dim {
                    return Err(Error::Config(format!(
                        "identity init needs a square layer, got {in_dim}->{out_dim} for `{name}`"
                    )));
                }
                let eye = Tensor::eye(in_dim, DType::F64, &self.device)?;
                self.register(&format!("{name}.weight"), eye)?
            }
        };
        let bias = if bias {
            Some(match init {
                Init::Uniform => self.uniform(&format!("{name}.bias"), &[out_dim], bound)?,
                Init::Zeros | Init::Identity => {
                    self.constant(&format!("{name}.bias"), &[out_dim], 0.0)?
                }
            })
        } else {
            None
        };
        Ok(Linear::new(weight, bias))
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        cfg: Conv2dConfig,
    ) -> Result<Conv2d> {
        // He-uniform with zero bias: keeps a deep ReLU stack alive at init
        let fan_in = in_ch * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = self.uniform(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            bound,
        )?;
        let bias = self.constant(&format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok(Conv2d::new(weight, Some(bias), cfg))
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        let weight = self.constant(&format!("{name}.weight"), &[dim], 1.0)?;
        let bias = self.constant(&format!("{name}.bias"), &[dim], 0.0)?;
        Ok(LayerNorm {
            weight,
            bias,
            eps: 1e-5,
        })
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter in place; shape must match.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: stored {:?}, model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(), path)?;
        Ok(())
    }
}

/// Layer normalization over the last axis written with primitive ops so it
/// is differentiable on every backend.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Per-token MLP. With `depth == 1` it is a single linear map; otherwise
/// `depth - 1` hidden layers of width `hidden` with GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        depth: usize,
        init: Init,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config(format!("mlp `{name}` needs depth >= 1")));
        }
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let fan_in = if i == 0 { in_dim } else { hidden };
            let fan_out = if i + 1 == depth { out_dim } else { hidden };
            layers.push(store.linear(&format!("{name}.fc{i}"), fan_in, fan_out, true, init)?);
        }
        Ok(Self { layers })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i != last {
                h = h.gelu()?;
            }
        }
        Ok(h)
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name so
/// they can be written into a checkpoint next to the weights.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        let mut moments = BTreeMap::new();
        for (name, var) in store.vars() {
            let z = var.as_tensor().zeros_like()?;
            moments.insert(name.clone(), (z.clone(), z));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // variable grads can still hold the forward graph; without this the
            // moment buffers chain every step's graph onto the next
            let g = g.detach();
            let g = &g;
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("no moments for `{name}`")))?;
            let new_m = ((&*m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let new_v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&new_m / bc1)?;
            let v_hat = (&new_v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            *m = new_m;
            *v = new_v;
        }
        Ok(())
    }

    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("adam.m.{name}"), m.clone());
            out.insert(format!("adam.v.{name}"), v.clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        for (name, (m, v)) in self.moments.iter_mut() {
            let fetch = |key: String| {
                tensors
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))
            };
            *m = fetch(format!("adam.m.{name}"))?;
            *v = fetch(format!("adam.v.{name}"))?;
        }
        self.step = step;
        Ok(())
    }
}
