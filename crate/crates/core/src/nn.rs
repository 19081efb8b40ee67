//! Parameter storage and the handful of layers the models are built from.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Freshly created
//! parameters are initialised from a ChaCha stream seeded by the store seed and
//! the parameter name, so initialisation does not depend on creation order.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

impl Init {
    /// PyTorch-style default for weights and biases of a layer with `fan_in` inputs.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Inner {
    vars: BTreeMap<String, Var>,
    loaded: HashMap<String, Tensor>,
    strict: bool,
}

/// Named, seeded parameter storage shared by every layer of one model.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock().expect("param store poisoned");
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("dtype", &self.dtype)
            .field("params", &inner.vars.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                loaded: HashMap::new(),
                strict: false,
            })),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    /// A store that takes every parameter from `tensors`. Requesting a name
    /// that is absent is an error when `strict` is set, otherwise it falls
    /// back to seeded initialisation.
    pub fn from_tensors(
        tensors: HashMap<String, Tensor>,
        seed: u64,
        dtype: DType,
        strict: bool,
    ) -> Self {
        let store = Self::new(seed, dtype);
        {
            let mut inner = store.inner.lock().expect("param store poisoned");
            inner.loaded = tensors;
            inner.strict = strict;
        }
        store
    }

    /// Supplies the value `get` will return for `name` on first request.
    pub fn preload(&self, name: &str, tensor: Tensor) {
        let mut inner = self.inner.lock().expect("param store poisoned");
        inner.loaded.insert(name.to_string(), tensor);
    }

    /// Names of supplied tensors that no layer has requested.
    pub fn unused_tensors(&self) -> Vec<String> {
        let inner = self.inner.lock().expect("param store poisoned");
        let mut names: Vec<String> = inner.loaded.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn scope(&self, prefix: &str) -> Scope {
        Scope {
            store: self.clone(),
            prefix: prefix.to_string(),
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        if let Some(v) = inner.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::shape(name, shape, v.dims()));
            }
            return Ok(v.as_tensor().clone());
        }
        let tensor = match inner.loaded.remove(name) {
            Some(t) => {
                if t.dims() != shape {
                    return Err(Error::shape(name, shape, t.dims()));
                }
                t.to_dtype(self.dtype)?
            }
            None if inner.strict => {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            }
            None => self.init_tensor(name, shape, init)?,
        };
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn init_tensor(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * s
                })
                .collect(),
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// All parameters, ordered by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn vars_where(&self, keep: impl Fn(&str) -> bool) -> Vec<Var> {
        self.named_vars()
            .into_iter()
            .filter(|(k, _)| keep(k))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Detached copies of every parameter, for snapshots and serialisation.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites every parameter present in `snapshot` in place.
    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.named_vars() {
            if let Some(t) = snapshot.get(&name) {
                var.set(t)?;
            }
        }
        Ok(())
    }
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get(&self.pp(name).prefix, shape, init)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

pub fn linear(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<candle_nn::Linear> {
    let init = Init::fan_in(in_dim);
    let w = scope.get("weight", &[out_dim, in_dim], init)?;
    let b = scope.get("bias", &[out_dim], init)?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

pub fn linear_zero(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<candle_nn::Linear> {
    let w = scope.get("weight", &[out_dim, in_dim], Init::Zeros)?;
    let b = scope.get("bias", &[out_dim], Init::Zeros)?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

pub fn linear_no_bias(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<candle_nn::Linear> {
    let w = scope.get("weight", &[out_dim, in_dim], Init::fan_in(in_dim))?;
    Ok(candle_nn::Linear::new(w, None))
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub zero_init: bool,
}

impl ConvSpec {
    pub const fn k3() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            padding: 1,
            zero_init: false,
        }
    }
    pub const fn k1() -> Self {
        Self {
            kernel: 1,
            stride: 1,
            padding: 0,
            zero_init: false,
        }
    }
    pub const fn down2() -> Self {
        Self {
            kernel: 3,
            stride: 2,
            padding: 1,
            zero_init: false,
        }
    }
    pub const fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }
}

/// 2-d convolution with bias, backed by the direct kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = crate::kernels::conv2d(x, &self.weight, self.stride, self.padding)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

pub fn conv2d(scope: &Scope, in_ch: usize, out_ch: usize, spec: ConvSpec) -> Result<Conv2d> {
    let init = if spec.zero_init {
        Init::Zeros
    } else {
        Init::fan_in(in_ch * spec.kernel * spec.kernel)
    };
    Ok(Conv2d {
        weight: scope.get("weight", &[out_ch, in_ch, spec.kernel, spec.kernel], init)?,
        bias: scope.get("bias", &[out_ch], init)?,
        stride: spec.stride,
        padding: spec.padding,
    })
}

/// Group norm with per-channel affine, backed by the fused kernel.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        crate::kernels::group_norm(x, &self.weight, &self.bias, self.groups, 1e-5)
    }
}

pub fn group_norm(scope: &Scope, groups: usize, channels: usize) -> Result<GroupNorm> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::shape(
            "group norm groups",
            format!("a divisor of {channels}"),
            groups,
        ));
    }
    Ok(GroupNorm {
        weight: scope.get("weight", &[channels], Init::Ones)?,
        bias: scope.get("bias", &[channels], Init::Zeros)?,
        groups,
    })
}

/// SiLU through the fused kernel.
pub trait SiluExt {
    fn silu_fused(&self) -> candle_core::Result<Tensor>;
}

impl SiluExt for Tensor {
    fn silu_fused(&self) -> candle_core::Result<Tensor> {
        crate::kernels::silu(self)
    }
}

/// Layer norm over the last dimension built from differentiable primitives;
/// candle's fused kernel has no backward pass and no f64 path.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let last = x.rank() - 1;
        let mean = x.mean_keepdim(last)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(last)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

pub fn layer_norm(scope: &Scope, dim: usize) -> Result<LayerNorm> {
    Ok(LayerNorm {
        weight: scope.get("weight", &[dim], Init::Ones)?,
        bias: scope.get("bias", &[dim], Init::Zeros)?,
        eps: 1e-5,
    })
}

/// Largest group count `<= preferred` that divides `channels`.
pub fn groups_for(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Source taps `(lo, hi, frac)` for 1-D linear resampling from `src` to `dst`
/// samples with half-pixel centres and no antialiasing: output `i` is
/// `(1 - frac) * x[lo] + frac * x[hi]`.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// The taps of [`bilinear_taps`] as a dense row-stochastic `(dst, src)` matrix.
pub fn bilinear_weights(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    for (i, (lo, hi, frac)) in bilinear_taps(src, dst).into_iter().enumerate() {
        m[i * src + lo] += 1.0 - frac;
        m[i * src + hi] += frac;
    }
    m
}

/// Bilinear resize of an NCHW tensor, expressed as two matrix products so it
/// is differentiable end to end.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = x.dtype();
    let rh = Tensor::from_vec(bilinear_weights(h, out_h), (out_h, h), dev)?.to_dtype(dt)?;
    let rw_t = Tensor::from_vec(bilinear_weights(w, out_w), (out_w, w), dev)?
        .to_dtype(dt)?
        .t()?;
    let cols = x.reshape((b * c * h, w))?.matmul(&rw_t)?;
    let cols = cols.reshape((b * c, h, out_w))?;
    let out = rh.broadcast_matmul(&cols)?;
    Ok(out.reshape((b, c, out_h, out_w))?)
}

/// Rearranges `(B, C, H, W)` into `(B, C·r·r, H/r, W/r)`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("spatial size divisible by {r}"),
            (h, w),
        ));
    }
    Ok(crate::kernels::pixel_unshuffle(x, r)?)
}

/// Squeeze-and-excite channel gating.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    reduce: candle_nn::Linear,
    expand: candle_nn::Linear,
}

impl SqueezeExcite {
    pub fn new(scope: &Scope, channels: usize, ratio: usize) -> Result<Self> {
        let hidden = (channels / ratio).max(1);
        Ok(Self {
            reduce: linear(&scope.pp("fc1"), channels, hidden)?,
            expand: linear(&scope.pp("fc2"), hidden, channels)?,
        })
    }
}

impl Module for SqueezeExcite {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let pooled = x.mean((2, 3))?;
        let gate = self.reduce.forward(&pooled)?.relu()?;
        let gate = candle_nn::ops::sigmoid(&self.expand.forward(&gate)?)?;
        x.broadcast_mul(&gate.reshape((b, c, 1, 1))?)
    }
}

/// `true` if every element of `t` is finite.
pub fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

pub(crate) fn check_finite(t: &Tensor, stage: impl FnOnce() -> String) -> Result<()> {
    // a non-finite sum means a non-finite element or an overflow; both are fatal
    let s = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage() })
    }
}

pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}
