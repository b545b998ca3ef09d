//! Parameter storage and the convolutional building blocks shared by every
//! network in the crate.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Uniform(f64),
    Const(f64),
}

/// Named parameters in registration order.
///
/// Initial values depend only on `(seed, name)`, so two networks that share
/// sub-network names (for example a factorized model and a plain U-Net) start
/// from identical weights for those sub-networks.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    seed: u64,
    names: Vec<String>,
    vars: HashMap<String, Var>,
    frozen: bool,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            seed,
            names: Vec::new(),
            vars: HashMap::new(),
            frozen: false,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// After freezing, `get_or_init` only returns existing entries; a request
    /// for an unknown name is an error. Used when rebuilding a network over
    /// loaded weights.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.names.iter().map(|n| (n.as_str(), &self.vars[n]))
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Scalar count for parameters whose name starts with `prefix.`.
    pub fn num_scalars_in(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| subnetwork_of(n) == prefix)
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::TensorShape {
                    tensor: name.to_string(),
                    expected: shape.to_vec(),
                    got: v.dims().to_vec(),
                });
            }
            return Ok(v.as_tensor().clone());
        }
        if self.frozen {
            return Err(Error::Malformed(format!("missing tensor `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(bound) => {
                let mut r = rng::stream(self.seed, "init", rng::fnv1a(name.as_bytes()));
                (0..n).map(|_| r.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.names.push(name.to_string());
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Insert or overwrite a parameter with explicit contents.
    pub fn insert(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?;
        match self.vars.get(name) {
            Some(v) => {
                if v.dims() != value.dims() {
                    return Err(Error::TensorShape {
                        tensor: name.to_string(),
                        expected: v.dims().to_vec(),
                        got: value.dims().to_vec(),
                    });
                }
                v.set(&value)?;
            }
            None => {
                self.names.push(name.to_string());
                self.vars.insert(name.to_string(), Var::from_tensor(&value)?);
            }
        }
        Ok(())
    }

    /// Copy every tensor under `from.` onto the matching name under `to.`.
    pub fn copy_prefix(&self, from: &str, to: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, var) in self.iter() {
            if let Some(rest) = name.strip_prefix(from).and_then(|r| r.strip_prefix('.')) {
                let target = format!("{to}.{rest}");
                let dst = self
                    .vars
                    .get(&target)
                    .ok_or_else(|| Error::Malformed(format!("missing tensor `{target}`")))?;
                dst.set(&var.as_tensor().copy()?)?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Independent copy with the same names, order and values.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut out = ParamStore::new(self.dtype, self.seed);
        for (name, var) in self.iter() {
            out.insert(name, &var.as_tensor().copy()?)?;
        }
        out.frozen = self.frozen;
        Ok(out)
    }

    /// Copy into a store of another precision.
    pub fn cast(&self, dtype: DType) -> Result<Self> {
        let mut out = ParamStore::new(dtype, self.seed);
        for (name, var) in self.iter() {
            out.insert(name, &var.as_tensor().to_dtype(dtype)?)?;
        }
        out.frozen = self.frozen;
        Ok(out)
    }

    pub fn all_finite(&self) -> Result<bool> {
        for (_, v) in self.iter() {
            let s = v
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            if s.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Sub-network tag of a parameter: the first dotted component (`enc`, `mid`,
/// `mask`, `dec`, ...).
pub fn subnetwork_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Hierarchical view into a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    detached: bool,
}

impl<'a> Scope<'a> {
    /// `detached` scopes return tensors that share storage with the
    /// parameters but do not record gradients.
    pub fn root(store: &'a mut ParamStore, detached: bool) -> Self {
        Self {
            store,
            prefix: String::new(),
            detached,
        }
    }

    pub fn sub(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
            detached: self.detached,
        }
    }

    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = format!("{}.{}", self.prefix, name);
        let t = self.store.get_or_init(&full, shape, init)?;
        Ok(if self.detached { t.detach() } else { t })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(s: &mut Scope, inputs: usize, outputs: usize) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        Ok(Self {
            weight: s.param("weight", &[outputs, inputs], Init::Uniform(bound))?,
            bias: s.param("bias", &[outputs], Init::Uniform(bound))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        s: &mut Scope,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((inputs * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: s.param("weight", &[outputs, inputs, kernel, kernel], Init::Uniform(bound))?,
            bias: s.param("bias", &[outputs], Init::Uniform(bound))?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_ch = self.bias.dims()[0];
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }
}

/// Number of groups for a group norm over `channels`: the largest divisor of
/// `channels` not exceeding 32 that leaves at least 4 channels per group.
///
/// Single-channel groups would cancel any per-channel bias added before the
/// norm, which is how the time embedding enters a residual block.
pub fn norm_groups(channels: usize) -> usize {
    (1..=(channels / 4).min(32))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.param("gamma", &[channels], Init::Const(1.0))?,
            beta: s.param("beta", &[channels], Init::Const(0.0))?,
            groups: norm_groups(channels),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Sinusoidal timestep features followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    freq_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(s: &mut Scope, freq_dim: usize, embed_dim: usize) -> Result<Self> {
        Ok(Self {
            freq_dim,
            fc1: Linear::new(&mut s.sub("fc1"), freq_dim, embed_dim)?,
            fc2: Linear::new(&mut s.sub("fc2"), embed_dim, embed_dim)?,
        })
    }

    pub fn forward(&self, t: &[usize], dtype: DType) -> Result<Tensor> {
        let feats = sinusoidal(t, self.freq_dim, dtype)?;
        let h = self.fc1.forward(&feats)?.silu()?;
        self.fc2.forward(&h)
    }
}

/// `[sin(t w_0) .. sin(t w_{d/2-1}), cos(t w_0) .. ]` with geometric
/// frequencies `w_i = 10000^(-i/(d/2-1))`.
pub fn sinusoidal(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let step = step as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / denom).exp());
        let (mut s, mut c): (Vec<f64>, Vec<f64>) =
            freqs.map(|f| ((step * f).sin(), (step * f).cos())).unzip();
        s.append(&mut c);
        s.resize(dim, 0.0);
        data.extend(s);
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Pre-activation residual block with an additive timestep projection after
/// the first convolution.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(s: &mut Scope, inputs: usize, outputs: usize, time_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut s.sub("norm1"), inputs)?,
            conv1: Conv2d::new(&mut s.sub("conv1"), inputs, outputs, 3, 1)?,
            time_proj: Linear::new(&mut s.sub("time"), time_dim, outputs)?,
            norm2: GroupNorm::new(&mut s.sub("norm2"), outputs)?,
            conv2: Conv2d::new(&mut s.sub("conv2"), outputs, outputs, 3, 1)?,
            shortcut: if inputs != outputs {
                Some(Conv2d::new(&mut s.sub("skip"), inputs, outputs, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let tp = self.time_proj.forward(&temb.silu()?)?;
        let (b, c) = tp.dims2()?;
        let h = h.broadcast_add(&tp.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct Attention {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
}

impl Attention {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut s.sub("norm"), channels)?,
            qkv: Conv2d::new(&mut s.sub("qkv"), channels, 3 * channels, 1, 1)?,
            proj: Conv2d::new(&mut s.sub("proj"), channels, channels, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?;
        let qkv = qkv.reshape((b, 3, c, h * w))?;
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?.transpose(1, 2)?.contiguous()?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?.contiguous()?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?.contiguous()?;
        let logits = q.matmul(&k)?.affine(1.0 / (c as f64).sqrt(), 0.0)?;
        let weights = softmax(&logits, 2)?;
        let out = v.matmul(&weights.transpose(1, 2)?.contiguous()?)?;
        let out = self.proj.forward(&out.reshape((b, c, h, w))?)?;
        Ok((x + out)?)
    }
}

/// Softmax along `dim`, shifted by the (gradient-free) maximum.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

#[derive(Debug, Clone)]
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(s, channels, channels, 3, 2)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(x)
    }
}

#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(s, channels, channels, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)
    }
}

/// Group norm, SiLU, 3x3 projection.
#[derive(Debug, Clone)]
pub struct OutputHead {
    norm: GroupNorm,
    conv: Conv2d,
}

impl OutputHead {
    pub fn new(s: &mut Scope, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut s.sub("norm"), inputs)?,
            conv: Conv2d::new(&mut s.sub("conv"), inputs, outputs, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&self.norm.forward(x)?.silu()?)
    }
}
