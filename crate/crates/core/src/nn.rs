//! Parameter storage and the small set of layers the model is assembled from.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names and are initialized
//! from a seeded ChaCha stream, so two stores built with the same seed are
//! bitwise identical regardless of build order elsewhere in the process.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::Linear;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub enum Init {
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Values(Vec<f64>),
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named, seeded parameter storage. Cloning shares the underlying variables.
#[derive(Clone)]
pub struct ParamStore {
    inner: Rc<RefCell<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Rc::new(RefCell::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope { store: self.clone(), prefix: String::new() }
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.borrow_mut();
        if inner.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| inner.rng.random_range(-b..=b)).collect(),
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::DimMismatch {
                        what: format!("initial values for {name}"),
                        expected: n,
                        got: v.len(),
                    });
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner.borrow().vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.inner.borrow().vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self
            .inner
            .borrow()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every parameter with the values stored at `path`.
    pub fn load(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let inner = self.inner.borrow();
        if loaded.len() != inner.vars.len() {
            return Err(Error::DimMismatch {
                what: "checkpoint parameter count".into(),
                expected: inner.vars.len(),
                got: loaded.len(),
            });
        }
        for (name, var) in inner.vars.iter() {
            let t = loaded
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Config(format!(
                    "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: &str) -> Scope {
        let prefix =
            if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Scope { store: self.store.clone(), prefix }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.create(self.pp(name).prefix, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Affine layer with the usual fan-in uniform initialization.
pub fn linear(in_dim: usize, out_dim: usize, scope: &Scope) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = scope.param("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
    let b = scope.param("bias", &[out_dim], Init::Uniform(bound))?;
    Ok(Linear::new(w, Some(b)))
}

/// Affine layer whose weights start at zero and bias at `bias`.
pub fn linear_const(in_dim: usize, out_dim: usize, bias: &[f64], scope: &Scope) -> Result<Linear> {
    assert_eq!(bias.len(), out_dim);
    let w = scope.param("weight", &[out_dim, in_dim], Init::Const(0.0))?;
    let b = scope.param("bias", &[out_dim], Init::Values(bias.to_vec()))?;
    Ok(Linear::new(w, Some(b)))
}

/// Stack of affine layers with ReLU between them.
#[derive(Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(dims: &[usize], scope: &Scope) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| linear(w[0], w[1], &scope.pp(&format!("layers.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Same as [`Mlp::new`] but the last layer starts at zero, so the initial
    /// output is exactly zero.
    pub fn zero_last(dims: &[usize], scope: &Scope) -> Result<Self> {
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, w) in dims.windows(2).enumerate() {
            let s = scope.pp(&format!("layers.{i}"));
            if i + 1 == n {
                let weight = s.param("weight", &[w[1], w[0]], Init::Const(0.0))?;
                let bias = s.param("bias", &[w[1]], Init::Const(0.0))?;
                layers.push(Linear::new(weight, Some(bias)));
            } else {
                layers.push(linear(w[0], w[1], &s)?);
            }
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

/// Two affine layers, hidden width `4 * dim`, ReLU and dropout on the hidden units.
#[derive(Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(dim: usize, scope: &Scope) -> Result<Self> {
        Ok(Self {
            up: linear(dim, 4 * dim, &scope.pp("up"))?,
            down: linear(4 * dim, dim, &scope.pp("down"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let h = ctx.dropout(&self.up.forward(x)?.relu()?)?;
        Ok(self.down.forward(&h)?)
    }
}

/// Stack of same-width 1D convolutions (kernel 3, zero padding) with ReLU
/// between layers. Operates on `(batch, len, channels)` and re-zeros padded
/// positions after every layer, so padding behaves like the sequence end.
///
/// Weights use the usual `(out, in, kernel)` layout; the convolution itself is
/// computed as one matmul over the three shifted copies of the input, which
/// back-propagates much faster on CPU than a direct convolution.
#[derive(Clone)]
pub struct ConvStack {
    layers: Vec<(Tensor, Tensor)>,
}

impl ConvStack {
    pub fn new(channels: usize, depth: usize, scope: &Scope) -> Result<Self> {
        let bound = 1.0 / ((channels * 3) as f64).sqrt();
        let layers = (0..depth)
            .map(|i| {
                let s = scope.pp(&format!("layers.{i}"));
                let w = s.param("weight", &[channels, channels, 3], Init::Uniform(bound))?;
                let b = s.param("bias", &[channels], Init::Uniform(bound))?;
                Ok((w, b))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    fn conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (batch, len, c) = x.dims3()?;
        let out = w.dim(0)?;
        let xp = x.pad_with_zeros(1, 1, 1)?;
        let cols = Tensor::cat(&[xp.narrow(1, 0, len)?, xp.narrow(1, 1, len)?, xp.narrow(1, 2, len)?], 2)?;
        // (out, in, k) -> (k * in, out), matching the column order above
        let wt = w.permute((2, 1, 0))?.reshape((3 * c, out))?;
        let y = cols.reshape((batch * len, 3 * c))?.matmul(&wt)?.broadcast_add(b)?;
        Ok(y.reshape((batch, len, out))?)
    }

    /// `x` is `(B, L, C)`, `mask` is `(B, L)` with 1 for real clips.
    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let m = mask.unsqueeze(2)?; // (B, L, 1)
        let mut h = x.broadcast_mul(&m)?;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = Self::conv(&h, w, b)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
            h = h.broadcast_mul(&m)?;
        }
        Ok(h)
    }
}

/// Per-call forward options: training-mode dropout with its own seeded stream.
pub struct ForwardCtx {
    dropout: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self { dropout, rng: Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed))) }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&self, x: &Tensor) -> Result<Tensor> {
        let Some(rng) = &self.rng else { return Ok(x.clone()) };
        if self.dropout <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.dropout;
        let scale = (1.0 / keep) as f32;
        let mut rng = rng.borrow_mut();
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Inverse of the logistic function, with the argument clipped to `[eps, 1 - eps]`.
pub fn inverse_sigmoid(x: &Tensor, eps: f64) -> Result<Tensor> {
    let x = x.clamp(eps, 1.0 - eps)?;
    let one_minus = x.affine(-1.0, 1.0)?;
    Ok((x.log()? - one_minus.log()?)?)
}

/// Softmax over the last dimension. The max shift is detached: it does not
/// change the value and keeps it out of the backward graph.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// `log(sum(exp(x)))` over the last dimension, stable.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok((s + max)?.squeeze(D::Minus1)?)
}

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// Scale applied to normalized positions before the sinusoidal encoding.
pub const POSITION_SCALE: f64 = 2.0 * std::f64::consts::PI;
pub const PE_TEMPERATURE: f64 = 10_000.0;

/// Fixed sinusoidal encoding of normalized positions.
///
/// `positions` may have any shape `S`; the result has shape `S x dim` with
/// `out[2k] = sin(x w_k)` and `out[2k+1] = cos(x w_k)`, where
/// `x = 2 pi * position` and `w_k = 10000^(-2k/dim)`. Differentiable in the
/// positions.
pub fn sinusoidal_pe(positions: &Tensor, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("positional encoding width must be even, got {dim}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| POSITION_SCALE / PE_TEMPERATURE.powf(2.0 * k as f64 / dim as f64))
        .collect();
    let freqs = Tensor::new(freqs, positions.device())?.to_dtype(positions.dtype())?;
    let arg = positions.unsqueeze(D::Minus1)?.broadcast_mul(&freqs)?;
    let last = arg.rank() - 1;
    let pe = Tensor::stack(&[arg.sin()?, arg.cos()?], last + 1)?;
    let mut shape = positions.dims().to_vec();
    shape.push(dim);
    Ok(pe.reshape(shape)?)
}

/// Splits `(B, L, H * d)` into `(B, H, L, d)`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, dim) = x.dims3()?;
    Ok(x.reshape((b, l, heads, dim / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, l, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, l, h * d))?)
}

/// Additive attention bias from a `(B, Lk)` 0/1 key mask, shaped `(B, 1, 1, Lk)`.
pub fn key_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, lk) = mask.dims2()?;
    Ok(mask.affine(1e9, -1e9)?.reshape((b, 1, 1, lk))?)
}

/// Scaled dot-product attention on split heads.
pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    scale: f64,
) -> Result<Tensor> {
    let mut logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
    if let Some(bias) = bias {
        logits = logits.broadcast_add(bias)?;
    }
    let w = softmax_last(&logits)?;
    Ok(w.matmul(v)?)
}
