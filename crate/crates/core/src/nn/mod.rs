//! Shared network plumbing: a seeded parameter store behind candle's
//! `VarBuilder`, and the small layers every branch is assembled from.

mod fused;
mod im2col3;

pub use fused::{normalize_last, softmax_last};
pub use im2col3::im2col3;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Shape, Tensor, Var};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, Linear, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named, seeded parameters. Creation order is deterministic, so two stores
/// built with the same seed and the same layer sequence hold identical values.
#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.vars.lock().unwrap().len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    /// All parameters, sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    /// Parameters whose name satisfies `pred`.
    pub fn select(&self, pred: impl Fn(&str) -> bool) -> Vec<Var> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_elements(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// SHA-256 over each parameter's values (widened to f64, little-endian).
    pub fn hashes(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.named_vars() {
            out.insert(name, tensor_hash(var.as_tensor())?);
        }
        Ok(out)
    }

    fn init_values(&self, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().unwrap();
        match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, up } => (0..n).map(|_| rng.gen_range(lo..=up)).collect(),
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    mean + stdev * z
                })
                .collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    candle_nn::init::NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                    }
                    candle_nn::init::NormalOrUniform::Normal => (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut *rng);
                            std * z
                        })
                        .collect(),
                }
            }
        }
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
        if let Some(v) = self.vars.lock().unwrap().get(name) {
            if v.shape() != &s {
                candle_core::bail!(
                    "parameter {name} exists with shape {:?}, requested {:?}",
                    v.shape(),
                    s
                );
            }
            return Ok(v.as_tensor().clone());
        }
        let values = self.init_values(&s, h);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.lock().unwrap().insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.vars.lock().unwrap().get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("unknown parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.lock().unwrap().contains_key(name)
    }
}

pub fn tensor_hash(t: &Tensor) -> Result<String> {
    let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// PyTorch-default linear init: weights and bias uniform in ±1/sqrt(fan_in).
pub fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let init = Init::Uniform {
        lo: -bound,
        up: bound,
    };
    let w = vb.get_with_hints((out_dim, in_dim), "weight", init)?;
    let b = vb.get_with_hints(out_dim, "bias", init)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn linear_zeros(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Linear> {
    let w = vb.get_with_hints((out_dim, in_dim), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(out_dim, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

/// 2D convolution weights with PyTorch-default init.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        vb: VarBuilder,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_c * kernel * kernel) as f64).sqrt();
        let init = Init::Uniform {
            lo: -bound,
            up: bound,
        };
        let weight = vb.get_with_hints((out_c, in_c, kernel, kernel), "weight", init)?;
        let bias = if bias {
            Some(vb.get_with_hints(out_c, "bias", init)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (o, c, k, _) = self.weight.dims4()?;
        let (n, _, h, w) = x.dims4()?;
        // Lowered to matrix products so both directions run through GEMM.
        let (cols, oh, ow) = if k == self.stride && self.padding == 0 {
            (patchify(x, k)?, h / k, w / k)
        } else if self.stride == 1 && 2 * self.padding + 1 == k {
            (im2col_same(x, k)?, h, w)
        } else {
            let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
            return match &self.bias {
                Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
                None => Ok(y),
            };
        };
        let mut y = cols.matmul(&self.weight.reshape((o, c * k * k))?.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        y.reshape((n, oh, ow, o))?.permute((0, 3, 1, 2))?.contiguous()
    }
}

/// Non-overlapping `k × k` patches as rows `(N·H/k·W/k, C·k·k)`, columns
/// ordered `(c, dy, dx)`.
pub fn patchify(x: &Tensor, k: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (gh, gw) = (h / k, w / k);
    x.reshape((n, c, gh, k, gw, k))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((n * gh * gw, c * k * k))
}

/// Zero-padded stride-1 neighbourhoods as rows `(N·H·W, C·k·k)`, columns
/// ordered `(c, dy, dx)`.
pub fn im2col_same(x: &Tensor, k: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if k == 1 {
        return x.permute((0, 2, 3, 1))?.reshape((n * h * w, c));
    }
    let p = k / 2;
    let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
    let mut taps = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            taps.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    Tensor::stack(&taps, 2)?
        .permute((0, 3, 4, 1, 2))?
        .reshape((n * h * w, c * k * k))
}

/// Layer norm over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        Ok(LayerNorm {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        normalize_last(x, self.eps)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Layer norm across the channel axis of a `(B, C, H, W)` map.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm2d {
    pub fn new(channels: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        Ok(LayerNorm2d {
            weight: vb.get_with_hints(channels, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
            eps,
        })
    }
}

impl Module for LayerNorm2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight.reshape((1, (), 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Bottleneck adapter `x + up(relu(down(x)))`. The up-projection starts at
/// zero, so a fresh adapter is the identity.
#[derive(Debug, Clone)]
pub struct Adapter {
    down: Linear,
    up: Linear,
}

impl Adapter {
    pub fn new(dim: usize, ratio: f64, vb: VarBuilder) -> Result<Self> {
        let hidden = ((ratio * dim as f64).floor() as usize).max(1);
        Ok(Adapter {
            down: linear(dim, hidden, vb.pp("down"))?,
            up: linear_zeros(hidden, dim, vb.pp("up"))?,
        })
    }
}

impl Module for Adapter {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.down.forward(x)?.relu()?;
        x + self.up.forward(&h)?
    }
}

pub fn maybe_adapt(adapter: &Option<Adapter>, x: Tensor) -> candle_core::Result<Tensor> {
    match adapter {
        Some(a) => a.forward(&x),
        None => Ok(x),
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Mlp {
            fc1: linear(dim, hidden, vb.pp("fc1"))?,
            fc2: linear(hidden, dim, vb.pp("fc2"))?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Multi-head attention with optional internal down-projection of the
/// embedding width.
#[derive(Debug, Clone)]
pub struct Attention {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    num_heads: usize,
}

impl Attention {
    pub fn new(dim: usize, num_heads: usize, downsample: usize, vb: VarBuilder) -> Result<Self> {
        let internal = dim / downsample;
        if internal % num_heads != 0 {
            return Err(Error::Invalid(format!(
                "attention width {internal} not divisible by {num_heads} heads"
            )));
        }
        Ok(Attention {
            q_proj: linear(dim, internal, vb.pp("q_proj"))?,
            k_proj: linear(dim, internal, vb.pp("k_proj"))?,
            v_proj: linear(dim, internal, vb.pp("v_proj"))?,
            out_proj: linear(internal, dim, vb.pp("out_proj"))?,
            num_heads,
        })
    }

    fn separate_heads(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        x.reshape((b, n, self.num_heads, c / self.num_heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> candle_core::Result<Tensor> {
        let q = self.separate_heads(&self.q_proj.forward(q)?)?;
        let k = self.separate_heads(&self.k_proj.forward(k)?)?;
        let v = self.separate_heads(&self.v_proj.forward(v)?)?;
        let (b, h, n, hd) = q.dims4()?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, h * hd))?;
        self.out_proj.forward(&out)
    }
}

/// Row-stochastic bilinear interpolation matrix `(n_out, n_in)` with
/// half-pixel centres.
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for i in 0..n_out {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, n_in as f64 - 1.0);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let f = x - lo as f64;
        m[i * n_in + lo] += 1.0 - f;
        m[i * n_in + hi] += f;
    }
    m
}

/// Bilinear resize of the last two axes of `x` via two matrix products
/// (differentiable with respect to `x`).
pub fn resize_bilinear_tensor(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    let dims = x.dims().to_vec();
    let n = dims.len();
    let (h, w) = (dims[n - 2], dims[n - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let lead: usize = dims[..n - 2].iter().product();
    let flat = x.reshape((lead, h, w))?;
    let t = flat.broadcast_matmul(&rx.t()?)?;
    let t = ry.broadcast_matmul(&t)?;
    let mut out_dims = dims[..n - 2].to_vec();
    out_dims.push(out_h);
    out_dims.push(out_w);
    t.reshape(out_dims)
}
