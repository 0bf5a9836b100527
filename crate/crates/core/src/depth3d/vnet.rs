//! A small three-level V-net. Activations are `(B, C, D, H, W)` and every
//! convolution is lowered to a matrix product over stacked shifted copies,
//! which keeps both passes on the GEMM path.

use candle_core::{Module, Tensor};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::im2col3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VNetConfig {
    /// Cubic input edge length.
    pub size: usize,
    /// Channels at the first level; doubled at each level below.
    pub base_channels: usize,
    pub levels: usize,
}

impl Default for VNetConfig {
    fn default() -> Self {
        VNetConfig {
            size: 64,
            base_channels: 8,
            levels: 3,
        }
    }
}

fn uniform(fan_in: usize) -> Init {
    let b = 1.0 / (fan_in as f64).sqrt();
    Init::Uniform { lo: -b, up: b }
}

/// `(K, M) × (B, M, N)` → `(B, K, N)`.
fn batched_left_matmul(w: &Tensor, cols: &Tensor) -> candle_core::Result<Tensor> {
    let b = cols.dim(0)?;
    if b == 1 {
        return w.matmul(&cols.squeeze(0)?)?.unsqueeze(0);
    }
    let outs = (0..b)
        .map(|i| w.matmul(&cols.get(i)?))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Tensor::stack(&outs, 0)
}

/// 3×3×3 convolution, unit stride, zero padding. Weight layout
/// `(C_out, 27, C_in)` with taps ordered `(kd, kh, kw)`.
#[derive(Debug, Clone)]
struct Conv3 {
    weight: Tensor,
    bias: Tensor,
}

impl Conv3 {
    fn new(in_c: usize, out_c: usize, vb: VarBuilder) -> Result<Self> {
        let init = uniform(in_c * 27);
        Ok(Conv3 {
            weight: vb.get_with_hints((out_c, 27, in_c), "weight", init)?,
            bias: vb.get_with_hints(out_c, "bias", init)?,
        })
    }
}

impl Module for Conv3 {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, d, h, w) = x.dims5()?;
        let o = self.bias.dim(0)?;
        let cols = im2col3(x)?;
        batched_left_matmul(&self.weight.reshape((o, 27 * c))?, &cols)?
            .broadcast_add(&self.bias.reshape((1, o, 1))?)?
            .reshape((b, o, d, h, w))
    }
}

/// 2×2×2 convolution with stride 2. Weight layout `(C_out, C_in, 8)` with
/// taps ordered `(kd, kh, kw)`.
#[derive(Debug, Clone)]
struct Down {
    weight: Tensor,
    bias: Tensor,
}

impl Down {
    fn new(in_c: usize, out_c: usize, vb: VarBuilder) -> Result<Self> {
        let init = uniform(in_c * 8);
        Ok(Down {
            weight: vb.get_with_hints((out_c, in_c, 8), "weight", init)?,
            bias: vb.get_with_hints(out_c, "bias", init)?,
        })
    }
}

impl Module for Down {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, d, h, w) = x.dims5()?;
        let o = self.bias.dim(0)?;
        let (d2, h2, w2) = (d / 2, h / 2, w / 2);
        // Move each stride-2 offset in front of the spatial axes.
        let t = x
            .reshape((b * c, d2, 2, h * w))?
            .permute((0, 2, 1, 3))?
            .reshape((b * c * 2 * d2, h2, 2, w2, 2))?
            .permute((0, 2, 4, 1, 3))?
            .reshape((b * c * 2, d2, 4, h2 * w2))?
            .permute((0, 2, 1, 3))?
            .reshape((b, c * 8, d2 * h2 * w2))?;
        batched_left_matmul(&self.weight.reshape((o, c * 8))?, &t)?
            .broadcast_add(&self.bias.reshape((1, o, 1))?)?
            .reshape((b, o, d2, h2, w2))
    }
}

/// Transposed 2×2×2 convolution with stride 2. Weight layout
/// `(C_out, 8, C_in)` with taps ordered `(kd, kh, kw)`.
#[derive(Debug, Clone)]
struct Up {
    weight: Tensor,
    bias: Tensor,
}

impl Up {
    fn new(in_c: usize, out_c: usize, vb: VarBuilder) -> Result<Self> {
        let init = uniform(in_c);
        Ok(Up {
            weight: vb.get_with_hints((out_c, 8, in_c), "weight", init)?,
            bias: vb.get_with_hints(out_c, "bias", init)?,
        })
    }
}

impl Module for Up {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, d, h, w) = x.dims5()?;
        let o = self.bias.dim(0)?;
        let y = batched_left_matmul(&self.weight.reshape((o * 8, c))?, &x.reshape((b, c, d * h * w))?)?;
        // Rows are (o, kd, kh, kw); interleave kw, then kh, then kd.
        let y = y
            .reshape((b * o * 4, 2, d * h, w))?
            .permute((0, 2, 3, 1))?
            .reshape((b * o * 2, 2, d, h, 2 * w))?
            .permute((0, 2, 3, 1, 4))?
            .reshape((b * o, 2, d, 4 * h * w))?
            .permute((0, 2, 1, 3))?
            .reshape((b, o, 2 * d, 2 * h, 2 * w))?;
        y.broadcast_add(&self.bias.reshape((1, o, 1, 1, 1))?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    convs: Vec<Conv3>,
}

impl Stage {
    fn new(in_c: usize, out_c: usize, n: usize, vb: VarBuilder) -> Result<Self> {
        let convs = (0..n)
            .map(|i| Conv3::new(if i == 0 { in_c } else { out_c }, out_c, vb.pp(i.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Stage { convs })
    }
}

impl Module for Stage {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for (i, c) in self.convs.iter().enumerate() {
            let y = c.forward(&h)?.relu()?;
            // Residual connection once the width is settled.
            h = if i > 0 { (y + h)? } else { y };
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct VNet {
    cfg: VNetConfig,
    enc: Vec<Stage>,
    down: Vec<Down>,
    up: Vec<Up>,
    dec: Vec<Stage>,
    head_w: Tensor,
    head_b: Tensor,
}

impl VNet {
    pub fn new(cfg: &VNetConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.levels < 1 || cfg.size % (1 << (cfg.levels - 1)) != 0 {
            return Err(Error::Invalid(format!(
                "size {} must be divisible by 2^(levels-1) with levels={}",
                cfg.size, cfg.levels
            )));
        }
        let ch = |l: usize| cfg.base_channels << l;
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in 0..cfg.levels {
            let in_c = if l == 0 { 1 } else { ch(l) };
            enc.push(Stage::new(in_c, ch(l), 2, vb.pp(format!("enc.{l}")))?);
            if l + 1 < cfg.levels {
                down.push(Down::new(ch(l), ch(l + 1), vb.pp(format!("down.{l}")))?);
                up.push(Up::new(ch(l + 1), ch(l), vb.pp(format!("up.{l}")))?);
                dec.push(Stage::new(2 * ch(l), ch(l), 2, vb.pp(format!("dec.{l}")))?);
            }
        }
        let c0 = ch(0);
        Ok(VNet {
            cfg: cfg.clone(),
            enc,
            down,
            up,
            dec,
            head_w: vb.get_with_hints((1, c0), "head.weight", uniform(c0))?,
            head_b: vb.get_with_hints(1, "head.bias", uniform(c0))?,
        })
    }

    pub fn config(&self) -> &VNetConfig {
        &self.cfg
    }

    /// Voxelwise logits for `(B, D, H, W)` input.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (b, d, h, w) = x.dims4()?;
        let s = self.cfg.size;
        if (d, h, w) != (s, s, s) {
            return Err(Error::Shape(format!("V-net expects {s}³ input, got {:?}", x.dims())));
        }
        let mut skips = Vec::new();
        let mut hcur = x.unsqueeze(1)?;
        for l in 0..self.cfg.levels {
            hcur = self.enc[l].forward(&hcur)?;
            if l + 1 < self.cfg.levels {
                skips.push(hcur.clone());
                hcur = self.down[l].forward(&hcur)?.relu()?;
            }
        }
        for l in (0..self.cfg.levels - 1).rev() {
            let u = self.up[l].forward(&hcur)?.relu()?;
            let cat = Tensor::cat(&[&u, &skips[l]], 1)?;
            hcur = self.dec[l].forward(&cat)?;
        }
        // 1×1×1 head over channels.
        let c0 = hcur.dim(1)?;
        let y = batched_left_matmul(&self.head_w, &hcur.reshape((b, c0, d * h * w))?)?
            .broadcast_add(&self.head_b.reshape((1, 1, 1))?)?;
        Ok(y.reshape((b, d, h, w))?)
    }

    /// Sigmoid probabilities, same shape as the input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(x)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth3d::DepthModel;
    use candle_core::{DType, Device};
    use ndarray::Array3;

    fn cube(seed: u64, s: usize) -> Array3<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((s, s, s), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn probabilities_keep_shape_and_range() {
        let cfg = VNetConfig { size: 16, base_channels: 4, levels: 3 };
        let m = DepthModel::new(&cfg, 1, DType::F32, &Device::Cpu).unwrap();
        let p = m.predict(&cube(0, 16)).unwrap();
        assert_eq!(p.dim(), (16, 16, 16));
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let x = Tensor::zeros((2, 16, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.net.forward(&x).unwrap().dims(), &[2, 16, 16, 16]);
        let bad = Tensor::zeros((1, 8, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(m.net.forward(&bad).is_err());
    }

    #[test]
    fn same_seed_same_output() {
        let cfg = VNetConfig { size: 8, base_channels: 2, levels: 2 };
        let a = DepthModel::new(&cfg, 9, DType::F32, &Device::Cpu).unwrap();
        let b = DepthModel::new(&cfg, 9, DType::F32, &Device::Cpu).unwrap();
        let x = cube(4, 8);
        assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
        let c = DepthModel::new(&cfg, 10, DType::F32, &Device::Cpu).unwrap();
        assert_ne!(a.predict(&x).unwrap(), c.predict(&x).unwrap());
        let reloaded = DepthModel::from_bundle(&a.to_bundle("V3D", 9).unwrap(), &Device::Cpu).unwrap();
        assert_eq!(reloaded.predict(&x).unwrap(), a.predict(&x).unwrap());
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let store = crate::nn::ParamStore::new(0);
        let vb = store.var_builder(DType::F32, &Device::Cpu);
        assert!(VNet::new(&VNetConfig { size: 10, base_channels: 2, levels: 3 }, vb).is_err());
    }
}
