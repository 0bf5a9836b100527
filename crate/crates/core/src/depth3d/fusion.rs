use candle_core::{Module, Tensor};
use candle_nn::{Init, VarBuilder};

use crate::error::{Error, Result};
use crate::nn::{resize_bilinear_tensor, Conv2d};

/// `Z_fuse = g·Z + (1 − g)·F(Z ⊙ P)`, with `F` two 3×3 convolutions around a
/// ReLU and `P` the attention map resized to the embedding grid.
#[derive(Debug, Clone)]
pub struct FusionGate {
    g: Tensor,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl FusionGate {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(FusionGate {
            g: vb.get_with_hints(1, "g", Init::Const(1.0))?,
            conv1: Conv2d::new(channels, channels, 3, 1, 1, true, vb.pp("conv1"))?,
            conv2: Conv2d::new(channels, channels, 3, 1, 1, true, vb.pp("conv2"))?,
        })
    }

    pub fn gate_value(&self) -> Result<f64> {
        Ok(self.g.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?[0])
    }

    pub fn transform(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.conv2.forward(&self.conv1.forward(x)?.relu()?)
    }

    /// `z`: `(B, C, g, g)`; `attention`: `(B, H_r, W_r)`. A gate override of
    /// exactly 1 returns `z` without evaluating `F`.
    pub fn forward(&self, z: &Tensor, attention: &Tensor, gate_override: Option<f64>) -> Result<Tensor> {
        if gate_override == Some(1.0) {
            return Ok(z.clone());
        }
        let (b, _, gh, gw) = z.dims4()?;
        let (ab, _, _) = attention.dims3()?;
        if ab != b {
            return Err(Error::Shape(format!(
                "attention batch {ab} does not match embedding batch {b}"
            )));
        }
        let p = resize_bilinear_tensor(&attention.to_dtype(z.dtype())?, gh, gw)?.unsqueeze(1)?;
        let f = self.transform(&z.broadcast_mul(&p)?)?;
        let out = match gate_override {
            Some(g) => ((z * g)? + (f * (1.0 - g))?)?,
            None => {
                let g = self.g.reshape((1, 1, 1, 1))?;
                (z.broadcast_mul(&g)? + f.broadcast_mul(&(1.0 - &g)?)?)?
            }
        };
        Ok(out)
    }
}
