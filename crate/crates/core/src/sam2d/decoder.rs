use candle_core::{Module, Tensor};
use candle_nn::{Init, Linear, VarBuilder};

use super::prompt::PromptEmbedding;
use super::DecoderConfig;
use crate::error::{Error, Result};
use crate::nn::{linear, resize_bilinear_tensor, Adapter, Attention, LayerNorm, LayerNorm2d, Mlp};

/// Two-way block: token self-attention, token→image cross-attention, token
/// MLP, image→token cross-attention. Adapters wrap each sublayer output.
#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_t2i: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_i2t: Attention,
    norm4: LayerNorm,
    adapters: Option<[Adapter; 4]>,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn new(cfg: &DecoderConfig, c: usize, skip_first_pe: bool, vb: VarBuilder) -> Result<Self> {
        let adapters = if cfg.adapters {
            Some([
                Adapter::new(c, cfg.adapter_ratio, vb.pp("adapter_self"))?,
                Adapter::new(c, cfg.adapter_ratio, vb.pp("adapter_t2i"))?,
                Adapter::new(c, cfg.adapter_ratio, vb.pp("adapter_mlp"))?,
                Adapter::new(c, cfg.adapter_ratio, vb.pp("adapter_i2t"))?,
            ])
        } else {
            None
        };
        Ok(TwoWayBlock {
            self_attn: Attention::new(c, cfg.num_heads, 1, vb.pp("self_attn"))?,
            norm1: LayerNorm::new(c, 1e-5, vb.pp("norm1"))?,
            cross_t2i: Attention::new(c, cfg.num_heads, cfg.attn_downsample, vb.pp("cross_t2i"))?,
            norm2: LayerNorm::new(c, 1e-5, vb.pp("norm2"))?,
            mlp: Mlp::new(c, cfg.mlp_dim, vb.pp("mlp"))?,
            norm3: LayerNorm::new(c, 1e-5, vb.pp("norm3"))?,
            cross_i2t: Attention::new(c, cfg.num_heads, cfg.attn_downsample, vb.pp("cross_i2t"))?,
            norm4: LayerNorm::new(c, 1e-5, vb.pp("norm4"))?,
            adapters,
            skip_first_pe,
        })
    }

    fn adapt(&self, i: usize, x: Tensor, on: bool) -> candle_core::Result<Tensor> {
        match (&self.adapters, on) {
            (Some(a), true) => a[i].forward(&x),
            _ => Ok(x),
        }
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
        on: bool,
    ) -> candle_core::Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_pe {
            let a = self.self_attn.forward(queries, queries, queries)?;
            self.adapt(0, a, on)?
        } else {
            let q = (queries + query_pe)?;
            let a = self.self_attn.forward(&q, &q, queries)?;
            (queries + self.adapt(0, a, on)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let a = self.cross_t2i.forward(&q, &k, keys)?;
        let queries = self.norm2.forward(&(queries + self.adapt(1, a, on)?)?)?;

        let m = self.mlp.forward(&queries)?;
        let queries = self.norm3.forward(&(&queries + self.adapt(2, m, on)?)?)?;

        let q = (&queries + query_pe)?;
        let a = self.cross_i2t.forward(&k, &q, &queries)?;
        let keys = self.norm4.forward(&(keys + self.adapt(3, a, on)?)?)?;
        Ok((queries, keys))
    }
}

/// `ConvTranspose2d(k=2, s=2)` as a per-pixel linear map followed by a pixel
/// shuffle. Weight layout matches `(C_in, C_out, 2, 2)`.
#[derive(Debug, Clone)]
struct Upsample2x {
    weight: Tensor,
    bias: Tensor,
    out_c: usize,
}

impl Upsample2x {
    fn new(in_c: usize, out_c: usize, vb: VarBuilder) -> Result<Self> {
        let bound = 1.0 / ((out_c * 4) as f64).sqrt();
        let init = Init::Uniform {
            lo: -bound,
            up: bound,
        };
        Ok(Upsample2x {
            weight: vb.get_with_hints((in_c, out_c, 2, 2), "weight", init)?,
            bias: vb.get_with_hints(out_c, "bias", init)?,
            out_c,
        })
    }
}

impl Module for Upsample2x {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let o = self.out_c;
        let y = x
            .permute((0, 2, 3, 1))?
            .reshape((b * h * w, c))?
            .matmul(&self.weight.reshape((c, o * 4))?)?;
        let y = y
            .reshape((b, h, w, o, 2, 2))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((b, o, 2 * h, 2 * w))?;
        y.broadcast_add(&self.bias.reshape((1, o, 1, 1))?)
    }
}

/// Three-layer ReLU perceptron producing the per-token mask weights.
#[derive(Debug, Clone)]
struct HyperMlp {
    layers: Vec<Linear>,
}

impl HyperMlp {
    fn new(c: usize, out: usize, vb: VarBuilder) -> Result<Self> {
        Ok(HyperMlp {
            layers: vec![
                linear(c, c, vb.pp("0"))?,
                linear(c, c, vb.pp("1"))?,
                linear(c, out, vb.pp("2"))?,
            ],
        })
    }
}

impl Module for HyperMlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    channels: usize,
    num_classes: usize,
    mask_tokens: Tensor,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    norm_final: LayerNorm,
    up1: Upsample2x,
    up_norm: LayerNorm2d,
    up2: Upsample2x,
    hyper: Vec<HyperMlp>,
}

impl MaskDecoder {
    pub fn new(cfg: &DecoderConfig, channels: usize, vb: VarBuilder) -> Result<Self> {
        let c = channels;
        if c % 8 != 0 {
            return Err(Error::Invalid(format!("decoder width {c} must be divisible by 8")));
        }
        let blocks = (0..cfg.depth)
            .map(|i| TwoWayBlock::new(cfg, c, i == 0, vb.pp(format!("blocks.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let hyper = (0..cfg.num_classes)
            .map(|i| HyperMlp::new(c, c / 8, vb.pp(format!("hyper.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskDecoder {
            channels: c,
            num_classes: cfg.num_classes,
            mask_tokens: vb.get_with_hints(
                (cfg.num_classes, c),
                "mask_tokens",
                Init::Randn {
                    mean: 0.0,
                    stdev: 1.0,
                },
            )?,
            blocks,
            final_attn: Attention::new(c, cfg.num_heads, cfg.attn_downsample, vb.pp("final_attn"))?,
            norm_final: LayerNorm::new(c, 1e-5, vb.pp("norm_final"))?,
            up1: Upsample2x::new(c, c / 4, vb.pp("up1"))?,
            up_norm: LayerNorm2d::new(c / 4, 1e-6, vb.pp("up_norm"))?,
            up2: Upsample2x::new(c / 4, c / 8, vb.pp("up2"))?,
            hyper,
        })
    }

    /// `z`: `(B, C, g, g)`; `image_pe`: `(C, g, g)`; one prompt embedding per
    /// sample, all with the same sparse length. Returns `(B, classes, out, out)`.
    pub fn forward_batch(
        &self,
        z: &Tensor,
        image_pe: &Tensor,
        prompts: &[&PromptEmbedding],
        out_size: usize,
        use_adapters: bool,
    ) -> Result<Tensor> {
        let (b, c, g, _) = z.dims4()?;
        if c != self.channels || prompts.len() != b {
            return Err(Error::Shape(format!(
                "decoder got embedding {:?} with {} prompt sets",
                z.dims(),
                prompts.len()
            )));
        }
        let sparse = Tensor::stack(&prompts.iter().map(|p| p.sparse.clone()).collect::<Vec<_>>(), 0)?;
        let dense = Tensor::stack(&prompts.iter().map(|p| p.dense.clone()).collect::<Vec<_>>(), 0)?;
        let out_tokens = self.mask_tokens.unsqueeze(0)?.broadcast_as((b, self.num_classes, c))?;
        let tokens = Tensor::cat(&[&out_tokens, &sparse], 1)?;

        let src = (z + dense)?;
        let keys_pe = image_pe.flatten_from(1)?.t()?.unsqueeze(0)?.broadcast_as((b, g * g, c))?;
        let mut keys = src.flatten_from(2)?.transpose(1, 2)?;
        let mut queries = tokens.clone();
        for blk in &self.blocks {
            (queries, keys) = blk.forward(&queries, &keys, &tokens, &keys_pe, use_adapters)?;
        }
        let q = (&queries + &tokens)?;
        let k = (&keys + &keys_pe)?;
        let a = self.final_attn.forward(&q, &k, &keys)?;
        let queries = self.norm_final.forward(&(queries + a)?)?;

        let src = keys.transpose(1, 2)?.reshape((b, c, g, g))?;
        let up = self.up_norm.forward(&self.up1.forward(&src)?)?.gelu_erf()?;
        let up = self.up2.forward(&up)?.gelu_erf()?;
        let (_, cu, hu, wu) = up.dims4()?;
        let hyper_in = Tensor::stack(
            &self
                .hyper
                .iter()
                .enumerate()
                .map(|(i, m)| m.forward(&queries.narrow(1, i, 1)?.squeeze(1)?))
                .collect::<candle_core::Result<Vec<_>>>()?,
            1,
        )?;
        let masks = hyper_in
            .matmul(&up.reshape((b, cu, hu * wu))?)?
            .reshape((b, self.num_classes, hu, wu))?;
        Ok(resize_bilinear_tensor(&masks, out_size, out_size)?)
    }
}
