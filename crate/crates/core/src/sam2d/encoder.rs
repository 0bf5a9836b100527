use candle_core::{Module, Tensor};
use candle_nn::{Init, VarBuilder};

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{maybe_adapt, Adapter, Attention, Conv2d, LayerNorm, LayerNorm2d, Mlp};

/// One ViT block. When adapters are enabled the first one wraps the
/// attention output and the second one wraps the MLP output, both before
/// their residual add.
#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    adapter_attn: Option<Adapter>,
    norm2: LayerNorm,
    mlp: Mlp,
    adapter_mlp: Option<Adapter>,
}

impl Block {
    fn new(cfg: &EncoderConfig, adapter: bool, vb: VarBuilder) -> Result<Self> {
        let c = cfg.embed_dim;
        let adapter_at = |name: &str| -> Result<Option<Adapter>> {
            if adapter {
                Ok(Some(Adapter::new(c, cfg.adapter_ratio, vb.pp(name))?))
            } else {
                Ok(None)
            }
        };
        Ok(Block {
            norm1: LayerNorm::new(c, 1e-6, vb.pp("norm1"))?,
            attn: Attention::new(c, cfg.num_heads, 1, vb.pp("attn"))?,
            adapter_attn: adapter_at("adapter_attn")?,
            norm2: LayerNorm::new(c, 1e-6, vb.pp("norm2"))?,
            mlp: Mlp::new(c, c * cfg.mlp_ratio, vb.pp("mlp"))?,
            adapter_mlp: adapter_at("adapter_mlp")?,
        })
    }

    fn forward(&self, x: &Tensor, use_adapters: bool) -> candle_core::Result<Tensor> {
        let none = None;
        let (a1, a2) = if use_adapters {
            (&self.adapter_attn, &self.adapter_mlp)
        } else {
            (&none, &none)
        };
        let h = self.norm1.forward(x)?;
        let h = self.attn.forward(&h, &h, &h)?;
        let x = (x + maybe_adapt(a1, h)?)?;
        let h = self.mlp.forward(&self.norm2.forward(&x)?)?;
        x + maybe_adapt(a2, h)?
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    cfg: EncoderConfig,
    patch_embed: Conv2d,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    neck_conv1: Conv2d,
    neck_norm1: LayerNorm2d,
    neck_conv2: Conv2d,
    neck_norm2: LayerNorm2d,
}

impl ImageEncoder {
    pub fn new(cfg: &EncoderConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.grid();
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(cfg, cfg.adapter_flags[i], vb.pp(format!("blocks.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageEncoder {
            cfg: cfg.clone(),
            patch_embed: Conv2d::new(
                3,
                cfg.embed_dim,
                cfg.patch_size,
                cfg.patch_size,
                0,
                true,
                vb.pp("patch_embed"),
            )?,
            pos_embed: vb.get_with_hints(
                (1, g * g, cfg.embed_dim),
                "pos_embed",
                Init::Randn {
                    mean: 0.0,
                    stdev: 0.02,
                },
            )?,
            blocks,
            neck_conv1: Conv2d::new(cfg.embed_dim, cfg.out_channels, 1, 1, 0, false, vb.pp("neck.conv1"))?,
            neck_norm1: LayerNorm2d::new(cfg.out_channels, 1e-6, vb.pp("neck.norm1"))?,
            neck_conv2: Conv2d::new(cfg.out_channels, cfg.out_channels, 3, 1, 1, false, vb.pp("neck.conv2"))?,
            neck_norm2: LayerNorm2d::new(cfg.out_channels, 1e-6, vb.pp("neck.norm2"))?,
        })
    }

    /// `(B, 3, S, S)` → `(B, C_Z, S/16, S/16)`.
    pub fn forward(&self, x: &Tensor, use_adapters: bool) -> Result<Tensor> {
        let s = self.cfg.input_size;
        let (b, c, h, w) = x.dims4()?;
        if (c, h, w) != (3, s, s) {
            return Err(Error::Shape(format!(
                "encoder expects (B, 3, {s}, {s}), got {:?}",
                x.dims()
            )));
        }
        let g = self.cfg.grid();
        let t = self.patch_embed.forward(x)?;
        let mut t = t.flatten_from(2)?.transpose(1, 2)?.broadcast_add(&self.pos_embed)?;
        for blk in &self.blocks {
            t = blk.forward(&t, use_adapters)?;
        }
        let z = t.transpose(1, 2)?.reshape((b, self.cfg.embed_dim, g, g))?;
        let z = self.neck_norm1.forward(&self.neck_conv1.forward(&z)?)?;
        let z = self.neck_norm2.forward(&self.neck_conv2.forward(&z)?)?;
        Ok(z)
    }
}
