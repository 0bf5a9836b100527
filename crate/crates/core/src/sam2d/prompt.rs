use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Init, VarBuilder};

use crate::error::Result;
use crate::prompting::Prompt;

/// Sparse tokens `(n, C)` and a dense grid `(C, g, g)` for one sample.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub sparse: Tensor,
    pub dense: Tensor,
}

/// Random-Fourier positional encoding over normalised `[0, 1]²` coordinates.
#[derive(Debug, Clone)]
pub struct PositionEncoding {
    gaussian: Tensor,
}

impl PositionEncoding {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(PositionEncoding {
            gaussian: vb.get_with_hints(
                (2, channels / 2),
                "pe_gaussian",
                Init::Randn {
                    mean: 0.0,
                    stdev: 1.0,
                },
            )?,
        })
    }

    /// `coords` is `(n, 2)` of `(x, y)` in `[0, 1]`; returns `(n, C)`.
    pub fn encode(&self, coords: &Tensor) -> candle_core::Result<Tensor> {
        let c = ((coords * 2.0)? - 1.0)?;
        let c = (c.matmul(&self.gaussian)? * (2.0 * std::f64::consts::PI))?;
        Tensor::cat(&[c.sin()?, c.cos()?], D::Minus1)
    }

    /// Dense encoding of a `g × g` grid at cell centres, `(C, g, g)`.
    pub fn grid(&self, g: usize) -> candle_core::Result<Tensor> {
        let dev = self.gaussian.device();
        let mut xy = Vec::with_capacity(2 * g * g);
        for i in 0..g {
            for j in 0..g {
                xy.push((j as f64 + 0.5) / g as f64);
                xy.push((i as f64 + 0.5) / g as f64);
            }
        }
        let coords = Tensor::from_vec(xy, (g * g, 2), dev)?.to_dtype(self.gaussian.dtype())?;
        let pe = self.encode(&coords)?;
        let c = pe.dim(1)?;
        pe.t()?.reshape((c, g, g))
    }
}

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    input_size: usize,
    pub pe: PositionEncoding,
    point_embed: Tensor,
    box_tl_embed: Tensor,
    box_br_embed: Tensor,
    default_sparse: Tensor,
    default_dense: Tensor,
}

impl PromptEncoder {
    pub fn new(channels: usize, grid: usize, input_size: usize, vb: VarBuilder) -> Result<Self> {
        let randn = Init::Randn {
            mean: 0.0,
            stdev: 1.0,
        };
        Ok(PromptEncoder {
            input_size,
            pe: PositionEncoding::new(channels, vb.clone())?,
            point_embed: vb.get_with_hints((1, channels), "point_embed", randn)?,
            box_tl_embed: vb.get_with_hints((1, channels), "box_tl_embed", randn)?,
            box_br_embed: vb.get_with_hints((1, channels), "box_br_embed", randn)?,
            default_sparse: vb.get_with_hints((1, channels), "default_sparse", randn)?,
            default_dense: vb.get_with_hints((channels, grid, grid), "default_dense", randn)?,
        })
    }

    fn device(&self) -> &Device {
        self.point_embed.device()
    }

    fn dtype(&self) -> DType {
        self.point_embed.dtype()
    }

    fn coords(&self, xy: &[[f64; 2]]) -> candle_core::Result<Tensor> {
        let s = self.input_size as f64;
        let flat: Vec<f64> = xy.iter().flat_map(|p| [(p[0] + 0.5) / s, (p[1] + 0.5) / s]).collect();
        Tensor::from_vec(flat, (xy.len(), 2), self.device())?.to_dtype(self.dtype())
    }

    /// Prompts are in encoder-input pixel coordinates; `None` yields the
    /// stored defaults unchanged.
    pub fn forward(&self, prompt: Option<&Prompt>) -> Result<PromptEmbedding> {
        let Some(prompt) = prompt else {
            return Ok(PromptEmbedding {
                sparse: self.default_sparse.clone(),
                dense: self.default_dense.clone(),
            });
        };
        prompt.validate(self.input_size, self.input_size)?;
        let sparse = match prompt {
            Prompt::Points(pts) => self
                .pe
                .encode(&self.coords(pts)?)?
                .broadcast_add(&self.point_embed)?,
            Prompt::Box(_) | Prompt::Boxes(_) => {
                let mut tokens = Vec::new();
                for b in prompt.boxes() {
                    let corners = self.pe.encode(&self.coords(&[[b[0], b[1]], [b[2], b[3]]])?)?;
                    tokens.push(corners.narrow(0, 0, 1)?.broadcast_add(&self.box_tl_embed)?);
                    tokens.push(corners.narrow(0, 1, 1)?.broadcast_add(&self.box_br_embed)?);
                }
                Tensor::cat(&tokens, 0)?
            }
        };
        Ok(PromptEmbedding {
            sparse,
            dense: self.default_dense.clone(),
        })
    }
}
