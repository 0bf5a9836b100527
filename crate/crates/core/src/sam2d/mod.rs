//! The promptable 2D branch: ViT encoder with optional adapters, prompt
//! encoder, two-way mask decoder, and the fusion gate that injects depth
//! attention between encoder and decoder.

mod decoder;
mod encoder;
mod prompt;

pub use decoder::MaskDecoder;
pub use encoder::ImageEncoder;
pub use prompt::{PositionEncoding, PromptEmbedding, PromptEncoder};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelBundle;
use crate::depth3d::FusionGate;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::prompting::Prompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// One flag per ViT block.
    pub adapter_flags: Vec<bool>,
    pub adapter_ratio: f64,
    pub out_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 256,
            patch_size: 16,
            embed_dim: 96,
            depth: 8,
            num_heads: 4,
            mlp_ratio: 4,
            adapter_flags: vec![true; 8],
            adapter_ratio: 0.25,
            out_channels: 128,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(Error::Invalid(format!(
                "input size {} not divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.adapter_flags.len() != self.depth {
            return Err(Error::Invalid(format!(
                "{} adapter flags for {} blocks",
                self.adapter_flags.len(),
                self.depth
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Invalid(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    /// Internal width divisor of the cross-attention layers.
    pub attn_downsample: usize,
    pub adapters: bool,
    pub adapter_ratio: f64,
    /// Output channels: background and bone.
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            depth: 2,
            num_heads: 4,
            mlp_dim: 256,
            attn_downsample: 2,
            adapters: true,
            adapter_ratio: 0.25,
            num_classes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// A small configuration for tests and quick experiments.
    pub fn tiny(input_size: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                input_size,
                patch_size: 16,
                embed_dim: 32,
                depth: 2,
                num_heads: 2,
                mlp_ratio: 2,
                adapter_flags: vec![true, true],
                adapter_ratio: 0.25,
                out_channels: 32,
            },
            decoder: DecoderConfig {
                depth: 1,
                num_heads: 2,
                mlp_dim: 32,
                attn_downsample: 2,
                adapters: true,
                adapter_ratio: 0.25,
                num_classes: 2,
            },
        }
    }
}

/// Parameter groups used by the training stages.
pub fn is_adapter(name: &str) -> bool {
    name.contains("adapter")
}

pub fn is_head(name: &str) -> bool {
    name.starts_with("decoder.mask_tokens") || name.starts_with("decoder.hyper.")
}

pub fn is_encoder(name: &str) -> bool {
    name.starts_with("encoder.")
}

pub fn is_frozen_constant(name: &str) -> bool {
    name == "prompt.pe_gaussian"
}

/// Selects what the model evaluates for one forward call.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardOptions {
    /// Replaces the learned gate; `Some(1.0)` skips fusion entirely.
    pub gate_override: Option<f64>,
    /// Disables every adapter (they are identity maps at initialisation).
    pub disable_adapters: bool,
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: ImageEncoder,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
    pub fusion: FusionGate,
    pub device: Device,
    pub dtype: DType,
}

impl SegModel {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.encoder.validate()?;
        let store = ParamStore::new(seed);
        let vb = store.var_builder(dtype, device);
        let c = cfg.encoder.out_channels;
        let g = cfg.encoder.grid();
        let encoder = ImageEncoder::new(&cfg.encoder, vb.pp("encoder"))?;
        let prompt = PromptEncoder::new(c, g, cfg.encoder.input_size, vb.pp("prompt"))?;
        let decoder = MaskDecoder::new(&cfg.decoder, c, vb.pp("decoder"))?;
        let fusion = FusionGate::new(c, vb.pp("fusion"))?;
        Ok(SegModel {
            cfg: cfg.clone(),
            store,
            encoder,
            prompt,
            decoder,
            fusion,
            device: device.clone(),
            dtype,
        })
    }

    pub fn input_size(&self) -> usize {
        self.cfg.encoder.input_size
    }

    pub fn encode(&self, x: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
        self.encoder.forward(x, !opts.disable_adapters)
    }

    pub fn encode_prompts(&self, prompt: Option<&Prompt>) -> Result<PromptEmbedding> {
        self.prompt.forward(prompt)
    }

    /// Optional fusion followed by decoding. `attention` is `(B, H_r, W_r)`.
    pub fn decode(
        &self,
        z: &Tensor,
        prompts: &[Option<&Prompt>],
        attention: Option<&Tensor>,
        opts: ForwardOptions,
    ) -> Result<Tensor> {
        let z = match attention {
            Some(a) => self.fusion.forward(z, a, opts.gate_override)?,
            None => z.clone(),
        };
        let b = z.dim(0)?;
        if prompts.len() != b {
            return Err(Error::Shape(format!("{} prompt entries for batch {b}", prompts.len())));
        }
        let pes = prompts
            .iter()
            .map(|p| self.encode_prompts(*p))
            .collect::<Result<Vec<_>>>()?;
        let image_pe = self.prompt.pe.grid(self.cfg.encoder.grid())?;
        let s = self.input_size();
        let on = !opts.disable_adapters;
        let same_len = pes.windows(2).all(|w| w[0].sparse.dim(0).ok() == w[1].sparse.dim(0).ok());
        if same_len {
            let refs: Vec<&PromptEmbedding> = pes.iter().collect();
            return self.decoder.forward_batch(&z, &image_pe, &refs, s, on);
        }
        let outs = (0..b)
            .map(|i| self.decoder.forward_batch(&z.narrow(0, i, 1)?, &image_pe, &[&pes[i]], s, on))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&outs, 0)?)
    }

    /// Full pass: `(B, 3, S, S)` → `(B, 2, S, S)` logits.
    pub fn forward(
        &self,
        x: &Tensor,
        prompts: &[Option<&Prompt>],
        attention: Option<&Tensor>,
        opts: ForwardOptions,
    ) -> Result<Tensor> {
        let z = self.encode(x, opts)?;
        self.decode(&z, prompts, attention, opts)
    }

    pub fn gate(&self) -> Result<f64> {
        self.fusion.gate_value()
    }

    pub fn to_bundle(&self, stage: &str, seed: u64) -> Result<ModelBundle> {
        ModelBundle::from_store(&self.store, serde_json::to_value(&self.cfg)?, stage, seed)
    }

    /// Builds a model from a bundle's config and copies all its parameters.
    pub fn from_bundle(bundle: &ModelBundle, device: &Device) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(bundle.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bundle config is not a 2D model config: {e}")))?;
        let m = SegModel::new(&cfg, bundle.seed, DType::F32, device)?;
        m.load_pretrained(bundle, true)?;
        Ok(m)
    }

    /// Overwrites matching parameters. In strict mode every bundle entry must
    /// exist with the right shape, and every parameter outside the adapters
    /// and output heads must be present.
    pub fn load_pretrained(&self, bundle: &ModelBundle, strict: bool) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let vars = self.store.named_vars();
        if strict {
            for name in bundle.params.keys() {
                if self.store.get(name).is_none() {
                    return Err(Error::Checkpoint(format!("unexpected parameter {name}")));
                }
            }
        }
        for (name, var) in vars {
            match bundle.params.get(&name) {
                Some(t) if t.shape == var.dims() => {
                    var.set(&t.to_tensor(self.dtype, &self.device)?)?;
                    report.loaded.push(name);
                }
                Some(t) => {
                    if strict {
                        return Err(Error::Checkpoint(format!(
                            "{name}: bundle shape {:?}, model shape {:?}",
                            t.shape,
                            var.dims()
                        )));
                    }
                    report.skipped.push(name);
                }
                None => {
                    if strict && !is_adapter(&name) && !is_head(&name) {
                        return Err(Error::Checkpoint(format!("missing parameter {name}")));
                    }
                    report.missing.push(name);
                }
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
    pub missing: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dtype: DType) -> SegModel {
        SegModel::new(&ModelConfig::tiny(64), 3, dtype, &Device::Cpu).unwrap()
    }

    fn input(seed: u64, s: usize) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..3 * s * s).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::from_vec(v, (1, 3, s, s), &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn shapes_follow_config() {
        let m = tiny(DType::F32);
        let x = input(0, 64);
        let z = m.encode(&x, ForwardOptions::default()).unwrap();
        assert_eq!(z.dims(), &[1, 32, 4, 4]);
        let y = m.forward(&x, &[None], None, ForwardOptions::default()).unwrap();
        assert_eq!(y.dims(), &[1, 2, 64, 64]);
        let bad = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(m.encode(&bad, ForwardOptions::default()).is_err());
    }

    #[test]
    fn fresh_adapters_change_nothing() {
        let m = tiny(DType::F32);
        let x = input(1, 64);
        let on = ForwardOptions::default();
        let off = ForwardOptions {
            disable_adapters: true,
            ..on
        };
        let a = m.forward(&x, &[None], None, on).unwrap();
        let b = m.forward(&x, &[None], None, off).unwrap();
        assert_eq!(max_abs_diff(&a, &b), 0.0);
    }

    #[test]
    fn distinct_inputs_give_distinct_embeddings() {
        let m = tiny(DType::F32);
        let za = m.encode(&input(1, 64), ForwardOptions::default()).unwrap().flatten_all().unwrap();
        let zb = m.encode(&input(2, 64), ForwardOptions::default()).unwrap().flatten_all().unwrap();
        let dot = (&za * &zb).unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        let na = za.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap().sqrt();
        let nb = zb.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap().sqrt();
        assert!(dot / (na * nb) < 1.0 - 1e-6);
    }

    #[test]
    fn none_prompt_returns_stored_defaults() {
        let m = tiny(DType::F32);
        let pe = m.encode_prompts(None).unwrap();
        let s = m.store.get("prompt.default_sparse").unwrap();
        let d = m.store.get("prompt.default_dense").unwrap();
        assert_eq!(max_abs_diff(&pe.sparse, s.as_tensor()), 0.0);
        assert_eq!(max_abs_diff(&pe.dense, d.as_tensor()), 0.0);
        let pts = Prompt::Points(vec![[1.0, 2.0], [10.0, 20.0], [63.0, 0.0]]);
        assert_eq!(m.encode_prompts(Some(&pts)).unwrap().sparse.dims(), &[3, 32]);
        let bx = Prompt::Box([1.0, 2.0, 30.0, 40.0]);
        assert_eq!(m.encode_prompts(Some(&bx)).unwrap().sparse.dims(), &[2, 32]);
        assert!(m.encode_prompts(Some(&Prompt::Box([5.0, 5.0, 1.0, 9.0]))).is_err());
        assert!(m.encode_prompts(Some(&Prompt::Points(vec![[64.0, 1.0]]))).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let m = tiny(DType::F32);
        let y = m.forward(&input(4, 64), &[None], None, ForwardOptions::default()).unwrap();
        let p = candle_nn::ops::softmax(&y, 1).unwrap().sum(1).unwrap();
        let dev = (p - 1.0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(dev <= 1e-6);
    }

    #[test]
    fn gate_one_matches_attention_free_path() {
        let m = tiny(DType::F32);
        let x = input(5, 64);
        let attn = Tensor::ones((1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let forced = ForwardOptions {
            gate_override: Some(1.0),
            ..Default::default()
        };
        let a = m.forward(&x, &[None], Some(&attn), forced).unwrap();
        let b = m.forward(&x, &[None], None, ForwardOptions::default()).unwrap();
        assert_eq!(max_abs_diff(&a, &b), 0.0);
    }

    #[test]
    fn bundle_round_trip_is_bit_identical() {
        let m = tiny(DType::F32);
        let bytes = m.to_bundle("init", 3).unwrap().to_bytes().unwrap();
        let back = SegModel::from_bundle(&ModelBundle::from_bytes(&bytes).unwrap(), &Device::Cpu).unwrap();
        let other = SegModel::new(&ModelConfig::tiny(64), 99, DType::F32, &Device::Cpu).unwrap();
        other.load_pretrained(&m.to_bundle("init", 3).unwrap(), true).unwrap();
        let x = input(6, 64);
        let a = m.forward(&x, &[None], None, ForwardOptions::default()).unwrap();
        let b = back.forward(&x, &[None], None, ForwardOptions::default()).unwrap();
        let c = other.forward(&x, &[None], None, ForwardOptions::default()).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(max_abs_diff(&a, &c), 0.0);
    }

    #[test]
    fn strict_load_rejects_wrong_width_and_partial_load_keeps_decoder() {
        let m = tiny(DType::F32);
        let mut cfg = ModelConfig::tiny(64);
        cfg.encoder.embed_dim = 48;
        let wide = SegModel::new(&cfg, 0, DType::F32, &Device::Cpu).unwrap();
        assert!(m.load_pretrained(&wide.to_bundle("init", 0).unwrap(), true).is_err());

        let donor = SegModel::new(&ModelConfig::tiny(64), 77, DType::F32, &Device::Cpu).unwrap();
        let enc_only = donor.to_bundle("init", 77).unwrap().filtered(is_encoder);
        let before = m.store.hashes().unwrap();
        m.load_pretrained(&enc_only, false).unwrap();
        let after = m.store.hashes().unwrap();
        let donor_h = donor.store.hashes().unwrap();
        for (name, h) in &after {
            if is_encoder(name) {
                assert_eq!(&donor_h[name], h, "{name}");
            } else {
                assert_eq!(&before[name], h, "{name}");
            }
        }
    }
}
