//! The 3D branch: a V-net over 64³ volumes, its CE + Tversky objective, the
//! depth-attention chain and the gate that fuses attention into the 2D
//! embedding.

mod attention;
mod fusion;
mod io;
mod loss;
mod vnet;

pub use attention::{
    accumulate_depth_window, attention_stack, compute_depth_attention, is_unit_range,
    normalize_attention, rescale_attention, rescale_value, threshold_probabilities, window_center,
    AttentionConfig, RescaleMode,
};
pub use fusion::FusionGate;
pub use io::{attention_paths, load_attention, save_attention, AttentionFile};
pub use loss::{
    bce_loss, bce_with_logits, loss_3d, loss_3d_from_logits, soft_dice_loss, tversky_loss, Loss3d, BCE_CLAMP, EPS_SMOOTH, TVERSKY_ALPHA,
    TVERSKY_BETA,
};
pub use vnet::{VNet, VNetConfig};

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;

use crate::checkpoint::ModelBundle;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::volume::{downsample_to_lowres, resample_isotropic, MaskVolume, Volume};

/// A V-net with its parameter store.
#[derive(Debug, Clone)]
pub struct DepthModel {
    pub cfg: VNetConfig,
    pub store: ParamStore,
    pub net: VNet,
    pub device: Device,
    pub dtype: DType,
}

impl DepthModel {
    pub fn new(cfg: &VNetConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(seed);
        let net = VNet::new(cfg, store.var_builder(dtype, device).pp("vnet"))?;
        Ok(DepthModel {
            cfg: cfg.clone(),
            store,
            net,
            device: device.clone(),
            dtype,
        })
    }

    pub fn from_bundle(bundle: &ModelBundle, device: &Device) -> Result<Self> {
        let cfg: VNetConfig = serde_json::from_value(bundle.config["vnet"].clone())
            .map_err(|e| Error::Checkpoint(format!("bundle has no V-net config: {e}")))?;
        let m = DepthModel::new(&cfg, bundle.seed, DType::F32, device)?;
        for (name, var) in m.store.named_vars() {
            let t = bundle
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} vs expected {:?}",
                    t.shape,
                    var.dims()
                )));
            }
            var.set(&t.to_tensor(m.dtype, device)?)?;
        }
        Ok(m)
    }

    pub fn to_bundle(&self, stage: &str, seed: u64) -> Result<ModelBundle> {
        ModelBundle::from_store(
            &self.store,
            serde_json::json!({ "vnet": self.cfg }),
            stage,
            seed,
        )
    }

    /// Probability volume for one low-resolution input.
    pub fn predict(&self, v: &Array3<f32>) -> Result<Array3<f64>> {
        let s = v.shape();
        let x = Tensor::from_slice(v.as_slice().unwrap(), (1, s[0], s[1], s[2]), &self.device)?
            .to_dtype(self.dtype)?;
        let p = self.net.forward(&x)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Array3::from_shape_vec((s[0], s[1], s[2]), p).map_err(|e| Error::Shape(e.to_string()))?)
    }
}

/// Isotropic resample at the finest spacing, then resize to the V-net cube.
pub fn prepare_lowres(
    v: &Volume,
    m: Option<&MaskVolume>,
    size: usize,
) -> Result<(Volume, Option<MaskVolume>)> {
    let t = v.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let (iv, im) = resample_isotropic(v, m, t)?;
    downsample_to_lowres(&iv, im.as_ref(), [size, size, size])
}

/// Per-slice attention maps for a volume of `depth` slices.
pub fn volume_attention(
    model: &DepthModel,
    v: &Volume,
    cfg: &AttentionConfig,
) -> Result<(Array3<f64>, Array3<f32>)> {
    let (low, _) = prepare_lowres(v, None, model.cfg.size)?;
    let p = model.predict(&low.data)?;
    let maps = attention_stack(p.view(), v.depth(), cfg)?;
    Ok((p, maps))
}
