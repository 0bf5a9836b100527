use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{
    adamw, changed_params, check_finite, hash_params, set_lr, EpochSummary, LoadedVolume, TrainConfig,
    TrainLog, TrainOutcome,
};
use crate::depth3d::{loss_3d_from_logits, prepare_lowres, save_attention, volume_attention, AttentionConfig, AttentionFile, DepthModel};
use crate::error::{Error, Result};
use crate::volume::{load_volume, ManifestEntry};

fn lowres_pairs(vols: &[LoadedVolume], size: usize) -> Result<Vec<(Array3<f32>, Array3<u8>)>> {
    vols.iter()
        .map(|lv| {
            let (v, m) = prepare_lowres(&lv.volume, Some(&lv.mask), size)?;
            Ok((v.data, m.expect("mask was supplied").data))
        })
        .collect()
}

fn to_tensor<T: candle_core::WithDType>(a: &Array3<T>, dev: &Device) -> Result<Tensor> {
    let (d, h, w) = a.dim();
    Ok(Tensor::from_iter(a.iter().copied(), dev)?.reshape((1, d, h, w))?)
}

/// Mean validation loss and voxel recall at threshold 0.5.
fn validate_3d(model: &DepthModel, pairs: &[(Array3<f32>, Array3<u8>)]) -> Result<(f64, f64)> {
    let dev = &model.device;
    let (mut loss, mut hit, mut pos) = (0.0, 0usize, 0usize);
    for (v, m) in pairs {
        let x = model.net.logits(&to_tensor(v, dev)?)?;
        let g = to_tensor(m, dev)?.to_dtype(model.dtype)?;
        loss += loss_3d_from_logits(&x, &g)?.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let p = candle_nn::ops::sigmoid(&x)?;
        let pv = p.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        for (&q, &gt) in pv.iter().zip(m.iter()) {
            if gt != 0 {
                pos += 1;
                hit += (q >= 0.5) as usize;
            }
        }
    }
    let recall = if pos == 0 { 1.0 } else { hit as f64 / pos as f64 };
    Ok((loss / pairs.len() as f64, recall))
}

/// Trains the V-net with batch size 1 and keeps the lowest validation loss.
pub fn train_v3d(
    cfg: &TrainConfig,
    train: &[LoadedVolume],
    val: &[LoadedVolume],
    log: &mut TrainLog,
    device: &Device,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("3D training needs nonempty training and validation sets".into()));
    }
    let ipe = cfg.iters_per_epoch(train.len(), 1);
    cfg.validate(ipe * cfg.epochs)?;
    let size = cfg.vnet.size;
    let train_pairs = lowres_pairs(train, size)?;
    let val_pairs = lowres_pairs(val, size)?;
    let model = DepthModel::new(&cfg.vnet, cfg.seed, DType::F32, device)?;
    let before = hash_params(&model.store, |_| true)?;
    let mut opt = adamw(model.store.select(|_| true), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3D);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, crate::checkpoint::ModelBundle)> = None;
    let mut iter = 0;
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in order.iter().take(ipe) {
            let (v, m) = &train_pairs[i];
            // Logit-space BCE: the clamped form has no gradient once the
            // sigmoid saturates, which let early runs collapse to all-background.
            let x = model.net.logits(&to_tensor(v, device)?)?;
            let g = to_tensor(m, device)?.to_dtype(model.dtype)?;
            let l = loss_3d_from_logits(&x, &g)?;
            let total = l.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            check_finite(iter, total)?;
            let lr = set_lr(&mut opt, cfg, iter);
            opt.backward_step(&l.total)?;
            log.record(json!({
                "stage": "V3D", "epoch": epoch, "iter": iter, "lr": lr, "loss": total,
                "ce": l.bce.to_dtype(DType::F64)?.to_scalar::<f64>()?,
                "tversky": l.tversky.to_dtype(DType::F64)?.to_scalar::<f64>()?,
                "mode": "volume",
            }))?;
            loss_sum += total;
            iter += 1;
        }
        let (val_loss, val_recall) = validate_3d(&model, &val_pairs)?;
        let train_loss = loss_sum / ipe as f64;
        tracing::info!(stage = "V3D", epoch, train_loss, val_loss, val_recall, "epoch done");
        log.record(json!({"stage": "V3D", "epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_recall": val_recall}))?;
        log.flush()?;
        epochs.push(EpochSummary {
            epoch,
            train_loss,
            val_metric: val_loss,
            extra: json!({"val_recall": val_recall}),
        });
        if best.as_ref().map_or(true, |b| val_loss < b.0) {
            let mut bundle = model.to_bundle("V3D", cfg.seed)?;
            bundle.meta = json!({"epoch": epoch, "val_loss": val_loss, "val_recall": val_recall, "train_config": cfg});
            best = Some((val_loss, epoch, bundle));
        }
    }
    let changed = changed_params(&before, &hash_params(&model.store, |_| true)?);
    let (best_metric, best_epoch, bundle) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        bundle,
        epochs,
        best_epoch,
        best_metric,
        iterations: iter,
        changed,
        frozen: Vec::new(),
        prompted_fraction: Vec::new(),
    })
}

/// Writes per-slice attention maps next to every volume. Returns the number
/// of files written.
pub fn precompute_attention(
    model: &DepthModel,
    bundle_hash: &str,
    entries: &[ManifestEntry],
    cfg: &AttentionConfig,
) -> Result<usize> {
    for e in entries {
        let v = load_volume(&e.volume)
            .map_err(|err| Error::Missing(format!("volume {}: {err}", e.volume.display())))?;
        let (_, maps) = volume_attention(model, &v, cfg)?;
        let header = AttentionFile {
            shape: [0; 3],
            dtype: String::new(),
            config: *cfg,
            bundle_hash: bundle_hash.to_string(),
        };
        save_attention(&e.volume, &maps, &header)?;
        tracing::info!(volume = %e.volume.display(), slices = maps.dim().0, "attention written");
    }
    Ok(entries.len())
}
