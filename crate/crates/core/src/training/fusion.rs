use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::data::stack_targets;
use super::stage2d::validation_dsc;
use super::{
    adamw, assert_frozen, changed_params, check_finite, hash_params, loss_2d, set_lr, slice_index, EpochSummary,
    LoadedVolume, TrainConfig, TrainLog, TrainOutcome,
};
use crate::checkpoint::ModelBundle;
use crate::depth3d::load_attention;
use crate::error::{Error, Result};
use crate::inference::{attention_batch, embed_volume};
use crate::prompting::{epoch_schedule, sample_prompts, Mode, Prompt};
use crate::sam2d::{is_encoder, is_frozen_constant, ForwardOptions, SegModel};
use crate::volume::{extract_mask_slice, resize_nearest};

/// The fusion gate, mask decoder and prompt embeddings train; the image
/// encoder, adapters included, is frozen.
pub fn trainable_fusion(name: &str) -> bool {
    !is_frozen_constant(name)
        && (name.starts_with("fusion.") || name.starts_with("decoder.") || name.starts_with("prompt."))
}

fn load_maps(vols: &[LoadedVolume]) -> Result<Vec<Array3<f32>>> {
    vols.iter()
        .map(|lv| {
            let (maps, _) = load_attention(&lv.entry.volume).map_err(|e| {
                Error::Missing(format!("attention maps for {}: {e}", lv.entry.volume.display()))
            })?;
            if maps.dim().0 != lv.volume.depth() {
                return Err(Error::Shape(format!(
                    "{} attention maps for a volume of depth {}",
                    maps.dim().0,
                    lv.volume.depth()
                )));
            }
            Ok(maps)
        })
        .collect()
}

pub fn train_stage_fusion(
    cfg: &TrainConfig,
    train: &[LoadedVolume],
    val: &[LoadedVolume],
    stage_a: &ModelBundle,
    log: &mut TrainLog,
    device: &Device,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("the fusion stage needs nonempty training and validation sets".into()));
    }
    let train_maps = load_maps(train)?;
    let val_maps = load_maps(val)?;
    let slices = slice_index(train);
    let bs = cfg.batch_size;
    let ipe = cfg.iters_per_epoch(slices.len(), bs);
    cfg.validate(ipe * cfg.epochs)?;

    let model = SegModel::from_bundle(stage_a, device)?;
    let frozen_before = hash_params(&model.store, |n| !trainable_fusion(n))?;
    let trainable_before = hash_params(&model.store, trainable_fusion)?;
    let mut opt = adamw(model.store.select(trainable_fusion), cfg)?;
    let s = model.input_size();
    let encoder_hash_before = hash_params(&model.store, is_encoder)?;

    // The encoder is frozen and inputs are not augmented, so one pass
    // serves every epoch.
    let cache = train
        .iter()
        .map(|lv| embed_volume(&model, &lv.volume, ForwardOptions::default(), cfg.eval_batch_size))
        .collect::<Result<Vec<Tensor>>>()?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF05);
    let mut prompt_rng = ChaCha8Rng::seed_from_u64(cfg.seed.rotate_left(17) ^ 0x9E37);
    let mut history = stage_a.history.clone();
    history.push(stage_a.stage.clone());
    let mut epochs = Vec::new();
    let mut fractions = Vec::new();
    let mut best: Option<(f64, usize, ModelBundle)> = None;
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        let mut order = slices.clone();
        order.shuffle(&mut order_rng);
        let modes = epoch_schedule(ipe, cfg.prompt.prompt_probability, &mut prompt_rng);
        let mut loss_sum = 0.0;
        let mut prompted = 0;
        for (chunk, &mode) in order.chunks(bs).take(ipe).zip(&modes) {
            prompted += (mode == Mode::Prompted) as usize;
            let mut zs = Vec::with_capacity(chunk.len());
            let mut prompts: Vec<Option<Prompt>> = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            let mut maps = Vec::with_capacity(chunk.len());
            for &(v, k) in chunk {
                zs.push(cache[v].narrow(0, k, 1)?);
                maps.push(attention_batch(&train_maps[v], &[k], device, model.dtype)?);
                let gt = extract_mask_slice(&train[v].mask, k)?;
                let native = gt.dim();
                // Empty slices always train automatically on an all-background target.
                if mode == Mode::Prompted && gt.iter().any(|&x| x != 0) {
                    let ps = sample_prompts(gt.view(), &mut prompt_rng, &cfg.prompt)?;
                    prompts.push(Some(ps.prompt.rescaled(native, (s, s))));
                    targets.push(resize_nearest(ps.selected.view(), s, s));
                } else {
                    prompts.push(None);
                    targets.push(resize_nearest(gt.view(), s, s));
                }
            }
            let z = Tensor::cat(&zs, 0)?;
            let att = Tensor::cat(&maps, 0)?;
            let t = stack_targets(&targets, device, model.dtype)?;
            let refs: Vec<Option<&Prompt>> = prompts.iter().map(Option::as_ref).collect();
            let logits = model.decode(&z, &refs, Some(&att), ForwardOptions::default())?;
            let l = loss_2d(&logits, &t)?;
            let total = l.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            check_finite(iter, total)?;
            let lr = set_lr(&mut opt, cfg, iter);
            opt.backward_step(&l.total)?;
            log.record(json!({
                "stage": "FUSION", "epoch": epoch, "iter": iter, "lr": lr, "loss": total,
                "ce": l.ce.to_dtype(DType::F64)?.to_scalar::<f64>()?,
                "dice": l.dice.to_dtype(DType::F64)?.to_scalar::<f64>()?,
                "mode": mode, "g": model.gate()?,
            }))?;
            loss_sum += total;
            iter += 1;
        }
        let fraction = prompted as f64 / ipe as f64;
        fractions.push(fraction);
        let val_dsc = validation_dsc(&model, val, Some(&val_maps), cfg.eval_batch_size)?;
        let train_loss = loss_sum / ipe as f64;
        let g = model.gate()?;
        tracing::info!(stage = "FUSION", epoch, train_loss, val_dsc, g, fraction, "epoch done");
        log.record(json!({
            "stage": "FUSION", "epoch": epoch, "train_loss": train_loss, "val_dsc": val_dsc,
            "g": g, "prompted_fraction": fraction,
        }))?;
        log.flush()?;
        epochs.push(EpochSummary {
            epoch,
            train_loss,
            val_metric: val_dsc,
            extra: json!({"g": g, "prompted_fraction": fraction}),
        });
        if best.as_ref().map_or(true, |b| val_dsc > b.0) {
            let mut bundle = model.to_bundle("FUSION", cfg.seed)?;
            bundle.history = history.clone();
            bundle.meta = json!({"epoch": epoch, "val_dsc": val_dsc, "g": g, "train_config": cfg});
            best = Some((val_dsc, epoch, bundle));
        }
    }
    assert_frozen(&encoder_hash_before, &hash_params(&model.store, is_encoder)?)?;
    assert_frozen(&frozen_before, &hash_params(&model.store, |n| !trainable_fusion(n))?)?;
    let changed = changed_params(&trainable_before, &hash_params(&model.store, trainable_fusion)?);
    let (best_metric, best_epoch, bundle) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        bundle,
        epochs,
        best_epoch,
        best_metric,
        iterations: iter,
        changed,
        frozen: frozen_before.into_keys().collect(),
        prompted_fraction: fractions,
    })
}
