use candle_core::{DType, Device};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::data::{stack_inputs, stack_targets};
use super::{
    adamw, assert_frozen, changed_params, check_finite, hash_params, loss_2d, sample_slice, set_lr, slice_index,
    EpochSummary, LoadedVolume, TrainConfig, TrainLog, TrainOutcome,
};
use crate::checkpoint::ModelBundle;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_volume, EvalMode};
use crate::sam2d::{is_adapter, is_encoder, is_frozen_constant, is_head, ForwardOptions, SegModel};
use crate::volume::resize_nearest;

/// Stage A trains adapters and output heads on top of pretrained weights, or
/// the encoder and decoder from scratch. The prompt encoder and fusion gate
/// stay untouched.
pub fn trainable_stage_a(name: &str, pretrained: bool) -> bool {
    if is_frozen_constant(name) {
        return false;
    }
    if pretrained {
        is_adapter(name) || is_head(name)
    } else {
        is_encoder(name) || name.starts_with("decoder.")
    }
}

/// Mean volumewise DSC of automatic predictions.
pub(crate) fn validation_dsc(
    model: &SegModel,
    val: &[LoadedVolume],
    attention: Option<&[ndarray::Array3<f32>]>,
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, lv) in val.iter().enumerate() {
        let a = attention.map(|a| &a[i]);
        total += evaluate_volume(model, &lv.volume, &lv.mask, EvalMode::Auto, a, batch)?.0;
    }
    Ok(total / val.len() as f64)
}

pub fn train_stage_a2d(
    cfg: &TrainConfig,
    train: &[LoadedVolume],
    val: &[LoadedVolume],
    pretrained: Option<&ModelBundle>,
    log: &mut TrainLog,
    device: &Device,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("stage A needs nonempty training and validation sets".into()));
    }
    let slices = slice_index(train);
    let bs = cfg.batch_size;
    let ipe = cfg.iters_per_epoch(slices.len(), bs);
    cfg.validate(ipe * cfg.epochs)?;
    let model = SegModel::new(&cfg.model_config(), cfg.seed, DType::F32, device)?;
    let mut history = Vec::new();
    if let Some(b) = pretrained {
        model.load_pretrained(b, true)?;
        history = b.history.clone();
        history.push(b.stage.clone());
    }
    let is_pre = pretrained.is_some();
    let trainable = |n: &str| trainable_stage_a(n, is_pre);
    let frozen_before = hash_params(&model.store, |n| !trainable(n))?;
    let trainable_before = hash_params(&model.store, trainable)?;
    let mut opt = adamw(model.store.select(trainable), cfg)?;
    let s = model.input_size();

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ cfg.augment.seed.rotate_left(32) ^ 0xA2D);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelBundle)> = None;
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        let mut order = slices.clone();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(bs).take(ipe) {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ts = Vec::with_capacity(chunk.len());
            for &(v, k) in chunk {
                let (x, m) = sample_slice(&train[v], k, &cfg.augment, s, &mut aug_rng)?;
                xs.push(x);
                ts.push(resize_nearest(m.view(), s, s));
            }
            let x = stack_inputs(&xs, device, model.dtype)?;
            let t = stack_targets(&ts, device, model.dtype)?;
            let prompts = vec![None; chunk.len()];
            let logits = model.forward(&x, &prompts, None, ForwardOptions::default())?;
            let l = loss_2d(&logits, &t)?;
            let total = l.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            check_finite(iter, total)?;
            let lr = set_lr(&mut opt, cfg, iter);
            opt.backward_step(&l.total)?;
            log.record(json!({
                "stage": "A2D", "epoch": epoch, "iter": iter, "lr": lr, "loss": total,
                "ce": l.ce.to_dtype(DType::F64)?.to_scalar::<f64>()?,
                "dice": l.dice.to_dtype(DType::F64)?.to_scalar::<f64>()?,
                "mode": "automatic",
            }))?;
            loss_sum += total;
            iter += 1;
        }
        let val_dsc = validation_dsc(&model, val, None, cfg.eval_batch_size)?;
        let train_loss = loss_sum / ipe as f64;
        tracing::info!(stage = "A2D", epoch, train_loss, val_dsc, "epoch done");
        log.record(json!({"stage": "A2D", "epoch": epoch, "train_loss": train_loss, "val_dsc": val_dsc}))?;
        log.flush()?;
        epochs.push(EpochSummary {
            epoch,
            train_loss,
            val_metric: val_dsc,
            extra: json!({}),
        });
        if best.as_ref().map_or(true, |b| val_dsc > b.0) {
            let mut bundle = model.to_bundle("A2D", cfg.seed)?;
            bundle.history = history.clone();
            bundle.meta = json!({"epoch": epoch, "val_dsc": val_dsc, "train_config": cfg});
            best = Some((val_dsc, epoch, bundle));
        }
    }
    assert_frozen(&frozen_before, &hash_params(&model.store, |n| !trainable(n))?)?;
    let changed = changed_params(&trainable_before, &hash_params(&model.store, trainable)?);
    let (best_metric, best_epoch, bundle) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        bundle,
        epochs,
        best_epoch,
        best_metric,
        iterations: iter,
        changed,
        frozen: frozen_before.into_keys().collect(),
        prompted_fraction: Vec::new(),
    })
}
