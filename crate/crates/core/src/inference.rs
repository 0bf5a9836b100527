//! Slice-wise prediction shared by validation, evaluation and the service.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::prompting::Prompt;
use crate::sam2d::{ForwardOptions, SegModel};
use crate::volume::{extract_slice, normalize_for_encoder, resize_nearest, Volume};

/// Normalised encoder inputs `(B, 3, S, S)` for the given slice indices.
pub fn slice_batch(
    v: &Volume,
    indices: &[usize],
    size: usize,
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(indices.len() * 3 * size * size);
    for &k in indices {
        let x = normalize_for_encoder(extract_slice(v, k)?.view(), size)?;
        data.extend(x.iter().copied());
    }
    Ok(Tensor::from_vec(data, (indices.len(), 3, size, size), device)?.to_dtype(dtype)?)
}

/// Encoder output for every slice, `(D, C, g, g)`, detached from the graph.
pub fn embed_volume(model: &SegModel, v: &Volume, opts: ForwardOptions, batch: usize) -> Result<Tensor> {
    let idx: Vec<usize> = (0..v.depth()).collect();
    let mut out = Vec::new();
    for chunk in idx.chunks(batch.max(1)) {
        let x = slice_batch(v, chunk, model.input_size(), &model.device, model.dtype)?;
        out.push(model.encode(&x, opts)?.detach());
    }
    Ok(Tensor::cat(&out, 0)?)
}

/// Attention maps for the given slices as `(B, H_r, W_r)`.
pub fn attention_batch(maps: &Array3<f32>, indices: &[usize], device: &Device, dtype: DType) -> Result<Tensor> {
    let (d, h, w) = maps.dim();
    let mut data = Vec::with_capacity(indices.len() * h * w);
    for &k in indices {
        if k >= d {
            return Err(Error::OutOfRange { index: k, len: d });
        }
        data.extend(maps.index_axis(Axis(0), k).iter().copied());
    }
    Ok(Tensor::from_vec(data, (indices.len(), h, w), device)?.to_dtype(dtype)?)
}

/// Channel argmax of `(B, classes, S, S)` logits, resized to `native` by
/// nearest neighbour.
pub fn logits_to_masks(logits: &Tensor, native: (usize, usize)) -> Result<Vec<Array2<u8>>> {
    let (b, _, s, s2) = logits.dims4()?;
    let am = logits.argmax(1)?.to_dtype(DType::U8)?.flatten_all()?.to_vec1::<u8>()?;
    (0..b)
        .map(|i| {
            let m = Array2::from_shape_vec((s, s2), am[i * s * s2..(i + 1) * s * s2].to_vec())
                .map_err(|e| Error::Shape(e.to_string()))?;
            Ok(if (s, s2) == native {
                m
            } else {
                resize_nearest(m.view(), native.0, native.1)
            })
        })
        .collect()
}

/// Per-slice request: the prompt in native slice pixels (`None` for
/// automatic mode).
pub fn prompts_to_input(prompts: &[Option<Prompt>], native: (usize, usize), size: usize) -> Vec<Option<Prompt>> {
    prompts
        .iter()
        .map(|p| p.as_ref().map(|p| p.rescaled(native, (size, size))))
        .collect()
}

/// Decodes slices from cached embeddings. `prompts` are in native slice
/// pixels, one per slice of `z`.
pub fn predict_from_embeddings(
    model: &SegModel,
    z: &Tensor,
    prompts: &[Option<Prompt>],
    attention: Option<&Array3<f32>>,
    opts: ForwardOptions,
    native: (usize, usize),
    batch: usize,
) -> Result<Array3<u8>> {
    let d = z.dim(0)?;
    if prompts.len() != d {
        return Err(Error::Shape(format!("{} prompts for {d} slices", prompts.len())));
    }
    if let Some(a) = attention {
        if a.dim().0 != d {
            return Err(Error::Shape(format!("{} attention maps for {d} slices", a.dim().0)));
        }
    }
    let scaled = prompts_to_input(prompts, native, model.input_size());
    let mut out = Array3::<u8>::zeros((d, native.0, native.1));
    let idx: Vec<usize> = (0..d).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let zb = z.narrow(0, chunk[0], chunk.len())?;
        let pr: Vec<Option<&Prompt>> = chunk.iter().map(|&k| scaled[k].as_ref()).collect();
        let att = attention
            .map(|a| attention_batch(a, chunk, &model.device, model.dtype))
            .transpose()?;
        let logits = model.decode(&zb, &pr, att.as_ref(), opts)?;
        for (k, m) in chunk.iter().zip(logits_to_masks(&logits, native)?) {
            out.index_axis_mut(Axis(0), *k).assign(&m);
        }
    }
    Ok(out)
}

/// Encodes and decodes a whole volume.
pub fn predict_volume(
    model: &SegModel,
    v: &Volume,
    prompts: &[Option<Prompt>],
    attention: Option<&Array3<f32>>,
    opts: ForwardOptions,
    batch: usize,
) -> Result<Array3<u8>> {
    let z = embed_volume(model, v, opts, batch)?;
    let [_, h, w] = v.shape();
    predict_from_embeddings(model, &z, prompts, attention, opts, (h, w), batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sam2d::ModelConfig;

    #[test]
    fn argmax_resizes_to_native() {
        let dev = Device::Cpu;
        // Class 1 wins on the left half only.
        let l = Tensor::from_vec(
            (0..2 * 4 * 4).map(|i| if i < 16 { 0.0f32 } else if i % 4 < 2 { 1.0 } else { -1.0 }).collect(),
            (1, 2, 4, 4),
            &dev,
        )
        .unwrap();
        let m = logits_to_masks(&l, (2, 2)).unwrap();
        assert_eq!(m[0], ndarray::arr2(&[[1u8, 0], [1, 0]]));
    }

    #[test]
    fn volume_prediction_has_volume_shape() {
        let dev = Device::Cpu;
        let model = SegModel::new(&ModelConfig::tiny(32), 3, DType::F32, &dev).unwrap();
        let v = Volume::new(Array3::from_shape_fn((3, 10, 12), |(d, h, w)| (d + h * w) as f32), [1.0; 3]).unwrap();
        let prompts = vec![None, Some(Prompt::Points(vec![[11.0, 9.0]])), None];
        let m = predict_volume(&model, &v, &prompts, None, ForwardOptions::default(), 2).unwrap();
        assert_eq!(m.dim(), (3, 10, 12));
        assert!(m.iter().all(|&x| x <= 1));
    }
}
