use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::Rng;

use crate::augment::{apply_pipeline, AugmentPipeline};
use crate::error::{Error, Result};
use crate::volume::{
    extract_mask_slice, extract_slice, load_mask, load_volume, normalize_for_encoder, DatasetManifest,
    ManifestEntry, MaskVolume, Split, Volume,
};

#[derive(Debug, Clone)]
pub struct LoadedVolume {
    pub entry: ManifestEntry,
    pub volume: Volume,
    pub mask: MaskVolume,
}

impl LoadedVolume {
    pub fn load(entry: &ManifestEntry) -> Result<Self> {
        let volume = load_volume(&entry.volume)?;
        let (mask, _) = load_mask(&entry.mask)?;
        mask.check_pair(&volume)?;
        Ok(LoadedVolume {
            entry: entry.clone(),
            volume,
            mask,
        })
    }
}

pub fn load_split(manifest: &DatasetManifest, split: Split, sequence: Option<&str>) -> Result<Vec<LoadedVolume>> {
    manifest
        .select(split, sequence)
        .iter()
        .map(LoadedVolume::load)
        .collect()
}

/// `(volume, slice)` pairs over every slice of every volume.
pub fn slice_index(vols: &[LoadedVolume]) -> Vec<(usize, usize)> {
    vols.iter()
        .enumerate()
        .flat_map(|(i, v)| (0..v.volume.depth()).map(move |k| (i, k)))
        .collect()
}

/// One augmented training slice: the normalised encoder input and the mask
/// at native resolution.
pub fn sample_slice<R: Rng + ?Sized>(
    lv: &LoadedVolume,
    k: usize,
    augment: &AugmentPipeline,
    size: usize,
    rng: &mut R,
) -> Result<(Array3<f32>, Array2<u8>)> {
    let img = extract_slice(&lv.volume, k)?;
    let msk = extract_mask_slice(&lv.mask, k)?;
    let (img, msk) = apply_pipeline(augment, &img, &msk, rng)?;
    Ok((normalize_for_encoder(img.view(), size)?, msk))
}

pub(crate) fn stack_inputs(xs: &[Array3<f32>], device: &Device, dtype: DType) -> Result<Tensor> {
    let Some(first) = xs.first() else {
        return Err(Error::Invalid("empty batch".into()));
    };
    let (c, h, w) = first.dim();
    let data: Vec<f32> = xs.iter().flat_map(|x| x.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (xs.len(), c, h, w), device)?.to_dtype(dtype)?)
}

pub(crate) fn stack_targets(ts: &[Array2<u8>], device: &Device, dtype: DType) -> Result<Tensor> {
    let Some(first) = ts.first() else {
        return Err(Error::Invalid("empty batch".into()));
    };
    let (h, w) = first.dim();
    let data: Vec<f32> = ts.iter().flat_map(|t| t.iter().map(|&v| (v != 0) as u8 as f32)).collect();
    Ok(Tensor::from_vec(data, (ts.len(), h, w), device)?.to_dtype(dtype)?)
}
