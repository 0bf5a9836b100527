//! Overlap metrics, volume and dataset evaluation, bootstrap intervals.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayView, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth3d::load_attention;
use crate::error::{Error, Result};
use crate::inference::{embed_volume, predict_from_embeddings};
use crate::prompting::centroid_prompt;
use crate::sam2d::{ForwardOptions, SegModel};
use crate::volume::{extract_mask_slice, load_mask, load_volume, ManifestEntry, MaskVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: usize,
    pub pred: usize,
    pub gt: usize,
}

impl Overlap {
    pub fn dsc(&self) -> f64 {
        if self.pred + self.gt == 0 {
            return 1.0;
        }
        2.0 * self.intersection as f64 / (self.pred + self.gt) as f64
    }

    pub fn iou(&self) -> f64 {
        let union = self.pred + self.gt - self.intersection;
        if union == 0 {
            return 1.0;
        }
        self.intersection as f64 / union as f64
    }
}

pub fn overlap<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>) -> Result<Overlap> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut o = Overlap {
        intersection: 0,
        pred: 0,
        gt: 0,
    };
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p != 0, g != 0);
        o.pred += p as usize;
        o.gt += g as usize;
        o.intersection += (p && g) as usize;
    }
    Ok(o)
}

/// `2|P∩G| / (|P| + |G|)`, 1 when both are empty.
pub fn dsc<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>) -> Result<f64> {
    Ok(overlap(pred, gt)?.dsc())
}

/// `|P∩G| / |P∪G|`, 1 when both are empty.
pub fn iou<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>) -> Result<f64> {
    Ok(overlap(pred, gt)?.iou())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalMode {
    /// No prompts; depth attention fused when maps are supplied.
    #[serde(rename = "auto")]
    Auto,
    /// One point at each ground-truth component centroid, per slice.
    /// Slices without ground truth receive no click and stay empty.
    #[serde(rename = "prompted-oracle")]
    PromptedOracle,
    /// No prompts, gate forced to 1.
    #[serde(rename = "2d-only")]
    TwoDOnly,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Invalid(format!("unknown evaluation mode {s:?}")))
    }
}

impl EvalMode {
    pub fn options(&self) -> ForwardOptions {
        ForwardOptions {
            gate_override: (*self == EvalMode::TwoDOnly).then_some(1.0),
            ..Default::default()
        }
    }
}

/// Predicted mask volume for one mode.
pub fn predict_for_mode(
    model: &SegModel,
    v: &Volume,
    m: &MaskVolume,
    mode: EvalMode,
    attention: Option<&ndarray::Array3<f32>>,
    batch: usize,
) -> Result<ndarray::Array3<u8>> {
    m.check_pair(v)?;
    let opts = mode.options();
    let z = embed_volume(model, v, opts, batch)?;
    let [d, h, w] = v.shape();
    let prompts = match mode {
        EvalMode::PromptedOracle => (0..d)
            .map(|k| Ok(centroid_prompt(extract_mask_slice(m, k)?.view())))
            .collect::<Result<Vec<_>>>()?,
        _ => vec![None; d],
    };
    let attention = if mode == EvalMode::TwoDOnly { None } else { attention };
    let mut pred = predict_from_embeddings(model, &z, &prompts, attention, opts, (h, w), batch)?;
    if mode == EvalMode::PromptedOracle {
        for (k, p) in prompts.iter().enumerate() {
            if p.is_none() {
                pred.index_axis_mut(ndarray::Axis(0), k).fill(0);
            }
        }
    }
    Ok(pred)
}

/// Volumewise `(dsc, iou)`.
pub fn evaluate_volume(
    model: &SegModel,
    v: &Volume,
    m: &MaskVolume,
    mode: EvalMode,
    attention: Option<&ndarray::Array3<f32>>,
    batch: usize,
) -> Result<(f64, f64)> {
    let pred = predict_for_mode(model, v, m, mode, attention, batch)?;
    let o = overlap(pred.view(), m.data.view())?;
    Ok((o.dsc(), o.iou()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// Loads the precomputed attention maps next to each volume.
    pub use_depth_attention: bool,
    pub bootstrap_resamples: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Auto,
            use_depth_attention: false,
            bootstrap_resamples: 1000,
            seed: 0,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub id: String,
    pub location_tag: String,
    pub sequence_tag: String,
    pub dsc: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationSummary {
    pub n: usize,
    pub mean_dsc: f64,
    pub mean_iou: f64,
    pub ci95_dsc: (f64, f64),
    pub ci95_iou: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub volumes: Vec<VolumeScore>,
    pub locations: BTreeMap<String, LocationSummary>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
    pub config: serde_json::Value,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval of the mean, widened if needed so that it
/// contains the sample mean.
pub fn bootstrap_ci<R: Rng + ?Sized>(values: &[f64], resamples: usize, rng: &mut R) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::Invalid("bootstrap needs values and resamples".into()));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = mean(values);
    Ok((quantile(&means, 0.025).min(m), quantile(&means, 0.975).max(m)))
}

impl EvalReport {
    pub fn from_scores(
        volumes: Vec<VolumeScore>,
        resamples: usize,
        seed: u64,
        config: serde_json::Value,
    ) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::Invalid("no volumes to summarise".into()));
        }
        let mut groups: BTreeMap<String, Vec<&VolumeScore>> = BTreeMap::new();
        for s in &volumes {
            groups.entry(s.location_tag.clone()).or_default().push(s);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut locations = BTreeMap::new();
        for (loc, rows) in groups {
            let d: Vec<f64> = rows.iter().map(|r| r.dsc).collect();
            let j: Vec<f64> = rows.iter().map(|r| r.iou).collect();
            let ci95_dsc = bootstrap_ci(&d, resamples, &mut rng)?;
            let ci95_iou = bootstrap_ci(&j, resamples, &mut rng)?;
            locations.insert(
                loc,
                LocationSummary {
                    n: rows.len(),
                    mean_dsc: mean(&d),
                    mean_iou: mean(&j),
                    ci95_dsc,
                    ci95_iou,
                },
            );
        }
        let mean_dsc = mean(&volumes.iter().map(|v| v.dsc).collect::<Vec<_>>());
        let mean_iou = mean(&volumes.iter().map(|v| v.iou).collect::<Vec<_>>());
        Ok(EvalReport {
            volumes,
            locations,
            mean_dsc,
            mean_iou,
            config,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,location_tag,sequence_tag,dsc,iou\n");
        for v in &self.volumes {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                v.id, v.location_tag, v.sequence_tag, v.dsc, v.iou
            ));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

pub fn volume_id(e: &ManifestEntry) -> String {
    e.volume
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn evaluate_dataset(model: &SegModel, entries: &[ManifestEntry], cfg: &EvalConfig) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::Invalid("evaluation split is empty".into()));
    }
    let mut scores = Vec::with_capacity(entries.len());
    for e in entries {
        let v = load_volume(&e.volume)?;
        let (m, _) = load_mask(&e.mask)?;
        let attention = if cfg.use_depth_attention && cfg.mode != EvalMode::TwoDOnly {
            let (maps, _) = load_attention(&e.volume).map_err(|err| {
                Error::Missing(format!("attention maps for {}: {err}", e.volume.display()))
            })?;
            Some(maps)
        } else {
            None
        };
        let (d, j) = evaluate_volume(model, &v, &m, cfg.mode, attention.as_ref(), cfg.batch_size)?;
        tracing::info!(volume = %e.volume.display(), dsc = d, iou = j, "evaluated");
        scores.push(VolumeScore {
            id: volume_id(e),
            location_tag: e.location_tag.clone(),
            sequence_tag: e.sequence_tag.clone(),
            dsc: d,
            iou: j,
        });
    }
    EvalReport::from_scores(scores, cfg.bootstrap_resamples, cfg.seed, serde_json::to_value(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use proptest::prelude::*;

    #[test]
    fn hand_counted_cases() {
        let p = arr1(&[1u8, 1, 0]);
        let g = arr1(&[0u8, 1, 1]);
        assert!((dsc(p.view(), g.view()).unwrap() - 0.5).abs() < 1e-15);
        assert!((iou(p.view(), g.view()).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let z = arr1(&[0u8, 0]);
        assert_eq!(dsc(z.view(), z.view()).unwrap(), 1.0);
        assert_eq!(iou(z.view(), z.view()).unwrap(), 1.0);
        assert_eq!(dsc(arr1(&[1u8, 0]).view(), arr1(&[0u8, 1]).view()).unwrap(), 0.0);
        assert!(dsc(p.view(), z.view()).is_err());
    }

    #[test]
    fn single_volume_location_is_degenerate() {
        let rows = vec![VolumeScore {
            id: "a".into(),
            location_tag: "knee".into(),
            sequence_tag: "t1".into(),
            dsc: 0.8,
            iou: 0.8 / 1.2,
        }];
        let r = EvalReport::from_scores(rows, 1000, 1, serde_json::Value::Null).unwrap();
        let l = &r.locations["knee"];
        assert_eq!(l.ci95_dsc, (0.8, 0.8));
    }

    #[test]
    fn mode_names() {
        assert_eq!("2d-only".parse::<EvalMode>().unwrap(), EvalMode::TwoDOnly);
        assert_eq!("prompted-oracle".parse::<EvalMode>().unwrap(), EvalMode::PromptedOracle);
        assert!("fused".parse::<EvalMode>().is_err());
    }

    proptest! {
        #[test]
        fn dice_iou_relation(bits in proptest::collection::vec((0u8..2, 0u8..2), 1..200)) {
            let p = ndarray::Array1::from_iter(bits.iter().map(|b| b.0));
            let g = ndarray::Array1::from_iter(bits.iter().map(|b| b.1));
            let d = dsc(p.view(), g.view()).unwrap();
            let j = iou(p.view(), g.view()).unwrap();
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            prop_assert!(d >= j);
        }

        #[test]
        fn ci_contains_mean(vals in proptest::collection::vec(0.0f64..1.0, 1..20), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (lo, hi) = bootstrap_ci(&vals, 200, &mut rng).unwrap();
            let m = mean(&vals);
            prop_assert!(lo <= m && m <= hi);
        }
    }
}
