//! Per-slice depth attention distilled from a low-resolution probability
//! volume: threshold, windowed depth sum, normalisation, rescaling.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RescaleMode {
    /// `v ≤ p_low → α1·v`, otherwise `α2·v`.
    Literal,
    /// `v ≤ p_low → α1·v`, otherwise `p_high + α2·(v − p_low)`.
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub eps_attn: f64,
    /// Depth window length in low-resolution slices.
    pub window: usize,
    pub p_low: f64,
    pub p_high: f64,
    pub eps_rescale: f64,
    pub rescale_mode: RescaleMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            eps_attn: 0.1,
            window: 16,
            p_low: 0.05,
            p_high: 0.8,
            eps_rescale: 1e-3,
            rescale_mode: RescaleMode::Literal,
        }
    }
}

impl AttentionConfig {
    pub fn alpha1(&self) -> f64 {
        self.p_high / self.p_low
    }

    pub fn alpha2(&self) -> f64 {
        (1.0 - self.p_high) / (1.0 - self.p_low)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.p_low && self.p_low < self.p_high && self.p_high < 1.0) {
            return Err(Error::Invalid(format!(
                "need 0 < p_low < p_high < 1, got {} and {}",
                self.p_low, self.p_high
            )));
        }
        if self.window == 0 {
            return Err(Error::Invalid("attention window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Zeroes every probability at or below `eps`.
pub fn threshold_probabilities(p: ArrayView3<f64>, eps: f64) -> Array3<f64> {
    p.mapv(|v| if v <= eps { 0.0 } else { v })
}

/// Low-resolution depth index matched to slice `k` of a `depth`-slice volume.
pub fn window_center(k: usize, depth: usize, lowres_depth: usize) -> usize {
    let c = (k as f64 * lowres_depth as f64 / depth as f64).round() as usize;
    c.min(lowres_depth - 1)
}

/// Sums the thresholded volume over the depth window centred on slice `k`.
pub fn accumulate_depth_window(
    p: ArrayView3<f64>,
    k: usize,
    depth: usize,
    cfg: &AttentionConfig,
) -> Result<Array2<f64>> {
    if k >= depth {
        return Err(Error::OutOfRange { index: k, len: depth });
    }
    let dr = p.len_of(Axis(0));
    let c = window_center(k, depth, dr) as i64;
    let half = (cfg.window / 2) as i64;
    let lo = (c - half).max(0) as usize;
    let hi = ((c + cfg.window as i64 - half - 1).min(dr as i64 - 1)) as usize;
    let mut out = Array2::zeros((p.len_of(Axis(1)), p.len_of(Axis(2))));
    for d in lo..=hi {
        out += &p.index_axis(Axis(0), d);
    }
    Ok(out)
}

/// Divides by the map's own maximum; an all-zero map is returned unchanged.
pub fn normalize_attention(m: ArrayView2<f64>) -> Array2<f64> {
    let max = m.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        m.mapv(|v| v / max)
    } else {
        m.to_owned()
    }
}

pub fn rescale_value(v: f64, cfg: &AttentionConfig) -> f64 {
    let r = if v <= cfg.p_low {
        cfg.alpha1() * v
    } else {
        match cfg.rescale_mode {
            RescaleMode::Literal => cfg.alpha2() * v,
            RescaleMode::Continuous => cfg.p_high + cfg.alpha2() * (v - cfg.p_low),
        }
    };
    if r <= cfg.eps_rescale {
        0.0
    } else {
        r
    }
}

pub fn rescale_attention(m: ArrayView2<f64>, cfg: &AttentionConfig) -> Array2<f64> {
    m.mapv(|v| rescale_value(v, cfg))
}

/// Threshold → window sum → normalise → rescale for slice `k`.
pub fn compute_depth_attention(
    p: ArrayView3<f64>,
    k: usize,
    depth: usize,
    cfg: &AttentionConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let t = threshold_probabilities(p, cfg.eps_attn);
    let abs = accumulate_depth_window(t.view(), k, depth, cfg)?;
    let n = normalize_attention(abs.view());
    Ok(rescale_attention(n.view(), cfg))
}

/// Maps for every slice of a `depth`-slice volume, stacked `(depth, H_r, W_r)`.
pub fn attention_stack(p: ArrayView3<f64>, depth: usize, cfg: &AttentionConfig) -> Result<Array3<f32>> {
    cfg.validate()?;
    let t = threshold_probabilities(p, cfg.eps_attn);
    let (h, w) = (p.len_of(Axis(1)), p.len_of(Axis(2)));
    let mut out = Array3::<f32>::zeros((depth, h, w));
    for k in 0..depth {
        let abs = accumulate_depth_window(t.view(), k, depth, cfg)?;
        let m = rescale_attention(normalize_attention(abs.view()).view(), cfg);
        out.index_axis_mut(Axis(0), k).assign(&m.mapv(|v| v as f32));
    }
    Ok(out)
}

pub fn is_unit_range(m: ArrayView2<f64>) -> bool {
    m.iter().all(|&v| (0.0..=1.0).contains(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg() -> AttentionConfig {
        AttentionConfig::default()
    }

    #[test]
    fn pinned_constants() {
        let c = cfg();
        assert!((c.alpha1() - 16.0).abs() < 1e-12);
        assert!((c.alpha2() - 1.0 / 4.75).abs() < 1e-15);
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = Array3::from_shape_vec((1, 1, 3), vec![0.1, 0.1001, 0.0]).unwrap();
        let t = threshold_probabilities(p.view(), 0.1);
        assert_eq!(t.as_slice().unwrap(), &[0.0, 0.1001, 0.0]);
    }

    #[test]
    fn single_voxel_window_sum() {
        let mut p = Array3::zeros((64, 4, 4));
        p[[32, 1, 2]] = 0.5;
        let m = accumulate_depth_window(p.view(), 48, 96, &cfg()).unwrap();
        assert_eq!(m[[1, 2]], 0.5);
        assert_eq!(m.sum(), 0.5);
    }

    #[test]
    fn window_arithmetic_interior_and_edge() {
        let p = Array3::from_elem((64, 3, 3), 0.2);
        let m = accumulate_depth_window(p.view(), 32, 64, &cfg()).unwrap();
        assert!(m.iter().all(|&v| (v - 3.2).abs() < 1e-12));
        let m = accumulate_depth_window(p.view(), 0, 64, &cfg()).unwrap();
        assert!(m.iter().all(|&v| (v - 1.6).abs() < 1e-12));
        assert!(accumulate_depth_window(p.view(), 64, 64, &cfg()).is_err());
    }

    #[test]
    fn normalisation_cases() {
        let z = Array2::<f64>::zeros((2, 2));
        assert_eq!(normalize_attention(z.view()), z);
        let m = array![[1.0, 2.0], [4.0, 0.0]];
        assert_eq!(normalize_attention(m.view()), array![[0.25, 0.5], [1.0, 0.0]]);
    }

    #[test]
    fn rescale_pinned_values() {
        let lit = cfg();
        let cont = AttentionConfig {
            rescale_mode: RescaleMode::Continuous,
            ..cfg()
        };
        assert!((rescale_value(0.05, &lit) - 0.8).abs() < 1e-12);
        assert!((rescale_value(0.05, &cont) - 0.8).abs() < 1e-12);
        assert!((rescale_value(0.5, &lit) - 0.105263).abs() < 1e-5);
        assert!((rescale_value(0.5, &cont) - 0.894737).abs() < 1e-5);
        assert_eq!(rescale_value(0.00005, &lit), 0.0);
        assert!((rescale_value(1.0, &cont) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_volume_gives_zero_map() {
        let p = Array3::zeros((16, 5, 5));
        let m = compute_depth_attention(p.view(), 3, 16, &cfg()).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stack_matches_single_maps() {
        let p = Array3::from_shape_fn((16, 4, 4), |(d, h, w)| ((d * 7 + h * 3 + w) % 11) as f64 / 10.0);
        let s = attention_stack(p.view(), 20, &cfg()).unwrap();
        for k in [0, 7, 19] {
            let m = compute_depth_attention(p.view(), k, 20, &cfg()).unwrap();
            assert_eq!(s.index_axis(Axis(0), k), m.mapv(|v| v as f32));
        }
    }

    proptest::proptest! {
        #[test]
        fn continuous_rescale_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let c = AttentionConfig { rescale_mode: RescaleMode::Continuous, eps_rescale: 0.0, ..cfg() };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            proptest::prop_assert!(rescale_value(lo, &c) <= rescale_value(hi, &c) + 1e-15);
        }

        #[test]
        fn literal_rescale_is_piecewise_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let c = cfg();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if (hi <= c.p_low) || (lo > c.p_low) {
                proptest::prop_assert!(rescale_value(lo, &c) <= rescale_value(hi, &c));
            }
        }

        #[test]
        fn attention_stays_in_unit_range(vals in proptest::collection::vec(0.0f64..=1.0, 8 * 9), k in 0usize..12) {
            let p = Array3::from_shape_vec((8, 3, 3), vals).unwrap();
            let m = compute_depth_attention(p.view(), k, 12, &cfg()).unwrap();
            proptest::prop_assert!(is_unit_range(m.view()));
        }
    }
}

