use ndarray::{Array2, Array3, ArrayView2, Axis};

use super::{MaskVolume, Volume};
use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub fn extract_slice(v: &Volume, index: usize) -> Result<Array2<f32>> {
    if index >= v.depth() {
        return Err(Error::OutOfRange {
            index,
            len: v.depth(),
        });
    }
    Ok(v.data.index_axis(Axis(0), index).to_owned())
}

pub fn extract_mask_slice(m: &MaskVolume, index: usize) -> Result<Array2<u8>> {
    let depth = m.data.shape()[0];
    if index >= depth {
        return Err(Error::OutOfRange { index, len: depth });
    }
    Ok(m.data.index_axis(Axis(0), index).to_owned())
}

/// Half-pixel source coordinate (pixel centres aligned, edges clamped).
fn half_pixel(i: usize, n_in: usize, n_out: usize) -> f64 {
    let x = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    x.clamp(0.0, n_in as f64 - 1.0)
}

/// Bilinear resize with half-pixel centres.
pub fn resize_bilinear(img: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.to_owned();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|i| {
                let x = half_pixel(i, n_in, n_out);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (x - lo as f64) as f32)
            })
            .collect()
    };
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, fy) = ty[i];
        let (x0, x1, fx) = tx[j];
        let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
        let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Nearest-neighbour resize with the same half-pixel convention.
pub fn resize_nearest<T: Copy>(img: ArrayView2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.to_owned();
    }
    let idx = |i: usize, n_in: usize, n_out: usize| -> usize {
        (((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    let ys: Vec<usize> = (0..out_h).map(|i| idx(i, h, out_h)).collect();
    let xs: Vec<usize> = (0..out_w).map(|j| idx(j, w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(i, j)| img[[ys[i], xs[j]]])
}

/// Min-max scales to [0,1] in place; a constant image becomes all zeros.
pub(crate) fn min_max_unit(img: &mut Array2<f32>) {
    let (lo, hi) = img
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi > lo {
        let range = hi - lo;
        img.mapv_inplace(|x| (x - lo) / range);
    } else {
        img.fill(0.0);
    }
}

/// Prepares a slice for the image encoder: min-max to [0,1], three
/// replicated channels, bilinear resize to `size`², ImageNet standardisation.
pub fn normalize_for_encoder(slice: ArrayView2<f32>, size: usize) -> Result<Array3<f32>> {
    if slice.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("slice contains non-finite values".into()));
    }
    if size == 0 {
        return Err(Error::Invalid("encoder input size must be positive".into()));
    }
    let mut unit = slice.to_owned();
    min_max_unit(&mut unit);
    let resized = resize_bilinear(unit.view(), size, size);
    let mut out = Array3::zeros((3, size, size));
    for c in 0..3 {
        let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        out.index_axis_mut(Axis(0), c)
            .zip_mut_with(&resized, |o, &x| *o = (x - m) / s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{concatenate, Array3};

    fn stacked(depth: usize) -> Volume {
        let data = Array3::from_shape_fn((depth, 4, 5), |(d, _, _)| d as f32);
        Volume::new(data, [1.0; 3]).unwrap()
    }

    #[test]
    fn slice_is_constant_plane() {
        let v = stacked(3);
        let s = extract_slice(&v, 1).unwrap();
        assert_eq!(s.dim(), (4, 5));
        assert!(s.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn slices_restack_to_volume() {
        let v = stacked(6);
        let planes: Vec<_> = (0..6)
            .map(|k| extract_slice(&v, k).unwrap().insert_axis(Axis(0)))
            .collect();
        let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
        let restacked = concatenate(Axis(0), &views).unwrap();
        assert_eq!(restacked, v.data);
    }

    #[test]
    fn index_at_depth_is_out_of_range() {
        let v = stacked(3);
        assert!(matches!(
            extract_slice(&v, 3),
            Err(Error::OutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn constant_slice_standardises_zero() {
        let s = Array2::from_elem((10, 12), 7.0f32);
        let out = normalize_for_encoder(s.view(), 32).unwrap();
        assert_eq!(out.dim(), (3, 32, 32));
        for c in 0..3 {
            let expected = (0.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            assert!(out
                .index_axis(Axis(0), c)
                .iter()
                .all(|&x| (x - expected).abs() < 1e-6));
        }
    }

    #[test]
    fn unit_range_slice_is_not_rescaled() {
        let s = Array2::from_shape_fn((8, 8), |(i, j)| ((i * 8 + j) as f32) / 63.0);
        let out = normalize_for_encoder(s.view(), 8).unwrap();
        for ((i, j), &x) in s.indexed_iter() {
            let back = out[[0, i, j]] * IMAGENET_STD[0] + IMAGENET_MEAN[0];
            assert!((back - x).abs() < 1e-6);
        }
    }

    #[test]
    fn output_shape_follows_configured_size() {
        let s = Array2::from_shape_fn((37, 51), |(i, j)| (i as f32).sin() + j as f32);
        for size in [16, 64, 256] {
            assert_eq!(normalize_for_encoder(s.view(), size).unwrap().dim(), (3, size, size));
        }
    }

    #[test]
    fn nearest_resize_keeps_labels() {
        let m = Array2::from_shape_fn((7, 9), |(i, j)| ((i + j) % 2) as u8);
        let up = resize_nearest(m.view(), 20, 30);
        assert!(up.iter().all(|&x| x <= 1));
        let same = resize_nearest(m.view(), 7, 9);
        assert_eq!(same, m);
    }
}
