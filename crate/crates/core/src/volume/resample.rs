//! Grid resampling. Sample positions use the corner-aligned convention: the
//! first and last voxel centres of the input map onto the first and last
//! voxel centres of the output, so endpoints are preserved exactly.

use ndarray::Array3;
use tracing::warn;

use super::{MaskVolume, Volume};
use crate::error::{Error, Result};

/// Edge length of the low-resolution grid fed to the 3D branch.
pub const LOWRES_SIZE: usize = 64;

/// Source coordinate for output index `i` on an axis resized `n_in -> n_out`.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in as f64 - 1.0) / 2.0
    } else {
        i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
    }
}

/// Linear interpolation weights `(lo, hi, frac)` along one axis.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let x = source_coord(i, n_in, n_out);
            let lo = x.floor().max(0.0) as usize;
            let lo = lo.min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

fn axis_nearest(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..n_out)
        .map(|i| (source_coord(i, n_in, n_out).round() as usize).min(n_in - 1))
        .collect()
}

pub(crate) fn trilinear(data: &Array3<f32>, out: [usize; 3]) -> Array3<f32> {
    let s = data.shape();
    if [s[0], s[1], s[2]] == out {
        return data.clone();
    }
    let td = axis_taps(s[0], out[0]);
    let th = axis_taps(s[1], out[1]);
    let tw = axis_taps(s[2], out[2]);
    Array3::from_shape_fn((out[0], out[1], out[2]), |(d, h, w)| {
        let (d0, d1, fd) = td[d];
        let (h0, h1, fh) = th[h];
        let (w0, w1, fw) = tw[w];
        let at = |a: usize, b: usize, c: usize| data[[a, b, c]] as f64;
        let c00 = at(d0, h0, w0) * (1.0 - fw) + at(d0, h0, w1) * fw;
        let c01 = at(d0, h1, w0) * (1.0 - fw) + at(d0, h1, w1) * fw;
        let c10 = at(d1, h0, w0) * (1.0 - fw) + at(d1, h0, w1) * fw;
        let c11 = at(d1, h1, w0) * (1.0 - fw) + at(d1, h1, w1) * fw;
        let c0 = c00 * (1.0 - fh) + c01 * fh;
        let c1 = c10 * (1.0 - fh) + c11 * fh;
        (c0 * (1.0 - fd) + c1 * fd) as f32
    })
}

pub(crate) fn nearest(data: &Array3<u8>, out: [usize; 3]) -> Array3<u8> {
    let s = data.shape();
    if [s[0], s[1], s[2]] == out {
        return data.clone();
    }
    let nd = axis_nearest(s[0], out[0]);
    let nh = axis_nearest(s[1], out[1]);
    let nw = axis_nearest(s[2], out[2]);
    Array3::from_shape_fn((out[0], out[1], out[2]), |(d, h, w)| {
        data[[nd[d], nh[h], nw[w]]]
    })
}

/// Output length for an axis of `n` voxels at `spacing`, resampled to `target`.
fn isotropic_len(n: usize, spacing: f64, target: f64, axis: usize) -> usize {
    let extent = (n as f64 - 1.0) * spacing;
    if extent < target {
        if n > 1 {
            warn!(axis, extent, target, "physical extent below target spacing; clamping axis to 1");
        }
        1
    } else {
        (extent / target).round() as usize + 1
    }
}

/// Resamples to cubic voxels of edge `target_mm`. Intensities are trilinear,
/// masks nearest-neighbour.
pub fn resample_isotropic(
    v: &Volume,
    m: Option<&MaskVolume>,
    target_mm: f64,
) -> Result<(Volume, Option<MaskVolume>)> {
    if !(target_mm > 0.0) || !target_mm.is_finite() {
        return Err(Error::Invalid(format!("target spacing must be > 0, got {target_mm}")));
    }
    if let Some(m) = m {
        m.check_pair(v)?;
    }
    let shape = v.shape();
    let out = [
        isotropic_len(shape[0], v.spacing[0], target_mm, 0),
        isotropic_len(shape[1], v.spacing[1], target_mm, 1),
        isotropic_len(shape[2], v.spacing[2], target_mm, 2),
    ];
    let data = trilinear(&v.data, out);
    let volume = Volume {
        data,
        spacing: [target_mm; 3],
        ..v.clone()
    };
    let mask = m.map(|m| MaskVolume {
        data: nearest(&m.data, out),
        link: m.link.clone(),
    });
    Ok((volume, mask))
}

/// Resizes an isotropic volume to the fixed low-resolution grid and rescales
/// intensities to [0, 1].
pub fn downsample_to_lowres(
    v: &Volume,
    m: Option<&MaskVolume>,
    size: [usize; 3],
) -> Result<(Volume, Option<MaskVolume>)> {
    if size.iter().any(|&s| s == 0) {
        return Err(Error::Invalid(format!("low-res size must be positive, got {size:?}")));
    }
    if let Some(m) = m {
        m.check_pair(v)?;
    }
    let mut data = trilinear(&v.data, size);
    let (lo, hi) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi > lo {
        let range = hi - lo;
        data.mapv_inplace(|x| (x - lo) / range);
    } else {
        data.fill(0.0);
    }
    let shape = v.shape();
    let spacing = [0, 1, 2].map(|a| {
        if size[a] > 1 {
            v.spacing[a] * (shape[a] as f64 - 1.0) / (size[a] as f64 - 1.0)
        } else {
            v.spacing[a] * shape[a] as f64
        }
    });
    let volume = Volume {
        data,
        spacing,
        ..v.clone()
    };
    let mask = m.map(|m| MaskVolume {
        data: nearest(&m.data, size),
        link: m.link.clone(),
    });
    Ok((volume, mask))
}
