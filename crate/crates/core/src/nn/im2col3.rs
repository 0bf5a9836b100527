//! Gather and scatter for 3×3×3 same-padded convolutions. `gather` maps
//! `(B, C, D, H, W)` to `(B, 27·C, D·H·W)` with rows ordered `(tap, c)`;
//! `scatter` is its adjoint, so each is the other's backward.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy)]
struct Dims {
    b: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
}

fn shifted(i: usize, k: usize, n: usize) -> Option<usize> {
    let j = i as isize + k as isize - 1;
    (j >= 0 && (j as usize) < n).then_some(j as usize)
}

/// Valid output columns `[x0, x1)` for tap offset `kw`, and the source
/// column that `x0` reads.
fn row_span(kw: usize, w: usize) -> (usize, usize, usize) {
    match kw {
        0 => (1, w, 0),
        1 => (0, w, 0),
        _ => (0, w - 1, 1),
    }
}

fn gather_impl<T: WithDType>(src: &[T], dm: Dims) -> Vec<T> {
    let Dims { b, c, d, h, w } = dm;
    let n = d * h * w;
    let mut out = vec![T::zero(); b * 27 * c * n];
    for bi in 0..b {
        for t in 0..27 {
            let (kd, kh, kw) = (t / 9, (t / 3) % 3, t % 3);
            let (x0, x1, sx) = row_span(kw, w);
            for ci in 0..c {
                let so = (bi * c + ci) * n;
                let oo = ((bi * 27 + t) * c + ci) * n;
                for z in 0..d {
                    let Some(zs) = shifted(z, kd, d) else { continue };
                    for y in 0..h {
                        let Some(ys) = shifted(y, kh, h) else { continue };
                        let o = oo + (z * h + y) * w;
                        let s = so + (zs * h + ys) * w + sx;
                        out[o + x0..o + x1].copy_from_slice(&src[s..s + (x1 - x0)]);
                    }
                }
            }
        }
    }
    out
}

fn scatter_impl<T: WithDType>(src: &[T], dm: Dims) -> Vec<T> {
    let Dims { b, c, d, h, w } = dm;
    let n = d * h * w;
    let mut out = vec![T::zero(); b * c * n];
    for bi in 0..b {
        for t in 0..27 {
            let (kd, kh, kw) = (t / 9, (t / 3) % 3, t % 3);
            let (x0, x1, sx) = row_span(kw, w);
            for ci in 0..c {
                let so = ((bi * 27 + t) * c + ci) * n;
                let oo = (bi * c + ci) * n;
                for z in 0..d {
                    let Some(zs) = shifted(z, kd, d) else { continue };
                    for y in 0..h {
                        let Some(ys) = shifted(y, kh, h) else { continue };
                        let s = so + (z * h + y) * w;
                        let o = oo + (zs * h + ys) * w + sx;
                        for (dst, v) in out[o..o + (x1 - x0)].iter_mut().zip(&src[s + x0..s + x1]) {
                            *dst += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous<'a, T>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("im2col3 expects a contiguous input"),
    }
}

struct Gather(Dims);
struct Scatter(Dims);

impl CustomOp1 for Gather {
    fn name(&self) -> &'static str {
        "im2col3-gather"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dm = self.0;
        let shape = Shape::from((dm.b, 27 * dm.c, dm.d * dm.h * dm.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(gather_impl(contiguous(v, l)?, dm)),
            CpuStorage::F64(v) => CpuStorage::F64(gather_impl(contiguous(v, l)?, dm)),
            _ => candle_core::bail!("im2col3 supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, g: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(g.contiguous()?.apply_op1(Scatter(self.0))?))
    }
}

impl CustomOp1 for Scatter {
    fn name(&self) -> &'static str {
        "im2col3-scatter"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dm = self.0;
        let shape = Shape::from((dm.b, dm.c, dm.d, dm.h, dm.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(scatter_impl(contiguous(v, l)?, dm)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter_impl(contiguous(v, l)?, dm)),
            _ => candle_core::bail!("im2col3 supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, g: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(g.contiguous()?.apply_op1(Gather(self.0))?))
    }
}

/// `(B, C, D, H, W)` → `(B, 27·C, D·H·W)`, zero outside the volume.
pub fn im2col3(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, d, h, w) = x.dims5()?;
    x.contiguous()?.apply_op1(Gather(Dims { b, c, d, h, w }))
}
