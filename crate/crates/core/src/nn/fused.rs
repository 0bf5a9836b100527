//! Last-axis softmax and layer normalisation as single kernels with
//! hand-written gradients.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

fn contiguous<'a, T>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("fused op expects a contiguous input"),
    }
}

fn last_dim(l: &Layout) -> usize {
    l.dims().last().copied().unwrap_or(1).max(1)
}

macro_rules! dispatch1 {
    ($s:expr, $l:expr, $f:expr) => {
        match $s {
            CpuStorage::F32(v) => CpuStorage::F32($f(contiguous(v, $l)?)),
            CpuStorage::F64(v) => CpuStorage::F64($f(contiguous(v, $l)?)),
            _ => candle_core::bail!("fused ops support f32 and f64 only"),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32($f(contiguous(a, $l1)?, contiguous(b, $l2)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64($f(contiguous(a, $l1)?, contiguous(b, $l2)?))
            }
            _ => candle_core::bail!("fused ops need matching f32 or f64 inputs"),
        }
    };
}

fn softmax_rows<T: WithDType + Float>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let m = src.iter().fold(T::neg_infinity(), |a, &b| Float::max(a, b));
        let mut s = T::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - m).exp();
            s = s + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / s;
        }
    }
    out
}

fn softmax_grad_rows<T: WithDType + Float>(y: &[T], g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), dst) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(out.chunks_exact_mut(n)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
        for ((d, &p), &q) in dst.iter_mut().zip(yr).zip(gr) {
            *d = p * (q - dot);
        }
    }
    out
}

struct Softmax;
struct SoftmaxGrad;

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(l);
        Ok((dispatch1!(s, l, |x| softmax_rows(x, n)), l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, g: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&g.contiguous()?, &SoftmaxGrad)?))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "fused-softmax-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(l1);
        Ok((dispatch2!(s1, l1, s2, l2, |y, g| softmax_grad_rows(y, g, n)), l1.shape().clone()))
    }
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

fn row_stats<T: WithDType + Float>(r: &[T], eps: f64) -> (T, T) {
    let n = T::from(r.len()).unwrap();
    let mean = r.iter().fold(T::zero(), |a, &b| a + b) / n;
    let var = r.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
    (mean, (var + T::from(eps).unwrap()).sqrt().recip())
}

fn normalize_rows<T: WithDType + Float>(x: &[T], n: usize, eps: f64) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let (mean, inv) = row_stats(src, eps);
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * inv;
        }
    }
    out
}

fn normalize_grad_rows<T: WithDType + Float>(x: &[T], g: &[T], n: usize, eps: f64) -> Vec<T> {
    let nf = T::from(n).unwrap();
    let mut out = vec![T::zero(); x.len()];
    for ((xr, gr), dst) in x.chunks_exact(n).zip(g.chunks_exact(n)).zip(out.chunks_exact_mut(n)) {
        let (mean, inv) = row_stats(xr, eps);
        let gm = gr.iter().fold(T::zero(), |a, &b| a + b) / nf;
        let gx = xr.iter().zip(gr).fold(T::zero(), |a, (&v, &q)| a + (v - mean) * inv * q) / nf;
        for ((d, &v), &q) in dst.iter_mut().zip(xr).zip(gr) {
            *d = inv * (q - gm - (v - mean) * inv * gx);
        }
    }
    out
}

struct Normalize(f64);
struct NormalizeGrad(f64);

impl CustomOp1 for Normalize {
    fn name(&self) -> &'static str {
        "fused-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, eps) = (last_dim(l), self.0);
        Ok((dispatch1!(s, l, |x| normalize_rows(x, n, eps)), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, g: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&g.contiguous()?, &NormalizeGrad(self.0))?))
    }
}

impl CustomOp2 for NormalizeGrad {
    fn name(&self) -> &'static str {
        "fused-normalize-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, eps) = (last_dim(l1), self.0);
        Ok((
            dispatch2!(s1, l1, s2, l2, |x, g| normalize_grad_rows(x, g, n, eps)),
            l1.shape().clone(),
        ))
    }
}

/// `(x − mean) / sqrt(var + eps)` over the last axis, biased variance.
pub fn normalize_last(x: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Normalize(eps))
}
