//! Training-time slice augmentations.
//!
//! Spatial transforms sample their geometry once and apply it to both image
//! (bilinear) and mask (nearest), so masks never leave {0,1}. Contrast and
//! artifact transforms only touch the image. Images are expected in [0, 1].

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{resize_bilinear, resize_nearest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Transform {
    /// Crop covering a `scale` fraction of the area with aspect ratio in
    /// `ratio`, resized back to the input shape.
    RandomResizedCrop { scale: (f64, f64), ratio: (f64, f64) },
    RandomRotation { max_degrees: f64 },
    AdjustSharpness { factor: (f32, f32) },
    Equalize,
    GaussianNoise { sigma: (f32, f32) },
    BiasField { order: usize, magnitude: f32 },
    GibbsNoise { cut: (f64, f64) },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformStep {
    #[serde(flatten)]
    pub transform: Transform,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPipeline {
    pub steps: Vec<TransformStep>,
    pub seed: u64,
}

pub const DEFAULT_PROBABILITY: f64 = 0.3;

impl Default for AugmentPipeline {
    fn default() -> Self {
        let p = DEFAULT_PROBABILITY;
        let step = |transform| TransformStep {
            transform,
            probability: p,
        };
        AugmentPipeline {
            steps: vec![
                step(Transform::RandomResizedCrop {
                    scale: (0.7, 1.0),
                    ratio: (3.0 / 4.0, 4.0 / 3.0),
                }),
                step(Transform::RandomRotation { max_degrees: 15.0 }),
                step(Transform::AdjustSharpness { factor: (0.5, 2.0) }),
                step(Transform::Equalize),
                step(Transform::BiasField {
                    order: 3,
                    magnitude: 0.3,
                }),
                step(Transform::GibbsNoise { cut: (0.5, 0.95) }),
                step(Transform::GaussianNoise { sigma: (0.0, 0.05) }),
            ],
            seed: 0,
        }
    }
}

impl AugmentPipeline {
    /// A pipeline whose transforms never fire.
    pub fn disabled() -> Self {
        let mut p = Self::default();
        for s in &mut p.steps {
            s.probability = 0.0;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.steps {
            if !(0.0..=1.0).contains(&s.probability) {
                return Err(Error::Invalid(format!(
                    "transform probability {} outside [0,1]",
                    s.probability
                )));
            }
        }
        Ok(())
    }
}

/// Applies every step independently with its probability.
pub fn apply_pipeline<R: Rng + ?Sized>(
    p: &AugmentPipeline,
    image: &Array2<f32>,
    mask: &Array2<u8>,
    rng: &mut R,
) -> Result<(Array2<f32>, Array2<u8>)> {
    if image.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} differ",
            image.dim(),
            mask.dim()
        )));
    }
    p.validate()?;
    let mut img = image.clone();
    let mut msk = mask.clone();
    for step in &p.steps {
        if !(step.probability > 0.0 && rng.gen_bool(step.probability)) {
            continue;
        }
        match &step.transform {
            Transform::RandomResizedCrop { scale, ratio } => {
                if let Some(crop) = sample_crop(img.dim(), *scale, *ratio, rng) {
                    (img, msk) = resized_crop(&img, &msk, crop);
                }
            }
            Transform::RandomRotation { max_degrees } => {
                let deg = rng.gen_range(-max_degrees..=*max_degrees);
                (img, msk) = rotate(&img, &msk, deg);
            }
            Transform::AdjustSharpness { factor } => {
                let f = rng.gen_range(factor.0..=factor.1);
                img = adjust_sharpness(&img, f);
            }
            Transform::Equalize => img = equalize(&img),
            Transform::GaussianNoise { sigma } => {
                let s = rng.gen_range(sigma.0..=sigma.1);
                img = gaussian_noise(&img, s, rng);
            }
            Transform::BiasField { order, magnitude } => {
                img = rand_bias_field(&img, rng, *order, *magnitude).0;
            }
            Transform::GibbsNoise { cut } => {
                img = rand_gibbs_noise(&img, rng, *cut);
            }
        }
    }
    Ok((img, msk))
}

/// Crop window `(top, left, height, width)`.
pub type Crop = (usize, usize, usize, usize);

/// Samples a crop; degenerate draws are retried up to five times before
/// giving up (the caller then leaves the pair untouched).
pub fn sample_crop<R: Rng + ?Sized>(
    dim: (usize, usize),
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut R,
) -> Option<Crop> {
    let (h, w) = dim;
    let area = (h * w) as f64;
    for _ in 0..5 {
        let s = rng.gen_range(scale.0..=scale.1);
        let log_r = rng.gen_range(ratio.0.ln()..=ratio.1.ln());
        let r = log_r.exp();
        let cw = (s * area * r).sqrt().round() as usize;
        let ch = (s * area / r).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return Some((top, left, ch, cw));
        }
    }
    None
}

pub fn resized_crop(image: &Array2<f32>, mask: &Array2<u8>, crop: Crop) -> (Array2<f32>, Array2<u8>) {
    let (h, w) = image.dim();
    let (top, left, ch, cw) = crop;
    let ic = image.slice(ndarray::s![top..top + ch, left..left + cw]);
    let mc = mask.slice(ndarray::s![top..top + ch, left..left + cw]);
    (resize_bilinear(ic, h, w), resize_nearest(mc, h, w))
}

fn bilinear_at(img: ArrayView2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = img.dim();
    let eps = 1e-9;
    if y < -eps || x < -eps || y > h as f64 - 1.0 + eps || x > w as f64 - 1.0 + eps {
        return 0.0;
    }
    let y = y.clamp(0.0, h as f64 - 1.0);
    let x = x.clamp(0.0, w as f64 - 1.0);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Rotates about the image centre by `degrees` (counter-clockwise), filling
/// uncovered pixels with zero.
pub fn rotate(image: &Array2<f32>, mask: &Array2<u8>, degrees: f64) -> (Array2<f32>, Array2<u8>) {
    let (h, w) = image.dim();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = |y: usize, x: usize| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        (cos * dy - sin * dx + cy, sin * dy + cos * dx + cx)
    };
    let img = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = src(y, x);
        bilinear_at(image.view(), sy, sx)
    });
    let msk = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = src(y, x);
        let (ry, rx) = (sy.round(), sx.round());
        if ry < 0.0 || rx < 0.0 || ry > h as f64 - 1.0 || rx > w as f64 - 1.0 {
            0
        } else {
            mask[[ry as usize, rx as usize]]
        }
    });
    (img, msk)
}

/// Blends the image with a 3×3 smoothed copy; `factor` 1 is the identity,
/// values above 1 sharpen. Border pixels are left as is.
pub fn adjust_sharpness(image: &Array2<f32>, factor: f32) -> Array2<f32> {
    let (h, w) = image.dim();
    if h < 3 || w < 3 {
        return image.clone();
    }
    let mut blurred = image.clone();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut s = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    let k = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                    s += k * image[[y + dy - 1, x + dx - 1]];
                }
            }
            blurred[[y, x]] = s / 13.0;
        }
    }
    let mut out = image.clone();
    Zip::from(&mut out)
        .and(&blurred)
        .for_each(|o, &b| *o = (b + factor * (*o - b)).clamp(0.0, 1.0));
    out
}

/// Histogram equalisation over 256 bins of [0,1].
pub fn equalize(image: &Array2<f32>) -> Array2<f32> {
    let bin = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as usize;
    let mut hist = [0usize; 256];
    for &x in image.iter() {
        hist[bin(x)] += 1;
    }
    let n = image.len();
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist.iter()) {
        acc += h;
        *c = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return image.clone();
    }
    let denom = (n - cdf_min) as f32;
    image.mapv(|x| (cdf[bin(x)].saturating_sub(cdf_min)) as f32 / denom)
}

pub fn gaussian_noise<R: Rng + ?Sized>(image: &Array2<f32>, sigma: f32, rng: &mut R) -> Array2<f32> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let n = Normal::new(0.0f32, sigma).unwrap();
    image.mapv(|x| x + n.sample(rng))
}

/// Additive iid Gaussian noise with σ drawn uniformly from `sigma`.
pub fn rand_gaussian_noise<R: Rng + ?Sized>(
    image: &Array2<f32>,
    rng: &mut R,
    sigma: (f32, f32),
) -> Array2<f32> {
    let s = rng.gen_range(sigma.0..=sigma.1);
    gaussian_noise(image, s, rng)
}

/// Polynomial log-field `P(x, y) = Σ c_ij x^i y^j` over `i + j <= order`,
/// coordinates normalised to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    pub order: usize,
    /// Coefficients in `(i, j)` order with `i` outer, `j` inner.
    pub coeffs: Vec<f64>,
}

impl BiasField {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, order: usize, magnitude: f32) -> Self {
        let m = magnitude as f64;
        let n = (order + 1) * (order + 2) / 2;
        let coeffs = (0..n)
            .map(|_| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 })
            .collect();
        BiasField { order, coeffs }
    }

    pub fn log_gain(&self, x: f64, y: f64) -> f64 {
        let mut k = 0;
        let mut p = 0.0;
        for i in 0..=self.order {
            for j in 0..=self.order - i {
                p += self.coeffs[k] * x.powi(i as i32) * y.powi(j as i32);
                k += 1;
            }
        }
        p
    }

    pub fn apply(&self, image: &Array2<f32>) -> Array2<f32> {
        let (h, w) = image.dim();
        let coord = |i: usize, n: usize| {
            if n > 1 {
                2.0 * i as f64 / (n as f64 - 1.0) - 1.0
            } else {
                0.0
            }
        };
        Array2::from_shape_fn((h, w), |(r, c)| {
            let g = self.log_gain(coord(c, w), coord(r, h)).exp();
            ((image[[r, c]] as f64 * g) as f32).clamp(0.0, 1.0)
        })
    }
}

/// Multiplies by `exp(P)` for a freshly sampled field and clips to [0,1].
/// The sampled field is returned alongside the image.
pub fn rand_bias_field<R: Rng + ?Sized>(
    image: &Array2<f32>,
    rng: &mut R,
    order: usize,
    magnitude: f32,
) -> (Array2<f32>, BiasField) {
    let field = BiasField::sample(rng, order, magnitude);
    if magnitude == 0.0 {
        return (image.clone(), field);
    }
    (field.apply(image), field)
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let row = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let col = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut buf = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            buf[r] = data[r * w + c];
        }
        col.process(&mut buf);
        for r in 0..h {
            data[r * w + c] = buf[r];
        }
    }
}

/// Keeps only frequencies with `|f| <= cut·n/2` on each axis (k-space
/// truncation, producing ringing near edges). `cut = 1` keeps everything.
pub fn gibbs_truncate(image: &Array2<f32>, cut: f64) -> Array2<f32> {
    let (h, w) = image.dim();
    let mut data: Vec<Complex<f64>> = image.iter().map(|&x| Complex::new(x as f64, 0.0)).collect();
    fft2(&mut data, h, w, false);
    let keep = |f: usize, n: usize| {
        let signed = if f <= n / 2 { f as f64 } else { f as f64 - n as f64 };
        signed.abs() <= cut * n as f64 / 2.0
    };
    for r in 0..h {
        for c in 0..w {
            if !(keep(r, h) && keep(c, w)) {
                data[r * w + c] = Complex::new(0.0, 0.0);
            }
        }
    }
    fft2(&mut data, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    Array2::from_shape_vec((h, w), data.iter().map(|z| (z.re * scale) as f32).collect())
        .expect("shape preserved")
}

pub fn rand_gibbs_noise<R: Rng + ?Sized>(image: &Array2<f32>, rng: &mut R, cut: (f64, f64)) -> Array2<f32> {
    let c = rng.gen_range(cut.0..=cut.1);
    gibbs_truncate(image, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_pair() -> (Array2<f32>, Array2<u8>) {
        let img = Array2::from_shape_fn((32, 40), |(y, x)| {
            ((y as f32 * 0.3).sin() * 0.4 + (x as f32 * 0.17).cos() * 0.4 + 0.5).clamp(0.0, 1.0)
        });
        let mask = Array2::from_shape_fn((32, 40), |(y, x)| {
            (((y as i32 - 16).pow(2) + (x as i32 - 20).pow(2)) < 64) as u8
        });
        (img, mask)
    }

    fn max_abs_diff(a: &Array2<f32>, b: &Array2<f32>) -> f32 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn zero_probability_pipeline_is_identity() {
        let (img, mask) = test_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = apply_pipeline(&AugmentPipeline::disabled(), &img, &mask, &mut rng).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, mask);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let (img, mask) = test_pair();
        let (a, b) = rotate(&img, &mask, 0.0);
        assert!(max_abs_diff(&a, &img) <= 1e-6);
        assert_eq!(b, mask);
    }

    #[test]
    fn pipeline_is_reproducible_and_keeps_mask_binary() {
        let (img, mask) = test_pair();
        let mut p = AugmentPipeline::default();
        for s in &mut p.steps {
            s.probability = 1.0;
        }
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            apply_pipeline(&p, &img, &mask, &mut rng).unwrap()
        };
        let (a1, m1) = run(4);
        let (a2, m2) = run(4);
        assert_eq!(a1, a2);
        assert_eq!(m1, m2);
        assert!(m1.iter().all(|&v| v <= 1));
        assert_eq!(m1.dim(), mask.dim());
    }

    #[test]
    fn spatial_transforms_share_geometry() {
        // Image equal to the mask as floats: after any spatial transform, the
        // bilinear image thresholded at 0.5 should mostly agree with the mask.
        let (_, mask) = test_pair();
        let img = mask.mapv(|v| v as f32);
        let (ri, rm) = rotate(&img, &mask, 11.0);
        let agree = ri
            .iter()
            .zip(rm.iter())
            .filter(|(&a, &b)| (a > 0.5) == (b == 1))
            .count();
        assert!(agree as f64 / rm.len() as f64 > 0.98);
        let (ci, cm) = resized_crop(&img, &mask, (3, 5, 24, 30));
        let agree = ci
            .iter()
            .zip(cm.iter())
            .filter(|(&a, &b)| (a > 0.5) == (b == 1))
            .count();
        assert!(agree as f64 / cm.len() as f64 > 0.97);
    }

    #[test]
    fn impossible_crop_falls_back_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_crop((1, 1), (0.1, 0.2), (1.0, 1.0), &mut rng).is_none());
    }

    #[test]
    fn sharpness_factor_one_is_identity() {
        let (img, _) = test_pair();
        assert!(max_abs_diff(&adjust_sharpness(&img, 1.0), &img) <= 1e-6);
    }

    #[test]
    fn bias_field_zero_magnitude_is_identity() {
        let (img, _) = test_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (out, _) = rand_bias_field(&img, &mut rng, 3, 0.0);
        assert_eq!(out, img);
    }

    #[test]
    fn bias_field_matches_recomputed_field_pointwise() {
        let img = Array2::from_elem((17, 23), 0.5f32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (out, field) = rand_bias_field(&img, &mut rng, 3, 0.3);
        assert_eq!(field.coeffs.len(), 10);
        for ((r, c), &v) in out.indexed_iter() {
            let x = 2.0 * c as f64 / 22.0 - 1.0;
            let y = 2.0 * r as f64 / 16.0 - 1.0;
            let mut p = 0.0;
            let mut k = 0;
            for i in 0..=3 {
                for j in 0..=(3 - i) {
                    p += field.coeffs[k] * x.powi(i) * y.powi(j);
                    k += 1;
                }
            }
            let expected = ((0.5 * p.exp()) as f32).clamp(0.0, 1.0);
            assert!((v - expected).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn gibbs_full_spectrum_is_identity() {
        let (img, _) = test_pair();
        assert!(max_abs_diff(&gibbs_truncate(&img, 1.0), &img) < 1e-5);
    }

    #[test]
    fn gibbs_keeps_constant_and_low_frequencies() {
        let c = Array2::from_elem((16, 16), 0.42f32);
        assert!(max_abs_diff(&gibbs_truncate(&c, 0.5), &c) < 1e-6);
        // Two cycles across 32 pixels: |f| = 2 <= 0.5 * 16.
        let s = Array2::from_shape_fn((32, 32), |(_, x)| {
            0.5 + 0.3 * (std::f32::consts::TAU * 2.0 * x as f32 / 32.0).sin()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(max_abs_diff(&rand_gibbs_noise(&s, &mut rng, (0.5, 0.95)), &s) < 1e-4);
    }

    #[test]
    fn gaussian_noise_statistics() {
        let img = Array2::from_elem((256, 256), 0.5f32);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        assert_eq!(gaussian_noise(&img, 0.0, &mut rng), img);
        let sigma = 0.05f32;
        let out = gaussian_noise(&img, sigma, &mut rng);
        let n = out.len() as f64;
        let diffs: Vec<f64> = out.iter().map(|&x| (x - 0.5) as f64).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * sigma as f64 / 256.0);
        assert!((std - sigma as f64).abs() / (sigma as f64) < 0.1);
    }

    #[test]
    fn equalize_stays_in_unit_range() {
        let (img, _) = test_pair();
        let e = equalize(&img);
        assert!(e.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = Array2::from_elem((4, 4), 0.3f32);
        assert_eq!(equalize(&c), c);
    }

    #[test]
    fn pipeline_serializes_by_name() {
        let p = AugmentPipeline::default();
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"name\":\"random_resized_crop\""));
        let back: AugmentPipeline = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}
