//! Deterministic synthetic bone phantoms.
//!
//! Objects are defined analytically in millimetre coordinates (voxel centre
//! `(d, h, w)` sits at `(d·sd, h·sh, w·sw)`), rasterised by voxel-centre
//! membership. Each object gets a bright interior and a darker rim; the twin
//! volume keeps the geometry and rim but inverts interior vs. background.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{MaskVolume, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Ellipsoid,
    Capsule,
    Tube,
}

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectSpec {
    /// `rotation` rows are the ellipsoid's principal axes in world coordinates.
    Ellipsoid {
        center: Vec3,
        semi_axes: Vec3,
        rotation: [Vec3; 3],
    },
    /// Segment `a`-`b` swept by a ball of `radius`.
    Capsule { a: Vec3, b: Vec3, radius: f64 },
    /// Solid cylinder with flat caps at `a` and `b`.
    Tube { a: Vec3, b: Vec3, radius: f64 },
}

impl ObjectSpec {
    pub fn kind(&self) -> ObjectKind {
        match self {
            ObjectSpec::Ellipsoid { .. } => ObjectKind::Ellipsoid,
            ObjectSpec::Capsule { .. } => ObjectKind::Capsule,
            ObjectSpec::Tube { .. } => ObjectKind::Tube,
        }
    }

    pub fn axis_aligned_ellipsoid(center: Vec3, semi_axes: Vec3) -> Self {
        ObjectSpec::Ellipsoid {
            center,
            semi_axes,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Inward distance from the surface when `p` lies inside the object grown
    /// by `grow` mm, `None` otherwise. Exact for capsules and tubes, a
    /// first-order estimate for ellipsoids.
    fn depth_inside(&self, p: Vec3, grow: f64) -> Option<f64> {
        match self {
            ObjectSpec::Ellipsoid {
                center,
                semi_axes,
                rotation,
            } => {
                let r = sub(p, *center);
                let mut q = 0.0;
                for (axis, &semi) in rotation.iter().zip(semi_axes) {
                    let x = dot(r, *axis) / (semi + grow);
                    q += x * x;
                }
                if q <= 1.0 {
                    let min_axis = semi_axes.iter().cloned().fold(f64::INFINITY, f64::min) + grow;
                    Some((1.0 - q.sqrt()) * min_axis)
                } else {
                    None
                }
            }
            ObjectSpec::Capsule { a, b, radius } => {
                let ab = sub(*b, *a);
                let t = (dot(sub(p, *a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
                let closest = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
                let d = norm(sub(p, closest));
                let r = radius + grow;
                (d <= r).then_some(r - d)
            }
            ObjectSpec::Tube { a, b, radius } => {
                let ab = sub(*b, *a);
                let len = norm(ab);
                let u = [ab[0] / len, ab[1] / len, ab[2] / len];
                let ap = sub(p, *a);
                let along = dot(ap, u);
                let radial = norm([
                    ap[0] - along * u[0],
                    ap[1] - along * u[1],
                    ap[2] - along * u[2],
                ]);
                let r = radius + grow;
                if radial <= r && along >= -grow && along <= len + grow {
                    Some((r - radial).min(along + grow).min(len + grow - along))
                } else {
                    None
                }
            }
        }
    }

    /// Axis-aligned bounding box in mm, grown by `grow`.
    fn bounds(&self, grow: f64) -> (Vec3, Vec3) {
        match self {
            ObjectSpec::Ellipsoid {
                center,
                semi_axes,
                rotation,
            } => {
                let mut ext = [0.0; 3];
                for (k, e) in ext.iter_mut().enumerate() {
                    *e = (0..3)
                        .map(|i| ((semi_axes[i] + grow) * rotation[i][k]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                }
                (
                    [center[0] - ext[0], center[1] - ext[1], center[2] - ext[2]],
                    [center[0] + ext[0], center[1] + ext[1], center[2] + ext[2]],
                )
            }
            ObjectSpec::Capsule { a, b, radius } | ObjectSpec::Tube { a, b, radius } => {
                let r = radius + grow;
                (
                    [0, 1, 2].map(|k| a[k].min(b[k]) - r),
                    [0, 1, 2].map(|k| a[k].max(b[k]) + r),
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub min_objects: usize,
    pub max_objects: usize,
    pub kinds: Vec<ObjectKind>,
    /// Range for ellipsoid semi-axes and capsule/tube radii, mm.
    pub size_range_mm: (f64, f64),
    /// Range for capsule/tube axis length, mm.
    pub length_range_mm: (f64, f64),
    /// Minimum gap between objects and to the volume border, mm.
    pub margin_mm: f64,
    pub rim_mm: f64,
    pub background: f32,
    pub texture: f32,
    pub interior: f32,
    pub interior_jitter: f32,
    pub rim: f32,
    pub twin_background: f32,
    pub twin_interior: f32,
    pub noise_sigma: f32,
    pub bias_magnitude: f32,
    pub max_retries: usize,
    /// When nonempty, used verbatim instead of random placement.
    pub objects: Vec<ObjectSpec>,
    pub locations: Vec<String>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [96, 96, 96],
            spacing_mm: [1.0, 1.0, 1.0],
            min_objects: 2,
            max_objects: 6,
            kinds: vec![ObjectKind::Ellipsoid, ObjectKind::Capsule, ObjectKind::Tube],
            size_range_mm: (5.0, 14.0),
            length_range_mm: (20.0, 50.0),
            margin_mm: 3.0,
            rim_mm: 1.5,
            background: 0.35,
            texture: 0.08,
            interior: 0.8,
            interior_jitter: 0.08,
            rim: 0.08,
            twin_background: 0.75,
            twin_interior: 0.3,
            noise_sigma: 0.03,
            bias_magnitude: 0.2,
            max_retries: 200,
            objects: Vec::new(),
            locations: ["knee", "hip", "shoulder", "spine", "ankle"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomOutput {
    pub volume: Volume,
    pub mask: MaskVolume,
    /// Same geometry with inverted object/background contrast.
    pub twin: Volume,
    pub objects: Vec<ObjectSpec>,
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [Vec3; 3] {
    // Uniform unit quaternion.
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut q = [0.0f64; 4];
    for x in q.iter_mut() {
        *x = n.sample(rng);
    }
    let l = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / l);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn random_object(rng: &mut ChaCha8Rng, cfg: &PhantomConfig, extent: Vec3) -> ObjectSpec {
    let kind = cfg.kinds[rng.gen_range(0..cfg.kinds.len())];
    let (lo, hi) = cfg.size_range_mm;
    let center = [0, 1, 2].map(|k| rng.gen_range(0.0..=extent[k]));
    match kind {
        ObjectKind::Ellipsoid => ObjectSpec::Ellipsoid {
            center,
            semi_axes: [0, 1, 2].map(|_| rng.gen_range(lo..=hi)),
            rotation: random_rotation(rng),
        },
        ObjectKind::Capsule | ObjectKind::Tube => {
            let radius = rng.gen_range(lo * 0.6..=hi * 0.6);
            let len = rng.gen_range(cfg.length_range_mm.0..=cfg.length_range_mm.1);
            let dir: [f64; 3] = UnitSphere.sample(rng);
            let a = [0, 1, 2].map(|k| center[k] - 0.5 * len * dir[k]);
            let b = [0, 1, 2].map(|k| center[k] + 0.5 * len * dir[k]);
            if kind == ObjectKind::Capsule {
                ObjectSpec::Capsule { a, b, radius }
            } else {
                ObjectSpec::Tube { a, b, radius }
            }
        }
    }
}

/// Voxel index range covered by `[lo, hi]` mm along one axis.
fn index_range(lo: f64, hi: f64, spacing: f64, n: usize) -> Option<(usize, usize)> {
    let start = (lo / spacing).ceil().max(0.0);
    let end = (hi / spacing).floor().min(n as f64 - 1.0);
    (start <= end).then(|| (start as usize, end as usize))
}

fn fits_inside(obj: &ObjectSpec, cfg: &PhantomConfig) -> bool {
    let (lo, hi) = obj.bounds(0.0);
    (0..3).all(|k| {
        let extent = (cfg.shape[k] as f64 - 1.0) * cfg.spacing_mm[k];
        lo[k] >= cfg.margin_mm && hi[k] <= extent - cfg.margin_mm
    })
}

/// True when `obj` grown by the margin touches any occupied voxel.
fn collides(obj: &ObjectSpec, occupied: &Array3<u8>, cfg: &PhantomConfig) -> bool {
    let (lo, hi) = obj.bounds(cfg.margin_mm);
    let ranges: Vec<_> = (0..3)
        .map(|k| index_range(lo[k], hi[k], cfg.spacing_mm[k], cfg.shape[k]))
        .collect();
    let (Some(rd), Some(rh), Some(rw)) = (ranges[0], ranges[1], ranges[2]) else {
        return false;
    };
    for d in rd.0..=rd.1 {
        for h in rh.0..=rh.1 {
            for w in rw.0..=rw.1 {
                if occupied[[d, h, w]] != 0 {
                    let p = [
                        d as f64 * cfg.spacing_mm[0],
                        h as f64 * cfg.spacing_mm[1],
                        w as f64 * cfg.spacing_mm[2],
                    ];
                    if obj.depth_inside(p, cfg.margin_mm).is_some() {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Writes object `label` (1-based) into `labels` and its inward depth into `depth`.
fn rasterize(
    obj: &ObjectSpec,
    label: u8,
    labels: &mut Array3<u8>,
    depth: &mut Array3<f32>,
    cfg: &PhantomConfig,
) {
    let (lo, hi) = obj.bounds(0.0);
    let ranges: Vec<_> = (0..3)
        .map(|k| index_range(lo[k], hi[k], cfg.spacing_mm[k], cfg.shape[k]))
        .collect();
    let (Some(rd), Some(rh), Some(rw)) = (ranges[0], ranges[1], ranges[2]) else {
        return;
    };
    for d in rd.0..=rd.1 {
        for h in rh.0..=rh.1 {
            for w in rw.0..=rw.1 {
                let p = [
                    d as f64 * cfg.spacing_mm[0],
                    h as f64 * cfg.spacing_mm[1],
                    w as f64 * cfg.spacing_mm[2],
                ];
                if let Some(t) = obj.depth_inside(p, 0.0) {
                    labels[[d, h, w]] = label;
                    depth[[d, h, w]] = t as f32;
                }
            }
        }
    }
}

/// Low-frequency random field: a handful of cosines with wavelengths of a
/// few centimetres.
struct Texture {
    waves: Vec<(Vec3, f64, f64)>,
}

impl Texture {
    fn sample(rng: &mut ChaCha8Rng, amplitude: f32) -> Self {
        let n = 6;
        let waves = (0..n)
            .map(|_| {
                let dir: [f64; 3] = UnitSphere.sample(rng);
                let wavelength = rng.gen_range(20.0..60.0);
                let k = dir.map(|x| x * std::f64::consts::TAU / wavelength);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (k, phase, amplitude as f64 / (n as f64).sqrt())
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, p: Vec3) -> f64 {
        self.waves
            .iter()
            .map(|(k, phase, amp)| amp * (dot(*k, p) + phase).cos())
            .sum()
    }
}

/// Smooth multiplicative field `exp(P)` with P a quadratic polynomial in
/// normalised coordinates.
struct Bias {
    coeffs: [f64; 10],
}

impl Bias {
    fn sample(rng: &mut ChaCha8Rng, magnitude: f32) -> Self {
        let m = magnitude as f64;
        let mut coeffs = [0.0; 10];
        if m > 0.0 {
            for c in coeffs.iter_mut().skip(1) {
                *c = rng.gen_range(-m..=m);
            }
        }
        Bias { coeffs }
    }

    fn at(&self, u: Vec3) -> f64 {
        let [x, y, z] = u;
        let terms = [1.0, x, y, z, x * x, y * y, z * z, x * y, x * z, y * z];
        terms
            .iter()
            .zip(self.coeffs.iter())
            .map(|(t, c)| t * c)
            .sum::<f64>()
            .exp()
    }
}

struct Contrast {
    background: f32,
    interiors: Vec<f32>,
    rim: f32,
}

fn synthesize(
    rng: &mut ChaCha8Rng,
    cfg: &PhantomConfig,
    labels: &Array3<u8>,
    depth: &Array3<f32>,
    texture: &Texture,
    contrast: &Contrast,
) -> Array3<f32> {
    let bias = Bias::sample(rng, cfg.bias_magnitude);
    let noise = Normal::new(0.0f32, cfg.noise_sigma.max(0.0)).unwrap();
    let [nd, nh, nw] = cfg.shape;
    let norm_coord = |i: usize, n: usize| {
        if n > 1 {
            2.0 * i as f64 / (n as f64 - 1.0) - 1.0
        } else {
            0.0
        }
    };
    let mut out = Array3::zeros((nd, nh, nw));
    for ((d, h, w), o) in out.indexed_iter_mut() {
        let p = [
            d as f64 * cfg.spacing_mm[0],
            h as f64 * cfg.spacing_mm[1],
            w as f64 * cfg.spacing_mm[2],
        ];
        let tex = texture.at(p) as f32;
        let label = labels[[d, h, w]];
        let clean = if label == 0 {
            contrast.background + tex
        } else if depth[[d, h, w]] < cfg.rim_mm as f32 {
            contrast.rim + 0.3 * tex
        } else {
            contrast.interiors[label as usize - 1] + 0.5 * tex
        };
        let b = bias.at([norm_coord(d, nd), norm_coord(h, nh), norm_coord(w, nw)]) as f32;
        let n = if cfg.noise_sigma > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        };
        *o = clean * b + n;
    }
    out
}

/// Generates `(volume, mask, twin)` as a pure function of `(seed, cfg)`.
pub fn generate_phantom(seed: u64, cfg: &PhantomConfig) -> Result<PhantomOutput> {
    if cfg.shape.iter().any(|&s| s == 0) || cfg.spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Invalid("phantom shape and spacing must be positive".into()));
    }
    if cfg.objects.is_empty() {
        if cfg.kinds.is_empty() || cfg.min_objects > cfg.max_objects || cfg.max_objects == 0 {
            return Err(Error::Invalid("phantom object count/kinds are inconsistent".into()));
        }
        if cfg.size_range_mm.0 > cfg.size_range_mm.1
            || cfg.length_range_mm.0 > cfg.length_range_mm.1
        {
            return Err(Error::Invalid("phantom size ranges are inverted".into()));
        }
    }
    if cfg.objects.len() > 255 || cfg.max_objects > 255 {
        return Err(Error::Invalid("at most 255 objects per phantom".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nd, nh, nw] = cfg.shape;
    let extent = [0, 1, 2].map(|k| (cfg.shape[k] as f64 - 1.0) * cfg.spacing_mm[k]);
    let mut labels = Array3::<u8>::zeros((nd, nh, nw));
    let mut depth = Array3::<f32>::zeros((nd, nh, nw));

    let mut objects = Vec::new();
    if cfg.objects.is_empty() {
        let target = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut retries = 0;
        while objects.len() < target && retries < cfg.max_retries {
            let obj = random_object(&mut rng, cfg, extent);
            if fits_inside(&obj, cfg) && !collides(&obj, &labels, cfg) {
                rasterize(&obj, objects.len() as u8 + 1, &mut labels, &mut depth, cfg);
                objects.push(obj);
            } else {
                retries += 1;
            }
        }
        if objects.len() < target {
            warn!(
                seed,
                placed = objects.len(),
                requested = target,
                "could not place all phantom objects; continuing with fewer"
            );
        }
    } else {
        for obj in &cfg.objects {
            rasterize(obj, objects.len() as u8 + 1, &mut labels, &mut depth, cfg);
            objects.push(obj.clone());
        }
    }

    let location = if cfg.locations.is_empty() {
        "phantom".to_string()
    } else {
        cfg.locations[rng.gen_range(0..cfg.locations.len())].clone()
    };
    let jitter: Vec<f32> = objects
        .iter()
        .map(|_| {
            if cfg.interior_jitter > 0.0 {
                rng.gen_range(-cfg.interior_jitter..=cfg.interior_jitter)
            } else {
                0.0
            }
        })
        .collect();
    let texture = Texture::sample(&mut rng, cfg.texture);

    let t1 = Contrast {
        background: cfg.background,
        interiors: jitter.iter().map(|j| cfg.interior + j).collect(),
        rim: cfg.rim,
    };
    let twin_contrast = Contrast {
        background: cfg.twin_background,
        interiors: jitter.iter().map(|j| cfg.twin_interior - j).collect(),
        rim: cfg.rim,
    };
    let data = synthesize(&mut rng, cfg, &labels, &depth, &texture, &t1);
    let twin_data = synthesize(&mut rng, cfg, &labels, &depth, &texture, &twin_contrast);

    let patient = format!("phantom-{seed}");
    let volume = Volume::new(data, cfg.spacing_mm)?.with_tags("t1", &patient, &location);
    let twin = Volume::new(twin_data, cfg.spacing_mm)?.with_tags("t2-sim", &patient, &location);
    let mask = MaskVolume::new(labels.mapv(|l| (l > 0) as u8), patient.clone())?;
    Ok(PhantomOutput {
        volume,
        mask,
        twin,
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn small_cfg() -> PhantomConfig {
        PhantomConfig {
            shape: [48, 48, 48],
            size_range_mm: (3.0, 7.0),
            length_range_mm: (10.0, 20.0),
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let cfg = small_cfg();
        let a = generate_phantom(11, &cfg).unwrap();
        let b = generate_phantom(11, &cfg).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.twin, b.twin);
        let c = generate_phantom(12, &cfg).unwrap();
        assert_ne!(a.volume.data, c.volume.data);
    }

    #[test]
    fn ellipsoid_voxel_count_matches_analytic_volume() {
        let cfg = PhantomConfig {
            objects: vec![ObjectSpec::axis_aligned_ellipsoid(
                [47.5, 47.3, 47.1],
                [10.0, 8.0, 6.0],
            )],
            ..PhantomConfig::default()
        };
        let out = generate_phantom(0, &cfg).unwrap();
        let analytic = 4.0 / 3.0 * PI * 480.0;
        let count = out.mask.count() as f64;
        assert!((count - analytic).abs() / analytic < 0.02, "{count} vs {analytic}");
    }

    #[test]
    fn twin_shares_geometry_and_inverts_contrast() {
        let cfg = PhantomConfig {
            noise_sigma: 0.0,
            bias_magnitude: 0.0,
            rim_mm: 0.0,
            ..small_cfg()
        };
        let out = generate_phantom(5, &cfg).unwrap();
        assert!(out.mask.count() > 0);
        let mean = |v: &Volume, label: u8| {
            let (s, n) = v
                .data
                .iter()
                .zip(out.mask.data.iter())
                .filter(|(_, &m)| m == label)
                .fold((0.0f64, 0usize), |(s, n), (&x, _)| (s + x as f64, n + 1));
            s / n as f64
        };
        assert!(mean(&out.volume, 1) > mean(&out.volume, 0));
        assert!(mean(&out.twin, 1) < mean(&out.twin, 0));
        assert_eq!(out.twin.shape(), out.volume.shape());
    }

    #[test]
    fn objects_are_disjoint_and_counted() {
        let cfg = small_cfg();
        for seed in 0..5 {
            let out = generate_phantom(seed, &cfg).unwrap();
            assert!(!out.objects.is_empty() && out.objects.len() <= cfg.max_objects);
            // Each object's own raster must not overlap any other's.
            let mut owner = Array3::<u8>::zeros((48, 48, 48));
            for (i, obj) in out.objects.iter().enumerate() {
                let mut l = Array3::<u8>::zeros((48, 48, 48));
                let mut dd = Array3::<f32>::zeros((48, 48, 48));
                rasterize(obj, 1, &mut l, &mut dd, &cfg);
                for (o, &x) in owner.iter_mut().zip(l.iter()) {
                    if x == 1 {
                        assert_eq!(*o, 0, "object {i} overlaps another");
                        *o = i as u8 + 1;
                    }
                }
            }
            let union: Vec<u8> = owner.iter().map(|&o| (o > 0) as u8).collect();
            assert_eq!(union, out.mask.data.iter().copied().collect::<Vec<_>>());
        }
    }

    #[test]
    fn crowded_config_places_fewer_objects() {
        let cfg = PhantomConfig {
            shape: [24, 24, 24],
            min_objects: 6,
            max_objects: 6,
            size_range_mm: (6.0, 8.0),
            max_retries: 20,
            ..PhantomConfig::default()
        };
        let out = generate_phantom(3, &cfg).unwrap();
        assert!(out.objects.len() < 6);
    }
}
