//! Connected components, training-time prompt sampling and the hybrid
//! automatic/prompted schedule.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point or box prompt in slice-pixel coordinates (`x` = column, `y` = row).
///
/// Serialises as `{"points":[[x,y],...]}`, `{"box":[x0,y0,x1,y1]}` or
/// `{"boxes":[[x0,y0,x1,y1],...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prompt {
    Points(Vec<[f64; 2]>),
    Box([f64; 4]),
    Boxes(Vec<[f64; 4]>),
}

impl Prompt {
    pub fn boxes(&self) -> Vec<[f64; 4]> {
        match self {
            Prompt::Points(_) => Vec::new(),
            Prompt::Box(b) => vec![*b],
            Prompt::Boxes(bs) => bs.clone(),
        }
    }

    /// Number of sparse tokens this prompt encodes to.
    pub fn token_count(&self) -> usize {
        match self {
            Prompt::Points(p) => p.len(),
            Prompt::Box(_) => 2,
            Prompt::Boxes(bs) => 2 * bs.len(),
        }
    }

    /// Checks coordinates against a `height × width` slice.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let (h, w) = (height as f64, width as f64);
        match self {
            Prompt::Points(pts) => {
                if pts.is_empty() {
                    return Err(Error::Prompt("empty point list".into()));
                }
                for p in pts {
                    if !(p[0] >= 0.0 && p[0] < w && p[1] >= 0.0 && p[1] < h) {
                        return Err(Error::Prompt(format!(
                            "point {p:?} outside {width}x{height} slice"
                        )));
                    }
                }
            }
            Prompt::Box(_) | Prompt::Boxes(_) => {
                let bs = self.boxes();
                if bs.is_empty() {
                    return Err(Error::Prompt("empty box list".into()));
                }
                for b in bs {
                    if !b.iter().all(|v| v.is_finite()) || b[0] >= b[2] || b[1] >= b[3] {
                        return Err(Error::Prompt(format!("inverted or degenerate box {b:?}")));
                    }
                    if b[0] < 0.0 || b[1] < 0.0 || b[2] > w || b[3] > h {
                        return Err(Error::Prompt(format!(
                            "box {b:?} outside {width}x{height} slice"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Maps prompts from a `(h, w)` slice onto a `(out_h, out_w)` grid.
    /// Points keep their pixel centre (clamped onto the grid); box corners
    /// are pixel edges.
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> Prompt {
        let sy = to.0 as f64 / from.0 as f64;
        let sx = to.1 as f64 / from.1 as f64;
        let (mx, my) = ((to.1 as f64 - 1.0).max(0.0), (to.0 as f64 - 1.0).max(0.0));
        let bx = |b: &[f64; 4]| [b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy];
        match self {
            Prompt::Points(pts) => Prompt::Points(
                pts.iter()
                    .map(|p| {
                        [
                            ((p[0] + 0.5) * sx - 0.5).clamp(0.0, mx),
                            ((p[1] + 0.5) * sy - 0.5).clamp(0.0, my),
                        ]
                    })
                    .collect(),
            ),
            Prompt::Box(b) => Prompt::Box(bx(b)),
            Prompt::Boxes(bs) => Prompt::Boxes(bs.iter().map(bx).collect()),
        }
    }
}

/// One 8-connected foreground region, as `(row, col)` pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn to_mask(&self, shape: (usize, usize)) -> Array2<u8> {
        let mut m = Array2::zeros(shape);
        for &p in &self.pixels {
            m[p] = 1;
        }
        m
    }

    /// `(min_row, min_col, max_row, max_col)`, inclusive.
    pub fn bounds(&self) -> (usize, usize, usize, usize) {
        let mut b = (usize::MAX, usize::MAX, 0, 0);
        for &(r, c) in &self.pixels {
            b.0 = b.0.min(r);
            b.1 = b.1.min(c);
            b.2 = b.2.max(r);
            b.3 = b.3.max(c);
        }
        b
    }
}

/// 8-connected components sorted by size, largest first (ties keep raster
/// order of their first pixel).
pub fn label_components(mask: ArrayView2<u8>) -> Vec<Component> {
    let (h, w) = mask.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 || seen[[r, c]] {
                continue;
            }
            let mut pixels = Vec::new();
            seen[[r, c]] = true;
            queue.push_back((r, c));
            while let Some((y, x)) = queue.pop_front() {
                pixels.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let q = (ny as usize, nx as usize);
                        if mask[q] != 0 && !seen[q] {
                            seen[q] = true;
                            queue.push_back(q);
                        }
                    }
                }
            }
            pixels.sort_unstable();
            out.push(Component { pixels });
        }
    }
    out.sort_by(|a, b| b.len().cmp(&a.len()));
    out
}

pub fn find_components(mask: ArrayView2<u8>) -> Vec<Array2<u8>> {
    label_components(mask)
        .iter()
        .map(|c| c.to_mask(mask.dim()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Probability that a sampled prompt set uses points rather than boxes.
    pub point_probability: f64,
    /// Largest outward box jitter per side, as a fraction of the box extent.
    pub box_jitter: f64,
    /// Probability that a training iteration is prompted.
    pub prompt_probability: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            point_probability: 0.5,
            box_jitter: 0.1,
            prompt_probability: 0.3,
        }
    }
}

/// A sampled prompt with the mask of the regions it selects.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub prompt: Prompt,
    /// Union of the chosen components.
    pub selected: Array2<u8>,
    /// Number of chosen components.
    pub k: usize,
}

pub fn sample_prompts<R: Rng + ?Sized>(
    m_gt: ArrayView2<u8>,
    rng: &mut R,
    cfg: &PromptConfig,
) -> Result<PromptSet> {
    let comps = label_components(m_gt);
    if comps.is_empty() {
        return Err(Error::Prompt("cannot sample prompts from an empty mask".into()));
    }
    let (h, w) = m_gt.dim();
    let n = comps.len();
    let k = rng.gen_range(1..=n);
    let mut chosen: Vec<usize> = index::sample(rng, n, k).into_vec();
    chosen.sort_unstable();
    let mut selected = Array2::<u8>::zeros((h, w));
    for &i in &chosen {
        for &p in &comps[i].pixels {
            selected[p] = 1;
        }
    }
    let prompt = if rng.gen_bool(cfg.point_probability) {
        let m = rng.gen_range(k..=2 * k);
        // One guaranteed point per component, the rest spread at random.
        let mut owners: Vec<usize> = chosen.clone();
        for _ in k..m {
            owners.push(chosen[rng.gen_range(0..k)]);
        }
        owners.shuffle(rng);
        let pts = owners
            .iter()
            .map(|&i| {
                let (r, c) = *comps[i].pixels.choose(rng).unwrap();
                [c as f64, r as f64]
            })
            .collect();
        Prompt::Points(pts)
    } else {
        let boxes = chosen
            .iter()
            .map(|&i| {
                let (r0, c0, r1, c1) = comps[i].bounds();
                let (x0, y0, x1, y1) = (c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64);
                let (ew, eh) = (x1 - x0, y1 - y0);
                let mut j = || rng.gen_range(0.0..=cfg.box_jitter);
                [
                    (x0 - j() * ew).max(0.0),
                    (y0 - j() * eh).max(0.0),
                    (x1 + j() * ew).min(w as f64),
                    (y1 + j() * eh).min(h as f64),
                ]
            })
            .collect::<Vec<_>>();
        if boxes.len() == 1 {
            Prompt::Box(boxes[0])
        } else {
            Prompt::Boxes(boxes)
        }
    };
    Ok(PromptSet {
        prompt,
        selected,
        k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Prompted,
    Automatic,
}

pub fn hybrid_mode<R: Rng + ?Sized>(rng: &mut R, prompt_probability: f64) -> Mode {
    if rng.gen_bool(prompt_probability) {
        Mode::Prompted
    } else {
        Mode::Automatic
    }
}

/// Modes for one epoch of `n` iterations: exactly `round(p·n)` prompted,
/// in shuffled order.
pub fn epoch_schedule<R: Rng + ?Sized>(n: usize, prompt_probability: f64, rng: &mut R) -> Vec<Mode> {
    let prompted = (prompt_probability * n as f64).round() as usize;
    let mut modes: Vec<Mode> = (0..n)
        .map(|i| if i < prompted { Mode::Prompted } else { Mode::Automatic })
        .collect();
    modes.shuffle(rng);
    modes
}

/// One point per component at its centroid, moved to the nearest component
/// pixel when the centroid falls outside the component.
pub fn centroid_prompt(mask: ArrayView2<u8>) -> Option<Prompt> {
    let comps = label_components(mask);
    if comps.is_empty() {
        return None;
    }
    let pts = comps
        .iter()
        .map(|c| {
            let n = c.len() as f64;
            let cy = c.pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
            let cx = c.pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
            let &(r, col) = c
                .pixels
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 as f64 - cy).powi(2) + (a.1 as f64 - cx).powi(2);
                    let db = (b.0 as f64 - cy).powi(2) + (b.1 as f64 - cx).powi(2);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            [col as f64, r as f64]
        })
        .collect();
    Some(Prompt::Points(pts))
}
