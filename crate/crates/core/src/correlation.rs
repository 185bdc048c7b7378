//! All-pairs correlation volumes, their pooled pyramid, windowed lookup, and a
//! classical correspondence refiner.
//!
//! Features are hand-crafted: each pixel gets the zero-mean, unit-norm vector
//! of intensities in a small patch around it. The volume, pyramid and lookup
//! follow the usual all-pairs construction: level 0 holds dot products between
//! every pixel of frame `i` and every pixel of frame `j`, and each further
//! level averages 2×2 blocks over the frame-`j` dimensions.
//!
//! Level 0 needs `(H·W)²` values; keep inputs around 48×64 or smaller.

use nalgebra::Vector2;

use crate::camera::CorrespondenceField;
use crate::error::{Error, Result};
use crate::grid::{Grid, Image};

pub const PYRAMID_LEVELS: usize = 4;
pub const DEFAULT_FEATURE_DIM: usize = 25;
pub const DEFAULT_RADIUS: usize = 3;

/// Confidence logit assigned to pixels whose window carries no signal.
pub const FLAT_LOGIT: f64 = -20.0;

/// Dense `H × W × D` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn from_vec(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != width * height * dim {
            return Err(Error::ShapeMismatch {
                expected: (width * height * dim.max(1), 1),
                actual: (data.len(), 1),
            });
        }
        Ok(FeatureMap {
            width,
            height,
            dim,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn feature(&self, u: usize, v: usize) -> &[f64] {
        let k = (v * self.width + u) * self.dim;
        &self.data[k..k + self.dim]
    }
}

/// Patch offsets for a `dim`-long descriptor: the first `dim` cells of a
/// square patch of side `ceil(sqrt(dim))`, scanned row-major.
fn patch_offsets(dim: usize) -> Vec<(isize, isize)> {
    let side = (dim as f64).sqrt().ceil() as isize;
    let lo = -side / 2;
    let mut out = Vec::with_capacity(dim);
    'outer: for dy in 0..side {
        for dx in 0..side {
            if out.len() == dim {
                break 'outer;
            }
            out.push((lo + dx, lo + dy));
        }
    }
    out
}

/// Zero-mean, unit-norm intensity patches; border pixels replicate the edge.
/// Flat patches map to the zero vector.
pub fn extract_features(img: &Image, dim: usize) -> Result<FeatureMap> {
    if dim == 0 {
        return Err(Error::InvalidConfig("feature dimension must be positive".into()));
    }
    let (w, h) = img.shape();
    let offsets = patch_offsets(dim);
    let mut data = Vec::with_capacity(w * h * dim);
    let mut patch = vec![0.0; dim];
    for v in 0..h {
        for u in 0..w {
            for (slot, &(dx, dy)) in patch.iter_mut().zip(&offsets) {
                let x = (u as isize + dx).clamp(0, w as isize - 1) as usize;
                let y = (v as isize + dy).clamp(0, h as isize - 1) as usize;
                *slot = img[(x, y)];
            }
            let mean = patch.iter().sum::<f64>() / dim as f64;
            patch.iter_mut().for_each(|x| *x -= mean);
            let norm = patch.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                data.extend(patch.iter().map(|x| x / norm));
            } else {
                data.extend(std::iter::repeat_n(0.0, dim));
            }
        }
    }
    FeatureMap::from_vec(w, h, dim, data)
}

/// One pyramid level: for every source pixel a `h2 × w2` correlation map.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationLevel {
    src_width: usize,
    src_height: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl CorrelationLevel {
    /// Dimensions `(w2, h2)` of the target axes.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn slice(&self, ui: usize, vi: usize) -> &[f64] {
        let n = self.width * self.height;
        let k = (vi * self.src_width + ui) * n;
        &self.data[k..k + n]
    }

    #[inline]
    pub fn at(&self, ui: usize, vi: usize, uj: usize, vj: usize) -> f64 {
        self.slice(ui, vi)[vj * self.width + uj]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    fn pooled(&self) -> CorrelationLevel {
        let (w2, h2) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(self.src_width * self.src_height * w2 * h2);
        for vi in 0..self.src_height {
            for ui in 0..self.src_width {
                let s = self.slice(ui, vi);
                for y in 0..h2 {
                    for x in 0..w2 {
                        let a = s[2 * y * self.width + 2 * x];
                        let b = s[2 * y * self.width + 2 * x + 1];
                        let c = s[(2 * y + 1) * self.width + 2 * x];
                        let d = s[(2 * y + 1) * self.width + 2 * x + 1];
                        data.push(0.25 * (a + b + c + d));
                    }
                }
            }
        }
        CorrelationLevel {
            src_width: self.src_width,
            src_height: self.src_height,
            width: w2,
            height: h2,
            data,
        }
    }

    /// Bilinear read of the target map of pixel `(ui, vi)`; taps outside the
    /// map read as zero.
    fn sample(&self, ui: usize, vi: usize, x: f64, y: f64) -> f64 {
        let s = self.slice(ui, vi);
        let x0 = x.floor();
        let y0 = y.floor();
        let (fx, fy) = (x - x0, y - y0);
        let tap = |xx: f64, yy: f64| -> f64 {
            if xx < 0.0 || yy < 0.0 || xx >= self.width as f64 || yy >= self.height as f64 {
                0.0
            } else {
                s[yy as usize * self.width + xx as usize]
            }
        };
        (1.0 - fy) * ((1.0 - fx) * tap(x0, y0) + fx * tap(x0 + 1.0, y0))
            + fy * ((1.0 - fx) * tap(x0, y0 + 1.0) + fx * tap(x0 + 1.0, y0 + 1.0))
    }
}

/// Four-level correlation pyramid (pooling factors 1, 2, 4, 8).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPyramid {
    pub levels: Vec<CorrelationLevel>,
}

impl CorrelationPyramid {
    pub fn source_shape(&self) -> (usize, usize) {
        (self.levels[0].src_width, self.levels[0].src_height)
    }
}

/// Builds the all-pairs volume and its pyramid.
pub fn build_volume(f_i: &FeatureMap, f_j: &FeatureMap) -> Result<CorrelationPyramid> {
    if f_i.shape() != f_j.shape() || f_i.dim != f_j.dim {
        return Err(Error::ShapeMismatch {
            expected: f_i.shape(),
            actual: f_j.shape(),
        });
    }
    let (w, h) = f_i.shape();
    let n = w * h;
    let dim = f_i.dim;
    let mut data = vec![0.0; n * n];
    for (a, row) in data.chunks_exact_mut(n).enumerate() {
        let fa = &f_i.data[a * dim..(a + 1) * dim];
        for (b, out) in row.iter_mut().enumerate() {
            let fb = &f_j.data[b * dim..(b + 1) * dim];
            *out = fa.iter().zip(fb).map(|(x, y)| x * y).sum();
        }
    }
    let mut levels = vec![CorrelationLevel {
        src_width: w,
        src_height: h,
        width: w,
        height: h,
        data,
    }];
    for _ in 1..PYRAMID_LEVELS {
        let next = levels.last().expect("non-empty").pooled();
        levels.push(next);
    }
    Ok(CorrelationPyramid { levels })
}

/// Per-pixel lookup vectors, `levels · (2r+1)²` values each.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupFeatures {
    pub width: usize,
    pub height: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl LookupFeatures {
    pub fn at(&self, u: usize, v: usize) -> &[f64] {
        let k = (v * self.width + u) * self.len;
        &self.data[k..k + self.len]
    }
}

/// Samples a `(2r+1)²` window around `coords / 2^k` at every level and
/// concatenates the results, level-major then row-major within a window.
pub fn lookup(pyr: &CorrelationPyramid, coords: &CorrespondenceField, r: usize) -> Result<LookupFeatures> {
    if r == 0 {
        return Err(Error::InvalidConfig("lookup radius must be at least 1".into()));
    }
    let (w, h) = pyr.source_shape();
    coords.coords.ensure_shape((w, h))?;
    let side = 2 * r + 1;
    let len = pyr.levels.len() * side * side;
    let ri = r as isize;
    let mut data = Vec::with_capacity(w * h * len);
    for v in 0..h {
        for u in 0..w {
            let c = coords.coords[(u, v)];
            for (k, level) in pyr.levels.iter().enumerate() {
                let scale = (1u32 << k) as f64;
                let (cx, cy) = (c.x / scale, c.y / scale);
                for dy in -ri..=ri {
                    for dx in -ri..=ri {
                        data.push(level.sample(u, v, cx + dx as f64, cy + dy as f64));
                    }
                }
            }
        }
    }
    Ok(LookupFeatures {
        width: w,
        height: h,
        len,
        data,
    })
}

/// Searches level 0 within a `(2r+1)²` window around each initial target,
/// refines the peak with a quadratic fit, and reports `peak − window mean` as
/// the confidence logit.
///
/// Flat windows keep the initial coordinates with logit [`FLAT_LOGIT`]. No
/// pixel moves more than `r` along either axis.
pub fn refine_targets(
    pyr: &CorrelationPyramid,
    init: &CorrespondenceField,
    r: usize,
) -> Result<(CorrespondenceField, Grid<f64>)> {
    if r == 0 {
        return Err(Error::InvalidConfig("search radius must be at least 1".into()));
    }
    let (w, h) = pyr.source_shape();
    init.coords.ensure_shape((w, h))?;
    let level = &pyr.levels[0];
    let (tw, th) = level.target_shape();
    let ri = r as isize;
    let rf = r as f64;
    let mut out = init.clone();
    let mut logits = Grid::filled(w, h, FLAT_LOGIT);

    for v in 0..h {
        for u in 0..w {
            if !init.valid[(u, v)] {
                continue;
            }
            let c0 = init.coords[(u, v)];
            if !(c0.x.is_finite() && c0.y.is_finite()) {
                continue;
            }
            let slice = level.slice(u, v);
            let read = |x: isize, y: isize| -> Option<f64> {
                (x >= 0 && y >= 0 && (x as usize) < tw && (y as usize) < th)
                    .then(|| slice[y as usize * tw + x as usize])
            };
            let (cx, cy) = (c0.x.round() as isize, c0.y.round() as isize);
            let mut best: Option<(isize, isize, f64)> = None;
            let (mut lo, mut hi, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if let Some(val) = read(cx + dx, cy + dy) {
                        lo = lo.min(val);
                        hi = hi.max(val);
                        sum += val;
                        n += 1;
                        if best.is_none_or(|b| val > b.2) {
                            best = Some((cx + dx, cy + dy, val));
                        }
                    }
                }
            }
            let Some((bx, by, peak)) = best else {
                out.valid[(u, v)] = false;
                continue;
            };
            if hi - lo < 1e-12 {
                continue;
            }
            logits[(u, v)] = peak - sum / n as f64;
            let offset = quadratic_peak(&read, bx, by).unwrap_or_else(Vector2::zeros);
            let target = Vector2::new(bx as f64 + offset.x, by as f64 + offset.y);
            let target = Vector2::new(
                target.x.clamp(c0.x - rf, c0.x + rf),
                target.y.clamp(c0.y - rf, c0.y + rf),
            );
            out.coords[(u, v)] = target;
            out.valid[(u, v)] = target.x >= 0.0
                && target.y >= 0.0
                && target.x <= (tw - 1) as f64
                && target.y <= (th - 1) as f64;
        }
    }
    Ok((out, logits))
}

/// Sub-pixel offset of the maximum from separate parabola fits along x and y.
/// Since the center is the window maximum, each component lies in
/// `[-0.5, 0.5]`; an axis with a missing neighbor or no curvature stays at 0.
fn quadratic_peak(read: &impl Fn(isize, isize) -> Option<f64>, x: isize, y: isize) -> Option<Vector2<f64>> {
    let c = read(x, y)?;
    let axis = |m: Option<f64>, p: Option<f64>| match (m, p) {
        (Some(m), Some(p)) if m - 2.0 * c + p < 0.0 => (0.5 * (m - p) / (m - 2.0 * c + p)).clamp(-0.5, 0.5),
        _ => 0.0,
    };
    Some(Vector2::new(
        axis(read(x - 1, y), read(x + 1, y)),
        axis(read(x, y - 1), read(x, y + 1)),
    ))
}
