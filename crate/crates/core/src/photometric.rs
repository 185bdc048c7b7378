//! Self-supervised losses: photometric consistency under the geometric warp
//! and under the optical flow, and cross-entropy on the dynamic mask.
//!
//! Here they serve as diagnostics and gradient-check subjects; nothing is
//! trained.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::camera::{reproject, CorrespondenceField, Intrinsics, InverseDepthMap, PixelGrid};
use crate::error::{Error, Result};
use crate::flow::{artificial_mask, mask_agg, sample_bilinear, AggregatedMask, DynamicMask, FlowField};
use crate::graph::{FrameGraph, FrameId};
use crate::grid::{Grid, Image};
use crate::se3::PoseSE3;

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gamma: f64,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.85,
            lambda1: 100.0,
            lambda2: 5.0,
            lambda3: 0.05,
            gamma: 0.9,
            ssim_window: 7,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.ssim_window == 0 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::InvalidConfig("SSIM window must be odd and positive".into()));
        }
        Ok(())
    }
}

/// Clipped square window around `(u, v)`.
fn window(u: usize, v: usize, half: usize, w: usize, h: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    (
        u.saturating_sub(half)..(u + half + 1).min(w),
        v.saturating_sub(half)..(v + half + 1).min(h),
    )
}

#[derive(Debug, Clone, Copy)]
struct WindowStats {
    n: f64,
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

fn window_stats(a: &Image, b: &Image, u: usize, v: usize, half: usize) -> WindowStats {
    let (xs, ys) = window(u, v, half, a.width(), a.height());
    let (mut sa, mut sb, mut saa, mut sbb, mut sab, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for y in ys {
        for x in xs.clone() {
            let (p, q) = (a[(x, y)], b[(x, y)]);
            sa += p;
            sb += q;
            saa += p * p;
            sbb += q * q;
            sab += p * q;
            n += 1.0;
        }
    }
    let (mu_a, mu_b) = (sa / n, sb / n);
    WindowStats {
        n,
        mu_a,
        mu_b,
        var_a: saa / n - mu_a * mu_a,
        var_b: sbb / n - mu_b * mu_b,
        cov: sab / n - mu_a * mu_b,
    }
}

/// Windowed SSIM with a uniform window, clipped at the borders.
pub fn ssim(a: &Image, b: &Image, cfg: &LossConfig) -> Result<Grid<f64>> {
    b.ensure_shape(a.shape())?;
    let half = cfg.ssim_window / 2;
    Ok(Grid::from_fn(a.width(), a.height(), |u, v| {
        let s = window_stats(a, b, u, v, half);
        let num = (2.0 * s.mu_a * s.mu_b + cfg.ssim_c1) * (2.0 * s.cov + cfg.ssim_c2);
        let den = (s.mu_a * s.mu_a + s.mu_b * s.mu_b + cfg.ssim_c1) * (s.var_a + s.var_b + cfg.ssim_c2);
        num / den
    }))
}

/// `α/2·(1 − SSIM) + (1 − α)·|a − b|` per pixel.
pub fn pe_geo(a: &Image, b: &Image, cfg: &LossConfig) -> Result<Grid<f64>> {
    let s = ssim(a, b, cfg)?;
    let alpha = cfg.alpha;
    Ok(Grid::from_fn(a.width(), a.height(), |u, v| {
        alpha / 2.0 * (1.0 - s[(u, v)]) + (1.0 - alpha) * (a[(u, v)] - b[(u, v)]).abs()
    }))
}

/// Gradient of `mean(pe_geo(a, b))` with respect to `b`.
pub fn pe_geo_mean_grad(a: &Image, b: &Image, cfg: &LossConfig) -> Result<Grid<f64>> {
    b.ensure_shape(a.shape())?;
    let (w, h) = a.shape();
    let half = cfg.ssim_window / 2;
    let np = (w * h) as f64;
    let alpha = cfg.alpha;
    let mut grad = Grid::from_fn(w, h, |u, v| {
        -(1.0 - alpha) * (a[(u, v)] - b[(u, v)]).signum() / np
    });
    for v in 0..h {
        for u in 0..w {
            let s = window_stats(a, b, u, v, half);
            let a1 = 2.0 * s.mu_a * s.mu_b + cfg.ssim_c1;
            let a2 = 2.0 * s.cov + cfg.ssim_c2;
            let b1 = s.mu_a * s.mu_a + s.mu_b * s.mu_b + cfg.ssim_c1;
            let b2 = s.var_a + s.var_b + cfg.ssim_c2;
            let den = b1 * b2;
            let ratio = a1 * a2 / den;
            let (xs, ys) = window(u, v, half, w, h);
            for y in ys {
                for x in xs.clone() {
                    let dnum = 2.0 * s.mu_a / s.n * a2 + a1 * 2.0 * (a[(x, y)] - s.mu_a) / s.n;
                    let dden = 2.0 * s.mu_b / s.n * b2 + b1 * 2.0 * (b[(x, y)] - s.mu_b) / s.n;
                    let dssim = (dnum - ratio * dden) / den;
                    grad[(x, y)] -= alpha / 2.0 * dssim / np;
                }
            }
        }
    }
    Ok(grad)
}

/// Intensity lookup at sub-pixel positions of a frame.
pub trait FrameSampler {
    fn sample(&self, frame: FrameId, x: f64, y: f64) -> Option<f64>;
}

/// Bilinear interpolation of the graph's stored images.
pub struct BilinearSampler<'a>(pub &'a FrameGraph);

impl FrameSampler for BilinearSampler<'_> {
    fn sample(&self, frame: FrameId, x: f64, y: f64) -> Option<f64> {
        let f = self.0.frame(frame).ok()?;
        sample_bilinear(&f.image, x, y)
    }
}

/// `I_j` sampled at the correspondences; invalid pixels are 0 and flagged.
pub fn warp_frame(sampler: &dyn FrameSampler, j: FrameId, corr: &CorrespondenceField) -> (Image, Grid<bool>) {
    let (w, h) = corr.shape();
    let mut out = Grid::filled(w, h, 0.0);
    let mut valid = Grid::filled(w, h, false);
    for v in 0..h {
        for u in 0..w {
            if !corr.valid[(u, v)] {
                continue;
            }
            let c = corr.coords[(u, v)];
            if let Some(x) = sampler.sample(j, c.x, c.y) {
                out[(u, v)] = x;
                valid[(u, v)] = true;
            }
        }
    }
    (out, valid)
}

/// Aggregated masks for every frame with outgoing edges.
pub fn aggregate_masks(graph: &FrameGraph) -> Result<BTreeMap<FrameId, AggregatedMask>> {
    let mut out = BTreeMap::new();
    for f in graph.frames() {
        if graph.outgoing(f.id).next().is_some() {
            out.insert(f.id, mask_agg(graph, f.id)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoLoss {
    pub value: f64,
    /// Edges with at least one static, validly warped pixel.
    pub edges_used: usize,
    /// Edges skipped because no pixel survived the mask.
    pub empty_edges: usize,
}

/// Geometry photometric loss: per edge, `pe(I_i, I_{j→i})` under the current
/// static reprojection, averaged over the `N'` pixels that are static in
/// frame `i`'s aggregated mask and warp validly. Edges are then averaged;
/// edges with `N' = 0` are left out. Frames absent from `masks` count as all
/// static.
pub fn geo_photo_loss(
    graph: &FrameGraph,
    masks: &BTreeMap<FrameId, AggregatedMask>,
    sampler: &dyn FrameSampler,
    cfg: &LossConfig,
) -> Result<GeoLoss> {
    let intr = graph.intrinsics();
    let grid = PixelGrid::for_intrinsics(intr);
    let (mut total, mut used, mut empty) = (0.0, 0, 0);
    for e in graph.edges() {
        let fi = graph.frame(e.i)?;
        let fj = graph.frame(e.j)?;
        let corr = reproject(intr, &PoseSE3::relative(&fi.pose, &fj.pose), &fi.inv_depth, &grid)?;
        let (mut warped, valid) = warp_frame(sampler, e.j, &corr);
        // Invalid pixels copy the source so they do not disturb SSIM windows.
        for ((x, ok), s) in warped.as_mut_slice().iter_mut().zip(valid.iter()).zip(fi.image.iter()) {
            if !ok {
                *x = *s;
            }
        }
        let pe = pe_geo(&fi.image, &warped, cfg)?;
        let mask = masks.get(&e.i);
        if let Some(m) = mask {
            m.values.ensure_shape(pe.shape())?;
        }
        let (mut sum, mut n) = (0.0, 0usize);
        for (k, (x, ok)) in pe.iter().zip(valid.iter()).enumerate() {
            if *ok && mask.is_none_or(|m| m.values.as_slice()[k]) {
                sum += x;
                n += 1;
            }
        }
        if n == 0 {
            empty += 1;
        } else {
            total += sum / n as f64;
            used += 1;
        }
    }
    Ok(GeoLoss {
        value: if used == 0 { 0.0 } else { total / used as f64 },
        edges_used: used,
        empty_edges: empty,
    })
}

/// Flow photometric loss: mean `|I_i(p) − I_j(p + F_o(p))|` over all valid
/// pixels of all edges, using each edge's stored optical flow.
pub fn flow_photo_loss(graph: &FrameGraph, sampler: &dyn FrameSampler) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for e in graph.edges() {
        let fi = graph.frame(e.i)?;
        let (warped, valid) = warp_frame(sampler, e.j, &e.optical_flow.to_correspondence());
        for ((a, b), ok) in fi.image.iter().zip(warped.iter()).zip(valid.iter()) {
            if *ok {
                sum += (a - b).abs();
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Single-pair flow photometric loss on plain images with bilinear sampling.
pub fn flow_photo_pair(img_i: &Image, img_j: &Image, flow: &FlowField) -> Result<f64> {
    img_j.ensure_shape(img_i.shape())?;
    flow.du().ensure_shape(img_i.shape())?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (u, v, a) in img_i.indexed_iter() {
        if !flow.is_valid(u, v) {
            continue;
        }
        let f = flow.at(u, v);
        if let Some(b) = sample_bilinear(img_j, u as f64 + f.x, v as f64 + f.y) {
            sum += (a - b).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Gradient of the summed (not averaged) pair loss with respect to each
/// flow component, through the bilinear interpolation. Zero where the
/// sample is invalid.
pub fn flow_photo_pair_sum_grad(img_i: &Image, img_j: &Image, flow: &FlowField) -> Result<(Grid<f64>, Grid<f64>)> {
    img_j.ensure_shape(img_i.shape())?;
    let (w, h) = img_i.shape();
    let mut gu = Grid::filled(w, h, 0.0);
    let mut gv = Grid::filled(w, h, 0.0);
    for (u, v, a) in img_i.indexed_iter() {
        if !flow.is_valid(u, v) {
            continue;
        }
        let f = flow.at(u, v);
        let (x, y) = (u as f64 + f.x, v as f64 + f.y);
        let Some(b) = sample_bilinear(img_j, x, y) else { continue };
        let (x0, y0) = (x.floor(), y.floor());
        let (xi, yi) = (x0 as usize, y0 as usize);
        if xi + 1 >= w || yi + 1 >= h {
            continue;
        }
        let (fx, fy) = (x - x0, y - y0);
        let i00 = img_j[(xi, yi)];
        let i10 = img_j[(xi + 1, yi)];
        let i01 = img_j[(xi, yi + 1)];
        let i11 = img_j[(xi + 1, yi + 1)];
        let dbdx = (1.0 - fy) * (i10 - i00) + fy * (i11 - i01);
        let dbdy = (1.0 - fx) * (i01 - i00) + fx * (i11 - i10);
        let s = -(a - b).signum();
        gu[(u, v)] = s * dbdx;
        gv[(u, v)] = s * dbdy;
    }
    Ok((gu, gv))
}

/// Mean binary cross-entropy of `pred` against `label`, with `pred` clamped
/// to `[BCE_CLAMP, 1 − BCE_CLAMP]`.
pub fn mask_ce_loss(pred: &DynamicMask, label: &DynamicMask) -> Result<f64> {
    pred.values().ensure_shape(label.shape())?;
    let n = pred.values().len() as f64;
    let sum: f64 = pred
        .values()
        .iter()
        .zip(label.values().iter())
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / n)
}

/// Gradient of [`mask_ce_loss`] with respect to raw predictions inside the
/// clamp range (zero where the clamp is active).
pub fn mask_ce_grad(pred: &Grid<f64>, label: &Grid<f64>) -> Result<Grid<f64>> {
    pred.ensure_shape(label.shape())?;
    let n = pred.len() as f64;
    Ok(Grid::from_fn(pred.width(), pred.height(), |u, v| {
        let (p, y) = (pred[(u, v)], label[(u, v)]);
        if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
            0.0
        } else {
            (-y / p + (1.0 - y) / (1.0 - p)) / n
        }
    }))
}

/// Raw-valued version of [`mask_ce_loss`] for finite differences.
pub fn mask_ce_raw(pred: &Grid<f64>, label: &Grid<f64>) -> Result<f64> {
    pred.ensure_shape(label.shape())?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(label.iter())
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n)
}

/// Cross-entropy of `pred` against the artificial label.
pub fn artificial_mask_loss(
    pred: &DynamicMask,
    intr: &Intrinsics,
    g_ij: &PoseSE3,
    d_i: &InverseDepthMap,
    f_o: &FlowField,
    mu: f64,
) -> Result<f64> {
    let grid = PixelGrid::for_intrinsics(intr);
    let label = artificial_mask(intr, g_ij, d_i, f_o, &grid, mu)?;
    mask_ce_loss(pred, &label)
}

/// Component losses of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IterationLosses {
    pub geo: f64,
    pub flow: f64,
    pub mask: f64,
}

impl IterationLosses {
    pub fn weighted(&self, cfg: &LossConfig) -> f64 {
        cfg.lambda1 * self.geo + cfg.lambda2 * self.flow + cfg.lambda3 * self.mask
    }
}

/// `Σ_k γ^(K−1−k)·(λ1·geo + λ2·flow + λ3·mask)`; the last iteration has
/// weight 1.
pub fn total_self_sup_loss(losses: &[IterationLosses], cfg: &LossConfig) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::EmptyInput);
    }
    let k = losses.len();
    Ok(losses
        .iter()
        .enumerate()
        .map(|(i, l)| cfg.gamma.powi((k - 1 - i) as i32) * l.weighted(cfg))
        .sum())
}

/// CSV with header `iter,geo,flow,mask,total`; `total` is the weighted sum of
/// that iteration alone.
pub fn loss_csv(losses: &[IterationLosses], cfg: &LossConfig) -> String {
    let mut s = String::from("iter,geo,flow,mask,total\n");
    for (k, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{:.12e},{:.12e},{:.12e},{:.12e}", k, l.geo, l.flow, l.mask, l.weighted(cfg));
    }
    s
}
