//! Static, dynamic and optical flow fields, dynamic masks, and bilinear
//! warping.
//!
//! The optical flow of a pixel splits into the part explained by camera motion
//! over a rigid scene (static flow) and the residual caused by independently
//! moving objects (dynamic flow): `F_o = F_s + F_d`.
//!
//! Flow components are stored on a dyadic grid of [`FLOW_QUANTUM`] pixels with
//! magnitude below [`FLOW_LIMIT`]. On that grid every sum and difference of
//! two flows is exact in `f64`, so the decomposition identities hold
//! bit-for-bit rather than up to rounding.

use nalgebra::Vector2;

use crate::camera::{reproject, CorrespondenceField, Intrinsics, InverseDepthMap, PixelGrid};
use crate::error::{Error, Result};
use crate::graph::{FrameGraph, FrameId};
use crate::grid::{Grid, Image};
use crate::se3::PoseSE3;

/// Flow resolution in pixels (2⁻³²).
pub const FLOW_QUANTUM: f64 = 1.0 / 4_294_967_296.0;

/// Flow components at or beyond this magnitude (2²⁰ pixels) are invalid.
pub const FLOW_LIMIT: f64 = 1_048_576.0;

/// Default artificial-mask threshold in pixels.
pub const DEFAULT_MU: f64 = 0.5;

/// Rounds to the nearest multiple of [`FLOW_QUANTUM`]; `None` if not
/// representable.
#[inline]
pub fn quantize(x: f64) -> Option<f64> {
    if x.is_finite() && x.abs() < FLOW_LIMIT {
        Some((x / FLOW_QUANTUM).round() * FLOW_QUANTUM)
    } else {
        None
    }
}

/// A per-pixel displacement field with validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    du: Grid<f64>,
    dv: Grid<f64>,
    valid: Grid<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            du: Grid::filled(width, height, 0.0),
            dv: Grid::filled(width, height, 0.0),
            valid: Grid::filled(width, height, true),
        }
    }

    /// Builds a field from per-pixel `Some((du, dv))` / `None`, quantizing
    /// every component.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> Option<(f64, f64)>,
    ) -> Self {
        let mut du = Vec::with_capacity(width * height);
        let mut dv = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                let q = f(u, v).and_then(|(a, b)| Some((quantize(a)?, quantize(b)?)));
                match q {
                    Some((a, b)) => {
                        du.push(a);
                        dv.push(b);
                        valid.push(true);
                    }
                    None => {
                        du.push(0.0);
                        dv.push(0.0);
                        valid.push(false);
                    }
                }
            }
        }
        FlowField {
            du: Grid::from_vec(width, height, du).expect("sized"),
            dv: Grid::from_vec(width, height, dv).expect("sized"),
            valid: Grid::from_vec(width, height, valid).expect("sized"),
        }
    }

    /// Displacements `coords − p` of a correspondence field.
    pub fn from_correspondence(corr: &CorrespondenceField) -> Self {
        let (w, h) = corr.shape();
        FlowField::from_fn(w, h, |u, v| {
            if corr.valid[(u, v)] {
                let c = corr.coords[(u, v)];
                Some((c.x - u as f64, c.y - v as f64))
            } else {
                None
            }
        })
    }

    /// Target coordinates `p + flow`. Exact, since flows are quantized.
    pub fn to_correspondence(&self) -> CorrespondenceField {
        let (w, h) = self.shape();
        CorrespondenceField {
            coords: Grid::from_fn(w, h, |u, v| {
                Vector2::new(u as f64 + self.du[(u, v)], v as f64 + self.dv[(u, v)])
            }),
            valid: self.valid.clone(),
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.du.shape()
    }

    #[inline]
    pub fn du(&self) -> &Grid<f64> {
        &self.du
    }

    #[inline]
    pub fn dv(&self) -> &Grid<f64> {
        &self.dv
    }

    #[inline]
    pub fn valid(&self) -> &Grid<bool> {
        &self.valid
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> Vector2<f64> {
        Vector2::new(self.du[(u, v)], self.dv[(u, v)])
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[(u, v)]
    }

    pub fn norm_at(&self, u: usize, v: usize) -> f64 {
        self.at(u, v).norm()
    }

    /// Sets pixels where `keep` is false to zero flow, leaving validity alone.
    pub fn masked(&self, keep: impl Fn(usize, usize) -> bool) -> FlowField {
        let (w, h) = self.shape();
        let mut out = self.clone();
        for v in 0..h {
            for u in 0..w {
                if !keep(u, v) {
                    out.du[(u, v)] = 0.0;
                    out.dv[(u, v)] = 0.0;
                }
            }
        }
        out
    }

    /// Restricts validity to `self.valid ∧ mask`.
    pub fn with_validity(mut self, mask: &Grid<bool>) -> FlowField {
        for (a, b) in self.valid.as_mut_slice().iter_mut().zip(mask.iter()) {
            *a = *a && *b;
        }
        self
    }

    /// Mean flow magnitude over valid pixels, `None` if none are valid.
    pub fn mean_magnitude(&self) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        let (w, h) = self.shape();
        for v in 0..h {
            for u in 0..w {
                if self.valid[(u, v)] {
                    sum += self.norm_at(u, v);
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    fn zip_with(&self, other: &FlowField, op: impl Fn(f64, f64) -> f64) -> Result<FlowField> {
        other.du.ensure_shape(self.shape())?;
        let (w, h) = self.shape();
        Ok(FlowField::from_fn(w, h, |u, v| {
            if self.valid[(u, v)] && other.valid[(u, v)] {
                Some((
                    op(self.du[(u, v)], other.du[(u, v)]),
                    op(self.dv[(u, v)], other.dv[(u, v)]),
                ))
            } else {
                None
            }
        }))
    }
}

/// `F_o = F_s + F_d`; valid where both inputs are.
pub fn compose_flow(f_s: &FlowField, f_d: &FlowField) -> Result<FlowField> {
    f_s.zip_with(f_d, |a, b| a + b)
}

/// `F_d = F_o − F_s`.
pub fn dynamic_residual(f_o: &FlowField, f_s: &FlowField) -> Result<FlowField> {
    f_o.zip_with(f_s, |a, b| a - b)
}

/// Flow induced by camera motion alone for a known relative pose.
pub fn static_flow_relative(
    intr: &Intrinsics,
    g_ij: &PoseSE3,
    d_i: &InverseDepthMap,
    grid: &PixelGrid,
) -> Result<FlowField> {
    let corr = reproject(intr, g_ij, d_i, grid)?;
    Ok(FlowField::from_correspondence(&corr))
}

/// Static flow `reproject(g_j ∘ g_i⁻¹, d_i) − p` from world-to-camera poses.
pub fn static_flow(
    intr: &Intrinsics,
    g_i: &PoseSE3,
    g_j: &PoseSE3,
    d_i: &InverseDepthMap,
    grid: &PixelGrid,
) -> Result<FlowField> {
    static_flow_relative(intr, &PoseSE3::relative(g_i, g_j), d_i, grid)
}

/// Per-pixel mask in `[0, 1]`; 1 marks static pixels, 0 dynamic ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicMask {
    values: Grid<f64>,
}

impl DynamicMask {
    /// All pixels static.
    pub fn all_static(width: usize, height: usize) -> Self {
        DynamicMask {
            values: Grid::filled(width, height, 1.0),
        }
    }

    pub fn all_dynamic(width: usize, height: usize) -> Self {
        DynamicMask {
            values: Grid::filled(width, height, 0.0),
        }
    }

    /// Clamps every value into `[0, 1]`.
    pub fn from_values(values: Grid<f64>) -> Self {
        DynamicMask {
            values: values.map(|x| clamp_unit(*x)),
        }
    }

    pub fn from_static_flags(flags: &Grid<bool>) -> Self {
        DynamicMask {
            values: flags.map(|&s| if s { 1.0 } else { 0.0 }),
        }
    }

    #[inline]
    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[(u, v)]
    }

    /// True where the pixel counts as static after thresholding at 0.5.
    pub fn binarize(&self) -> Grid<bool> {
        self.values.map(|&x| x >= 0.5)
    }

    pub fn is_static(&self, u: usize, v: usize) -> bool {
        self.values[(u, v)] >= 0.5
    }

    /// Additive update `M ← clamp(M + ΔM, 0, 1)`.
    pub fn apply_increment(&mut self, delta: &Grid<f64>) -> Result<()> {
        delta.ensure_shape(self.shape())?;
        for (m, d) in self.values.as_mut_slice().iter_mut().zip(delta.iter()) {
            *m = clamp_unit(*m + d);
        }
        Ok(())
    }

    /// Number of pixels counted as dynamic.
    pub fn dynamic_count(&self) -> usize {
        self.values.iter().filter(|&&x| x < 0.5).count()
    }
}

fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        1.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Self-supervised mask label: a pixel is static when the camera-predicted
/// and flow-predicted targets agree within `mu` pixels.
///
/// Pixels without a valid reprojection or flow carry no evidence and are
/// labeled static. The camera target is formed from the quantized static flow,
/// so with ground-truth inputs `p_cam − p_flow` is exactly `−F_d`.
pub fn artificial_mask(
    intr: &Intrinsics,
    g_ij: &PoseSE3,
    d_i: &InverseDepthMap,
    f_o: &FlowField,
    grid: &PixelGrid,
    mu: f64,
) -> Result<DynamicMask> {
    if !(mu > 0.0) {
        return Err(Error::InvalidConfig(format!("mu must be positive, got {mu}")));
    }
    let f_s = static_flow_relative(intr, g_ij, d_i, grid)?;
    let dist = target_disagreement(&f_s, f_o)?;
    Ok(threshold_disagreement(&dist, mu))
}

/// `‖p_cam − p_flow‖₂` per pixel, `None` where either flow is invalid.
pub fn target_disagreement(f_s: &FlowField, f_o: &FlowField) -> Result<Grid<Option<f64>>> {
    f_o.du.ensure_shape(f_s.shape())?;
    let (w, h) = f_s.shape();
    Ok(Grid::from_fn(w, h, |u, v| {
        if f_s.valid[(u, v)] && f_o.valid[(u, v)] {
            let p = Vector2::new(u as f64, v as f64);
            let p_cam = p + f_s.at(u, v);
            let p_flow = p + f_o.at(u, v);
            Some((p_cam - p_flow).norm())
        } else {
            None
        }
    }))
}

/// `[dist ≤ mu]`, with missing distances counted as static.
pub fn threshold_disagreement(dist: &Grid<Option<f64>>, mu: f64) -> DynamicMask {
    DynamicMask {
        values: dist.map(|d| match d {
            Some(x) if *x > mu => 0.0,
            _ => 1.0,
        }),
    }
}

/// Binary per-frame mask; `true` marks static pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedMask {
    pub values: Grid<bool>,
}

impl AggregatedMask {
    pub fn static_count(&self) -> usize {
        self.values.iter().filter(|&&s| s).count()
    }
}

/// Aggregates the masks of every edge leaving `frame_id` (those masks live on
/// the frame's own pixel grid) by pixelwise minimum after binarization: a
/// pixel stays static only if no edge flags it dynamic.
pub fn mask_agg(graph: &FrameGraph, frame_id: FrameId) -> Result<AggregatedMask> {
    graph.frame(frame_id)?;
    let mut out: Option<Grid<bool>> = None;
    for edge in graph.outgoing(frame_id) {
        let b = edge.mask.binarize();
        out = Some(match out {
            None => b,
            Some(mut acc) => {
                b.ensure_shape(acc.shape())?;
                for (a, s) in acc.as_mut_slice().iter_mut().zip(b.iter()) {
                    *a = *a && *s;
                }
                acc
            }
        });
    }
    out.map(|values| AggregatedMask { values })
        .ok_or(Error::NoIncidentEdges(frame_id))
}

/// Bilinear sample with pixel-center convention. Taps with zero weight are
/// never touched, so integer coordinates on the last row/column are exact.
pub fn sample_bilinear(img: &Image, x: f64, y: f64) -> Option<f64> {
    if !(x.is_finite() && y.is_finite()) {
        return None;
    }
    let (w, h) = img.shape();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    if x0 < 0.0 || y0 < 0.0 {
        return None;
    }
    let (xi, yi) = (x0 as usize, y0 as usize);
    let need_x1 = fx > 0.0;
    let need_y1 = fy > 0.0;
    if xi >= w || yi >= h || (need_x1 && xi + 1 >= w) || (need_y1 && yi + 1 >= h) {
        return None;
    }
    let top = if need_x1 {
        (1.0 - fx) * img[(xi, yi)] + fx * img[(xi + 1, yi)]
    } else {
        img[(xi, yi)]
    };
    if !need_y1 {
        return Some(top);
    }
    let bottom = if need_x1 {
        (1.0 - fx) * img[(xi, yi + 1)] + fx * img[(xi + 1, yi + 1)]
    } else {
        img[(xi, yi + 1)]
    };
    Some((1.0 - fy) * top + fy * bottom)
}

/// Samples `img_j` at the correspondence coordinates. Pixels whose taps leave
/// the image, or whose correspondence is invalid, are flagged invalid and set
/// to zero.
pub fn warp_image(img_j: &Image, corr: &CorrespondenceField) -> (Image, Grid<bool>) {
    let (w, h) = corr.shape();
    let mut out = Grid::filled(w, h, 0.0);
    let mut valid = Grid::filled(w, h, false);
    for v in 0..h {
        for u in 0..w {
            if !corr.valid[(u, v)] {
                continue;
            }
            let c = corr.coords[(u, v)];
            if let Some(x) = sample_bilinear(img_j, c.x, c.y) {
                out[(u, v)] = x;
                valid[(u, v)] = true;
            }
        }
    }
    (out, valid)
}
