//! Pinhole camera model and dense reprojection between frames.
//!
//! Integer pixel coordinates are pixel centers; a coordinate is in bounds when
//! `0 ≤ u ≤ width − 1` and `0 ≤ v ≤ height − 1`. Structure is parameterized by
//! inverse depth. Reprojection works on the homogeneous point
//! `(x̄, d)` with `x̄ = ((u − cx)/fx, (v − cy)/fy, 1)`, so it stays finite as
//! `d → 0` (points at infinity).

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::se3::{hat, PoseSE3};

/// Points closer than this (scene units) to the camera plane do not project.
pub const Z_MIN: f64 = 1e-4;

/// Per-pixel inverse depth of one keyframe.
pub type InverseDepthMap = Grid<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid intrinsics {self:?}")))
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn in_bounds(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width - 1) as f64
            && p.y <= (self.height - 1) as f64
    }

    /// Normalized bearing `((u − cx)/fx, (v − cy)/fy, 1)`.
    #[inline]
    pub fn bearing(&self, p: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    /// Back-projects a pixel at inverse depth `d`.
    pub fn unproject(&self, p: &Vector2<f64>, d: f64) -> Result<Vector3<f64>> {
        if !(d > 0.0) {
            return Err(Error::NonPositiveInverseDepth(d));
        }
        Ok(self.bearing(p) / d)
    }

    /// Projects a camera-frame point; the flag is false behind `Z_MIN` or out
    /// of bounds.
    pub fn project(&self, x: &Vector3<f64>) -> (Vector2<f64>, bool) {
        let p = self.project_raw(x);
        let valid = x.z > Z_MIN && self.in_bounds(&p);
        (p, valid)
    }

    #[inline]
    fn project_raw(&self, x: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy)
    }

    /// Derivative of the projection with respect to the (possibly
    /// homogeneously scaled) point.
    #[inline]
    fn projection_jacobian(&self, x: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / x.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * x.y * iz2,
        )
    }
}

/// The canonical pixel grid `coords[v][u] = (u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pub coords: Grid<Vector2<f64>>,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize) -> Self {
        PixelGrid {
            coords: Grid::from_fn(width, height, |u, v| Vector2::new(u as f64, v as f64)),
        }
    }

    pub fn for_intrinsics(intr: &Intrinsics) -> Self {
        Self::new(intr.width, intr.height)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.coords.shape()
    }
}

/// Dense correspondences into a target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceField {
    pub coords: Grid<Vector2<f64>>,
    pub valid: Grid<bool>,
}

impl CorrespondenceField {
    /// Identity correspondences, all valid.
    pub fn identity(width: usize, height: usize) -> Self {
        CorrespondenceField {
            coords: PixelGrid::new(width, height).coords,
            valid: Grid::filled(width, height, true),
        }
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        CorrespondenceField {
            coords: PixelGrid::new(width, height).coords,
            valid: Grid::filled(width, height, false),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.coords.shape()
    }
}

/// Rotation and translation of `g_ij` unpacked once for per-pixel work.
#[derive(Debug, Clone, Copy)]
struct RigidParts {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl RigidParts {
    fn of(g: &PoseSE3) -> Self {
        RigidParts {
            r: g.rotation_matrix(),
            t: *g.translation(),
        }
    }

    /// Homogeneous transformed point `R·x̄ + t·d` (a positive multiple of the
    /// Euclidean point).
    #[inline]
    fn transform(&self, bearing: &Vector3<f64>, d: f64) -> Vector3<f64> {
        self.r * bearing + self.t * d
    }
}

/// Result of reprojecting one pixel.
#[derive(Debug, Clone, Copy)]
pub struct PixelReprojection {
    pub coords: Vector2<f64>,
    /// True when the point lands at depth `> Z_MIN` in the target camera.
    pub in_front: bool,
    /// `in_front` and inside the target image.
    pub valid: bool,
}

fn reproject_pixel(intr: &Intrinsics, rp: &RigidParts, p: &Vector2<f64>, d: f64) -> (PixelReprojection, Vector3<f64>) {
    let xh = rp.transform(&intr.bearing(p), d);
    // Euclidean depth is xh.z / d; for d > 0 this is Z > Z_MIN ⇔ xh.z > Z_MIN·d.
    let in_front = d > 0.0 && xh.z > Z_MIN * d;
    let coords = intr.project_raw(&xh);
    let valid = in_front && intr.in_bounds(&coords);
    (
        PixelReprojection {
            coords,
            in_front,
            valid,
        },
        xh,
    )
}

fn check_shapes(intr: &Intrinsics, d_i: &InverseDepthMap, grid: &PixelGrid) -> Result<()> {
    d_i.ensure_shape(grid.shape())?;
    if intr.shape() != grid.shape() {
        return Err(Error::ShapeMismatch {
            expected: intr.shape(),
            actual: grid.shape(),
        });
    }
    Ok(())
}

/// Dense correspondences `p_ij = π(g_ij ∘ π⁻¹(p_i, d_i))`.
pub fn reproject(
    intr: &Intrinsics,
    g_ij: &PoseSE3,
    d_i: &InverseDepthMap,
    grid: &PixelGrid,
) -> Result<CorrespondenceField> {
    check_shapes(intr, d_i, grid)?;
    let rp = RigidParts::of(g_ij);
    let (w, h) = grid.shape();
    let mut coords = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for (p, &d) in grid.coords.iter().zip(d_i.iter()) {
        let (px, _) = reproject_pixel(intr, &rp, p, d);
        coords.push(px.coords);
        valid.push(px.valid);
    }
    Ok(CorrespondenceField {
        coords: Grid::from_vec(w, h, coords)?,
        valid: Grid::from_vec(w, h, valid)?,
    })
}

/// Like [`reproject`], but valid wherever the point lands in front of the
/// target camera, inside the image or not.
pub fn reproject_unbounded(
    intr: &Intrinsics,
    g_ij: &PoseSE3,
    d_i: &InverseDepthMap,
    grid: &PixelGrid,
) -> Result<CorrespondenceField> {
    check_shapes(intr, d_i, grid)?;
    let rp = RigidParts::of(g_ij);
    let (w, h) = grid.shape();
    let (coords, valid): (Vec<_>, Vec<_>) = grid
        .coords
        .iter()
        .zip(d_i.iter())
        .map(|(p, &d)| {
            let (px, _) = reproject_pixel(intr, &rp, p, d);
            (px.coords, px.in_front)
        })
        .unzip();
    Ok(CorrespondenceField {
        coords: Grid::from_vec(w, h, coords)?,
        valid: Grid::from_vec(w, h, valid)?,
    })
}

/// Per-pixel reprojection together with its derivatives.
#[derive(Debug, Clone)]
pub struct ReprojectionJacobians {
    pub field: CorrespondenceField,
    pub in_front: Grid<bool>,
    /// `∂p_ij / ∂ξ` for a left perturbation `exp(ξ) ∘ g_ij`, `(omega, v)` order.
    pub pose: Grid<Matrix2x6<f64>>,
    /// `∂p_ij / ∂d_i`.
    pub depth: Grid<Vector2<f64>>,
}

/// Analytic Jacobians of [`reproject`].
pub fn reproject_jacobians(
    intr: &Intrinsics,
    g_ij: &PoseSE3,
    d_i: &InverseDepthMap,
    grid: &PixelGrid,
) -> Result<ReprojectionJacobians> {
    check_shapes(intr, d_i, grid)?;
    let rp = RigidParts::of(g_ij);
    let (w, h) = grid.shape();
    let n = w * h;
    let mut coords = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut in_front = Vec::with_capacity(n);
    let mut j_pose = Vec::with_capacity(n);
    let mut j_depth = Vec::with_capacity(n);
    for (p, &d) in grid.coords.iter().zip(d_i.iter()) {
        let (px, xh) = reproject_pixel(intr, &rp, p, d);
        let (jp, jd) = if px.in_front {
            pixel_jacobians(intr, &rp, &xh, d)
        } else {
            (Matrix2x6::zeros(), Vector2::zeros())
        };
        coords.push(px.coords);
        valid.push(px.valid);
        in_front.push(px.in_front);
        j_pose.push(jp);
        j_depth.push(jd);
    }
    Ok(ReprojectionJacobians {
        field: CorrespondenceField {
            coords: Grid::from_vec(w, h, coords)?,
            valid: Grid::from_vec(w, h, valid)?,
        },
        in_front: Grid::from_vec(w, h, in_front)?,
        pose: Grid::from_vec(w, h, j_pose)?,
        depth: Grid::from_vec(w, h, j_depth)?,
    })
}

#[inline]
fn pixel_jacobians(
    intr: &Intrinsics,
    rp: &RigidParts,
    xh: &Vector3<f64>,
    d: f64,
) -> (Matrix2x6<f64>, Vector2<f64>) {
    let jp = intr.projection_jacobian(xh);
    // δxh = ω × xh + v·d
    let mut dx = nalgebra::Matrix3x6::zeros();
    dx.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(xh)));
    dx.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * d));
    (jp * dx, jp * rp.t)
}
