//! Trajectories, similarity alignment and absolute trajectory error.
//!
//! Trajectory poses follow the TUM convention: camera-to-world, so the
//! translation is the camera center.

use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::se3::PoseSE3;

/// Maximum timestamp difference for associating two entries, seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;
/// Allowed deviation of a stored quaternion from unit norm.
pub const QUATERNION_NORM_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    entries: Vec<(f64, PoseSE3)>,
}

impl Trajectory {
    /// Timestamps must be finite and strictly increasing.
    pub fn new(entries: Vec<(f64, PoseSE3)>) -> Result<Self> {
        for (k, w) in entries.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(Error::InvalidConfig(format!(
                    "timestamps must increase strictly (entry {})",
                    k + 1
                )));
            }
        }
        if entries.iter().any(|(t, _)| !t.is_finite()) {
            return Err(Error::InvalidConfig("non-finite timestamp".into()));
        }
        Ok(Trajectory { entries })
    }

    /// From world-to-camera poses, as kept by the solver.
    pub fn from_world_to_camera(entries: impl IntoIterator<Item = (f64, PoseSE3)>) -> Result<Self> {
        Trajectory::new(entries.into_iter().map(|(t, g)| (t, g.inverse())).collect())
    }

    pub fn entries(&self) -> &[(f64, PoseSE3)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|(_, p)| *p.translation()).collect()
    }

    /// Applies `x ↦ s·R·x + t` to every camera center and `R` to every
    /// orientation.
    pub fn transformed(&self, sim: &Sim3) -> Trajectory {
        Trajectory {
            entries: self
                .entries
                .iter()
                .map(|(t, p)| {
                    let c = sim.apply(p.translation());
                    (*t, PoseSE3::new(sim.rotation * p.rotation(), c))
                })
                .collect(),
        }
    }

    /// Index of the entry nearest to `t` within [`ASSOCIATION_WINDOW`].
    fn nearest(&self, t: f64) -> Option<usize> {
        let k = self.entries.partition_point(|(s, _)| *s < t);
        [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&i| i < self.entries.len())
            .map(|i| (i, (self.entries[i].0 - t).abs()))
            .filter(|&(_, d)| d <= ASSOCIATION_WINDOW)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }
}

/// `(estimate, ground truth)` camera centers for entries that associate.
pub fn associate(est: &Trajectory, gt: &Trajectory) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    est.entries
        .iter()
        .filter_map(|(t, p)| {
            gt.nearest(*t)
                .map(|k| (*p.translation(), *gt.entries[k].1.translation()))
        })
        .collect()
}

/// `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn identity() -> Self {
        Sim3 {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }
}

/// Least-squares similarity (or rigid transform when `with_scale` is false)
/// mapping estimated camera centers onto ground truth.
///
/// When the estimated centers are (numerically) coincident the scale is
/// undefined and a rigid fit with unit scale is returned instead.
pub fn umeyama_align(est: &Trajectory, gt: &Trajectory, with_scale: bool) -> Result<Sim3> {
    let pairs = associate(est, gt);
    umeyama_points(&pairs, with_scale)
}

pub fn umeyama_points(pairs: &[(Vector3<f64>, Vector3<f64>)], with_scale: bool) -> Result<Sim3> {
    if pairs.len() < 3 {
        return Err(Error::TooFewCorrespondences {
            required: 3,
            actual: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let mu_x = pairs.iter().map(|(x, _)| x).sum::<Vector3<f64>>() / n;
    let mu_y = pairs.iter().map(|(_, y)| y).sum::<Vector3<f64>>() / n;
    let mut sigma = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in pairs {
        let dx = x - mu_x;
        sigma += (y - mu_y) * dx.transpose();
        var_x += dx.norm_squared();
    }
    sigma /= n;
    var_x /= n;

    let svd = sigma.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V");
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let degenerate = var_x <= 1e-24 * (1.0 + mu_x.norm_squared());
    let scale = if with_scale && !degenerate {
        let d = svd.singular_values;
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_x
    } else {
        1.0
    };
    let rotation = UnitQuaternion::from_matrix(&r);
    let translation = mu_y - rotation * mu_x * scale;
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    /// RMSE of the x, y and z residual components.
    pub per_axis: [f64; 3],
    pub alignment: Sim3,
    pub pairs: usize,
}

/// RMSE of camera-center residuals after alignment.
pub fn ate(est: &Trajectory, gt: &Trajectory, with_scale: bool) -> Result<AteResult> {
    let pairs = associate(est, gt);
    let alignment = umeyama_points(&pairs, with_scale)?;
    let n = pairs.len() as f64;
    let mut sq = Vector3::zeros();
    for (x, y) in &pairs {
        let r = alignment.apply(x) - y;
        sq += r.component_mul(&r);
    }
    sq /= n;
    Ok(AteResult {
        rmse: (sq.x + sq.y + sq.z).sqrt(),
        per_axis: [sq.x.sqrt(), sq.y.sqrt(), sq.z.sqrt()],
        alignment,
        pairs: pairs.len(),
    })
}

pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, with_scale: bool) -> Result<f64> {
    ate(est, gt, with_scale).map(|a| a.rmse)
}

/// One line per entry: `timestamp tx ty tz qx qy qz qw`.
pub fn format_tum(traj: &Trajectory) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, p) in &traj.entries {
        let c = p.translation();
        let q = p.rotation().quaternion();
        s.push_str(&format!(
            "{:.9} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12}\n",
            t, c.x, c.y, c.z, q.i, q.j, q.k, q.w
        ));
    }
    s
}

/// Parses TUM text; `path` only labels errors. Blank lines and `#` comments
/// are skipped.
pub fn parse_tum(text: &str, path: &Path) -> Result<Trajectory> {
    let mut entries = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = k + 1;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::parse(path, lineno, format!("invalid number {tok:?}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 8 {
            return Err(Error::parse(path, lineno, format!("expected 8 fields, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(path, lineno, "non-finite value"));
        }
        let q = nalgebra::Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if (q.norm() - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(Error::parse(
                path,
                lineno,
                format!("quaternion norm {} is not 1", q.norm()),
            ));
        }
        let pose = PoseSE3::new(UnitQuaternion::new_unchecked(q), Vector3::new(vals[1], vals[2], vals[3]));
        entries.push((vals[0], pose));
    }
    Trajectory::new(entries).map_err(|e| Error::parse(path, 0, e.to_string()))
}

pub fn load_tum(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tum(&text, path)
}

pub fn save_tum(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_tum(traj)).map_err(|e| Error::io(path, e))
}
