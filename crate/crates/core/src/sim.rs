//! Synthetic rigid-motion scenes with exact ground truth.
//!
//! A scene is a textured background plane plus textured rectangles, each with
//! its own rigid motion, seen by a moving pinhole camera. Pixels are rendered
//! by casting a ray into the scene and evaluating an analytic texture at the
//! hit point, so any frame can be sampled at sub-pixel positions without
//! interpolation error.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, InverseDepthMap, PixelGrid, Z_MIN};
use crate::error::{Error, Result};
use crate::flow::{dynamic_residual, static_flow, DynamicMask, FlowField};
use crate::graph::{Frame, FrameGraph, FrameId};
use crate::grid::{Grid, Image};
use crate::se3::{PoseSE3, Twist};

/// Relative depth tolerance of the z-buffer.
pub const DEPTH_TIE_EPS: f64 = 1e-6;

const BORDER_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Camera path; the camera starts at the world origin looking down +z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// Constant velocity with a constant rotation rate (both world frame, per
    /// second).
    Line {
        velocity: [f64; 3],
        #[serde(default)]
        rotation_rate: [f64; 3],
    },
    /// Forward motion along a circle in the x-z plane, yawing with the
    /// tangent.
    Arc { radius: f64, speed: f64 },
    /// Circles the point `(0, 0, radius)` while looking at it.
    Orbit { radius: f64, speed: f64 },
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec::Line {
            velocity: [0.4, 0.1, 0.2],
            rotation_rate: [0.02, -0.05, 0.01],
        }
    }
}

/// Background plane `z = depth + tilt_x·x + tilt_y·y` in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub depth: f64,
    #[serde(default)]
    pub tilt_x: f64,
    #[serde(default)]
    pub tilt_y: f64,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        BackgroundSpec {
            depth: 4.0,
            tilt_x: 0.15,
            tilt_y: -0.1,
        }
    }
}

/// A rectangle facing the camera at time 0, moving rigidly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// World position of the rectangle center at time 0.
    pub center: [f64; 3],
    pub half_extents: [f64; 2],
    /// World velocity of the center, units per second.
    #[serde(default)]
    pub velocity: [f64; 3],
    /// Rotation rate about the center, radians per second.
    #[serde(default)]
    pub angular_velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub width: usize,
    pub height: usize,
    /// Defaults to `fx = fy = width` and a centered principal point.
    pub camera: Option<CameraSpec>,
    pub n_frames: usize,
    /// Seconds between frames.
    pub dt: f64,
    pub trajectory: TrajectorySpec,
    pub background: BackgroundSpec,
    pub objects: Vec<ObjectSpec>,
    pub texture_seed: u64,
    /// Texture frequency range, radians per scene unit.
    pub texture_frequency: [f64; 2],
    /// Standard deviation of oracle flow noise, pixels.
    pub noise_sigma: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            width: 64,
            height: 48,
            camera: None,
            n_frames: 6,
            dt: 0.1,
            trajectory: TrajectorySpec::default(),
            background: BackgroundSpec::default(),
            objects: Vec::new(),
            texture_seed: 0,
            texture_frequency: [6.0, 24.0],
            noise_sigma: 0.0,
        }
    }
}

impl SimConfig {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        let c = self.camera.unwrap_or(CameraSpec {
            fx: self.width as f64,
            fy: self.width as f64,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        });
        Intrinsics::new(c.fx, c.fy, c.cx, c.cy, self.width, self.height)
            .map_err(|e| Error::DegenerateConfig(e.to_string()))
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::DegenerateConfig(m));
        if self.n_frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.n_frames));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.background.depth > 0.0) {
            return bad("background depth must be positive".into());
        }
        let [lo, hi] = self.texture_frequency;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("invalid texture frequency range [{lo}, {hi}]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        match self.trajectory {
            TrajectorySpec::Arc { radius, .. } | TrajectorySpec::Orbit { radius, .. } if !(radius > 0.0) => {
                return bad("trajectory radius must be positive".into());
            }
            _ => {}
        }
        for (k, o) in self.objects.iter().enumerate() {
            if !(o.half_extents[0] > 0.0 && o.half_extents[1] > 0.0) {
                return bad(format!("object {k} has non-positive extents"));
            }
        }
        Ok(())
    }
}

/// Band-limited procedural texture: six sinusoids along each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    x_waves: [(f64, f64); 6],
    y_waves: [(f64, f64); 6],
}

impl Texture {
    pub fn random(rng: &mut impl Rng, freq: [f64; 2]) -> Self {
        let mut wave = || {
            let f = if freq[1] > freq[0] {
                rng.random_range(freq[0]..freq[1])
            } else {
                freq[0]
            };
            (f, rng.random_range(0.0..std::f64::consts::TAU))
        };
        let x_waves = std::array::from_fn(|_| wave());
        let y_waves = std::array::from_fn(|_| wave());
        Texture { x_waves, y_waves }
    }

    /// Intensity in `[0, 1]`.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let sx: f64 = self.x_waves.iter().map(|(f, p)| (f * x + p).sin()).sum();
        let sy: f64 = self.y_waves.iter().map(|(f, p)| (f * y + p).sin()).sum();
        0.5 + (sx + sy) / 24.0
    }
}

/// Rigid motion of one object: `X_w(t) = R(t)·X_local + c(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimObject {
    pub spec: ObjectSpec,
    pub texture: Texture,
}

impl SimObject {
    /// Object-to-world transform at time `t`.
    pub fn pose_at(&self, t: f64) -> PoseSE3 {
        let w = Vector3::from(self.spec.angular_velocity) * t;
        let c = Vector3::from(self.spec.center) + Vector3::from(self.spec.velocity) * t;
        PoseSE3::new(UnitQuaternion::from_scaled_axis(w), c)
    }
}

/// One rendered frame with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub timestamp: f64,
    pub image: Image,
    /// World-to-camera.
    pub gt_pose: PoseSE3,
    pub gt_inv_depth: InverseDepthMap,
    /// 0 for background, `k + 1` for object `k`.
    pub gt_label: Grid<u32>,
}

/// Ground-truth flows between two frames, all on frame `i`'s grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GtFlows {
    pub f_s: FlowField,
    pub f_d: FlowField,
    pub f_o: FlowField,
    pub mask: DynamicMask,
    /// True where the point seen at `p` in frame `i` is hidden in frame `j`
    /// or leaves its image.
    pub occlusion: Grid<bool>,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    depth: f64,
    label: u32,
    intensity: f64,
}

#[derive(Debug, Clone)]
pub struct Scene {
    config: SimConfig,
    intrinsics: Intrinsics,
    background: Texture,
    objects: Vec<SimObject>,
    frames: Vec<SimFrame>,
}

/// Renders a scene; identical `(config, seed)` give bit-identical scenes.
pub fn generate(config: &SimConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let intrinsics = config.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ config.texture_seed.rotate_left(32));
    let background = Texture::random(&mut rng, config.texture_frequency);
    let objects: Vec<SimObject> = config
        .objects
        .iter()
        .map(|&spec| SimObject {
            spec,
            texture: Texture::random(&mut rng, config.texture_frequency),
        })
        .collect();

    let mut scene = Scene {
        config: config.clone(),
        intrinsics,
        background,
        objects,
        frames: Vec::with_capacity(config.n_frames),
    };
    for (k, o) in scene.objects.iter().enumerate() {
        let seen = (0..config.n_frames).any(|f| {
            let t = f as f64 * config.dt;
            let pose = camera_pose(&config.trajectory, t);
            pose.act(o.pose_at(t).translation()).z > Z_MIN
        });
        if !seen {
            return Err(Error::DegenerateConfig(format!(
                "object {k} is behind the camera in every frame"
            )));
        }
    }
    for f in 0..config.n_frames {
        let frame = scene.render_frame(f)?;
        scene.frames.push(frame);
    }
    Ok(scene)
}

/// World-to-camera pose of the simulated camera at time `t`.
pub fn camera_pose(traj: &TrajectorySpec, t: f64) -> PoseSE3 {
    let y_rot = |a: f64| UnitQuaternion::from_scaled_axis(Vector3::new(0.0, a, 0.0));
    let (r_cw, c) = match *traj {
        TrajectorySpec::Line {
            velocity,
            rotation_rate,
        } => (
            UnitQuaternion::from_scaled_axis(Vector3::from(rotation_rate) * t),
            Vector3::from(velocity) * t,
        ),
        TrajectorySpec::Arc { radius, speed } => {
            let th = speed * t / radius;
            (
                y_rot(th),
                Vector3::new(radius * (1.0 - th.cos()), 0.0, radius * th.sin()),
            )
        }
        TrajectorySpec::Orbit { radius, speed } => {
            let th = speed * t / radius;
            (
                y_rot(-th),
                Vector3::new(radius * th.sin(), 0.0, radius * (1.0 - th.cos())),
            )
        }
    };
    PoseSE3::new(r_cw, c).inverse()
}

impl Scene {
    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn frames(&self) -> &[SimFrame] {
        &self.frames
    }

    pub fn objects(&self) -> &[SimObject] {
        &self.objects
    }

    pub fn frame(&self, k: usize) -> Result<&SimFrame> {
        self.frames
            .get(k)
            .ok_or(Error::UnknownFrame(FrameId(k as u32)))
    }

    /// Casts the ray through pixel `(x, y)` at time `t` from a camera with
    /// world-to-camera pose `g`; the nearest surface wins, objects only when
    /// closer by more than the tie tolerance.
    fn cast(&self, g: &PoseSE3, t: f64, x: f64, y: f64) -> Option<Hit> {
        let bearing = self.intrinsics.bearing(&Vector2::new(x, y));
        let inv = g.inverse();
        let origin = *inv.translation();
        let dir = inv.rotation() * bearing;

        let bg = &self.config.background;
        let denom = dir.z - bg.tilt_x * dir.x - bg.tilt_y * dir.y;
        let mut best = None;
        if denom.abs() > 1e-12 {
            let s = (bg.depth + bg.tilt_x * origin.x + bg.tilt_y * origin.y - origin.z) / denom;
            if s > Z_MIN {
                let p = origin + dir * s;
                best = Some(Hit {
                    depth: s,
                    label: 0,
                    intensity: self.background.sample(p.x, p.y),
                });
            }
        }
        for (k, o) in self.objects.iter().enumerate() {
            let pose = o.pose_at(t);
            let ol = pose.rotation().inverse() * (origin - pose.translation());
            let dl = pose.rotation().inverse() * dir;
            if dl.z.abs() < 1e-12 {
                continue;
            }
            let s = -ol.z / dl.z;
            if s <= Z_MIN {
                continue;
            }
            let q = ol + dl * s;
            if q.x.abs() > o.spec.half_extents[0] || q.y.abs() > o.spec.half_extents[1] {
                continue;
            }
            let closer = best.is_none_or(|b: Hit| s < b.depth * (1.0 - DEPTH_TIE_EPS));
            if closer {
                best = Some(Hit {
                    depth: s,
                    label: k as u32 + 1,
                    intensity: o.texture.sample(q.x, q.y),
                });
            }
        }
        best
    }

    fn timestamp(&self, k: usize) -> f64 {
        k as f64 * self.config.dt
    }

    fn render_frame(&self, k: usize) -> Result<SimFrame> {
        let t = self.timestamp(k);
        let pose = camera_pose(&self.config.trajectory, t);
        let (w, h) = self.intrinsics.shape();
        let mut image = Grid::filled(w, h, 0.0);
        let mut depth = Grid::filled(w, h, 0.0);
        let mut label = Grid::filled(w, h, 0u32);
        for v in 0..h {
            for u in 0..w {
                let hit = self.cast(&pose, t, u as f64, v as f64).ok_or_else(|| {
                    Error::DegenerateConfig(format!("pixel ({u}, {v}) of frame {k} sees no surface"))
                })?;
                image[(u, v)] = hit.intensity;
                depth[(u, v)] = 1.0 / hit.depth;
                label[(u, v)] = hit.label;
            }
        }
        Ok(SimFrame {
            timestamp: t,
            image,
            gt_pose: pose,
            gt_inv_depth: depth,
            gt_label: label,
        })
    }

    /// Exact intensity of frame `k` at a sub-pixel position inside the image.
    pub fn sample(&self, k: usize, x: f64, y: f64) -> Option<f64> {
        let f = self.frames.get(k)?;
        if !self.intrinsics.in_bounds(&Vector2::new(x, y)) {
            return None;
        }
        self.cast(&f.gt_pose, f.timestamp, x, y).map(|h| h.intensity)
    }

    /// Ground-truth flows from frame `i` to frame `j`.
    ///
    /// Background pixels take their optical flow from the same reprojection
    /// that defines the static flow, so on a static scene `F_o = F_s` holds
    /// bit for bit.
    pub fn gt_flows(&self, i: usize, j: usize) -> Result<GtFlows> {
        let fi = self.frame(i)?;
        let fj = self.frame(j)?;
        let intr = &self.intrinsics;
        let (w, h) = intr.shape();
        let grid = PixelGrid::for_intrinsics(intr);
        let f_s = static_flow(intr, &fi.gt_pose, &fj.gt_pose, &fi.gt_inv_depth, &grid)?;
        let cam_i_to_world = fi.gt_pose.inverse();
        let motions: Vec<PoseSE3> = self
            .objects
            .iter()
            .map(|o| o.pose_at(fj.timestamp) * o.pose_at(fi.timestamp).inverse())
            .collect();

        let mut occlusion = Grid::filled(w, h, false);
        let f_o = FlowField::from_fn(w, h, |u, v| {
            let label = fi.gt_label[(u, v)];
            let p = Vector2::new(u as f64, v as f64);
            let xc_i = intr.bearing(&p) / fi.gt_inv_depth[(u, v)];
            let xw = cam_i_to_world.act(&xc_i);
            let xw_j = if label == 0 {
                xw
            } else {
                motions[label as usize - 1].act(&xw)
            };
            let xc_j = fj.gt_pose.act(&xw_j);
            let (pj, ok) = intr.project(&xc_j);
            // Round-off may put a border point a hair outside the image.
            let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
            let near = xc_j.z > Z_MIN
                && pj.x > -BORDER_SLACK
                && pj.y > -BORDER_SLACK
                && pj.x < xmax + BORDER_SLACK
                && pj.y < ymax + BORDER_SLACK;
            let visible = near
                && self
                    .cast(&fj.gt_pose, fj.timestamp, pj.x.clamp(0.0, xmax), pj.y.clamp(0.0, ymax))
                    .is_some_and(|hit| hit.depth >= xc_j.z * (1.0 - DEPTH_TIE_EPS));
            occlusion[(u, v)] = !visible;
            if label == 0 {
                f_s.is_valid(u, v).then(|| {
                    let s = f_s.at(u, v);
                    (s.x, s.y)
                })
            } else {
                ok.then(|| (pj.x - p.x, pj.y - p.y))
            }
        });
        let f_d = dynamic_residual(&f_o, &f_s)?;
        let mask = DynamicMask::from_static_flags(&fi.gt_label.map(|&l| l == 0));
        Ok(GtFlows {
            f_s,
            f_d,
            f_o,
            mask,
            occlusion,
        })
    }

    /// Fraction of pixels of frame `k` covered by objects.
    pub fn dynamic_fraction(&self, k: usize) -> Result<f64> {
        let f = self.frame(k)?;
        Ok(f.gt_label.iter().filter(|&&l| l != 0).count() as f64 / f.gt_label.len() as f64)
    }

    /// Camera-to-world poses with timestamps, in TUM order.
    pub fn gt_trajectory(&self) -> Vec<(f64, PoseSE3)> {
        self.frames
            .iter()
            .map(|f| (f.timestamp, f.gt_pose.inverse()))
            .collect()
    }

    /// A frame graph at ground truth: frame `k` gets id `k`, the first two
    /// frames are fixed and frames within `window` are connected both ways.
    pub fn frame_graph(&self, window: usize) -> Result<FrameGraph> {
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(k, f)| {
                Frame::new(
                    FrameId(k as u32),
                    f.timestamp,
                    f.image.clone(),
                    f.gt_pose,
                    f.gt_inv_depth.clone(),
                )
            })
            .collect();
        FrameGraph::with_window(self.intrinsics, frames, window)
    }
}

impl crate::photometric::FrameSampler for Scene {
    /// Exact texture lookup; frame id `k` is simulated frame `k`.
    fn sample(&self, frame: FrameId, x: f64, y: f64) -> Option<f64> {
        Scene::sample(self, frame.0 as usize, x, y)
    }
}

/// Perturbs every free frame: poses by a left twist drawn from an isotropic
/// Gaussian with RMS norm `pose_sigma`, inverse depths by a factor
/// `1 + N(0, depth_sigma)`. Fixed frames keep both pose and depth.
pub fn perturb(graph: &mut FrameGraph, pose_sigma: f64, depth_sigma: f64, seed: u64) -> Result<()> {
    if !(pose_sigma >= 0.0 && depth_sigma >= 0.0) {
        return Err(Error::InvalidConfig("perturbation sigmas must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let per_axis = pose_sigma / 6f64.sqrt();
    let ids: Vec<FrameId> = graph.frames().iter().filter(|f| !f.fixed).map(|f| f.id).collect();
    for id in ids {
        let xi = Twist::from_vector(&nalgebra::Vector6::from_fn(|_, _| unit.sample(&mut rng) * per_axis));
        let f = graph.frame_mut(id)?;
        if pose_sigma > 0.0 {
            f.pose = f.pose.retract(&xi);
        }
        if depth_sigma > 0.0 {
            for d in f.inv_depth.as_mut_slice() {
                *d = (*d * (1.0 + unit.sample(&mut rng) * depth_sigma)).max(crate::dba::MIN_INV_DEPTH);
            }
        }
    }
    Ok(())
}

/// Draws `n` twists the way [`perturb`] does and returns their norms.
pub fn perturbation_norms(pose_sigma: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let per_axis = pose_sigma / 6f64.sqrt();
    (0..n)
        .map(|_| {
            (0..6)
                .map(|_| (unit.sample(&mut rng) * per_axis).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// A scene with one large rectangle drifting across the view, covering
/// roughly a quarter to a third of the image. Geometry varies with `seed`.
pub fn mover_preset(seed: u64) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d_6f76_6572);
    let speed = rng.random_range(0.8..1.4);
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    SimConfig {
        objects: vec![ObjectSpec {
            center: [rng.random_range(-0.1..0.1), rng.random_range(-0.08..0.08), 2.2],
            half_extents: [rng.random_range(0.56..0.6), rng.random_range(0.45..0.49)],
            velocity: [speed * heading.cos(), speed * heading.sin(), 0.0],
            angular_velocity: [0.0, 0.0, rng.random_range(-0.3..0.3)],
        }],
        texture_seed: seed,
        ..SimConfig::default()
    }
}
