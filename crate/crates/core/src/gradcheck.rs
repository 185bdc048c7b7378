//! Central finite-difference checks of every analytic derivative in the
//! crate, run on random instances.

use nalgebra::{Vector2, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::{reproject, reproject_jacobians, Intrinsics, PixelGrid};
use crate::dba::{cost, cost_gradient, BaProblem, DbaConfig};
use crate::error::Result;
use crate::flow::{sample_bilinear, FlowField};
use crate::graph::FrameGraph;
use crate::grid::{Grid, Image};
use crate::photometric::{
    flow_photo_pair_sum_grad, mask_ce_grad, mask_ce_raw, pe_geo, pe_geo_mean_grad, LossConfig,
};
use crate::se3::{PoseSE3, Twist};
use crate::sim::{generate, perturb, SimConfig, TrajectorySpec};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    /// Test hook: scales the analytic reprojection pose Jacobian by 1.01.
    pub break_jacobian: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            instances: 50,
            break_jacobian: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub samples: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Default)]
struct Tally {
    worst: f64,
    n: usize,
}

impl Tally {
    fn add(&mut self, e: f64) {
        self.worst = self.worst.max(e);
        self.n += 1;
    }

    fn result(self, name: &'static str) -> CheckResult {
        CheckResult {
            name,
            max_rel_err: self.worst,
            samples: self.n,
        }
    }
}

/// Runs every check and returns one result per check, in a fixed order.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (cam_pose, cam_depth) = check_camera(&mut rng, opts)?;
    let (dba_pose, dba_depth) = check_dba(&mut rng, opts)?;
    Ok(vec![
        cam_pose,
        cam_depth,
        dba_pose,
        dba_depth,
        check_pe(&mut rng, opts)?,
        check_flow_pair(&mut rng, opts)?,
        check_mask_ce(&mut rng, opts)?,
    ])
}

fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> PoseSE3 {
    PoseSE3::exp(&Twist::from_vector(&Vector6::from_fn(|k, _| {
        let s = if k < 3 { rot } else { trans };
        rng.random_range(-s..s)
    })))
}

fn check_camera(rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<(CheckResult, CheckResult)> {
    let (w, h) = (24, 18);
    let (mut pose_t, mut depth_t) = (Tally::default(), Tally::default());
    for _ in 0..opts.instances {
        let f = rng.random_range(15.0..40.0);
        let k = Intrinsics::new(f, f * rng.random_range(0.9..1.1), 11.5, 8.5, w, h)?;
        let grid = PixelGrid::for_intrinsics(&k);
        let g = random_pose(rng, 0.2, 0.3);
        let d = Grid::from_fn(w, h, |_, _| rng.random_range(0.1..1.0));
        let jac = reproject_jacobians(&k, &g, &d, &grid)?;
        let pixels: Vec<usize> = (0..8).map(|_| rng.random_range(0..w * h)).collect();
        for a in 0..6 {
            let mut e = Vector6::zeros();
            e[a] = STEP;
            let fp = reproject(&k, &g.retract(&Twist::from_vector(&e)), &d, &grid)?;
            let fm = reproject(&k, &g.retract(&Twist::from_vector(&(-e))), &d, &grid)?;
            for &idx in &pixels {
                if !jac.in_front.as_slice()[idx] {
                    continue;
                }
                let fd = (fp.coords.as_slice()[idx] - fm.coords.as_slice()[idx]) / (2.0 * STEP);
                let mut an: Vector2<f64> = jac.pose.as_slice()[idx].column(a).into_owned();
                if opts.break_jacobian {
                    an *= 1.01;
                }
                pose_t.add(rel_err(fd.x, an.x, 1e-3).max(rel_err(fd.y, an.y, 1e-3)));
            }
        }
        let fp = reproject(&k, &g, &d.map(|x| x + STEP), &grid)?;
        let fm = reproject(&k, &g, &d.map(|x| x - STEP), &grid)?;
        for &idx in &pixels {
            if !jac.in_front.as_slice()[idx] {
                continue;
            }
            let fd = (fp.coords.as_slice()[idx] - fm.coords.as_slice()[idx]) / (2.0 * STEP);
            let an = jac.depth.as_slice()[idx];
            depth_t.add(rel_err(fd.x, an.x, 1e-3).max(rel_err(fd.y, an.y, 1e-3)));
        }
    }
    Ok((pose_t.result("camera.reproject_pose"), depth_t.result("camera.reproject_depth")))
}

fn dba_instance(seed: u64) -> Result<FrameGraph> {
    let cfg = SimConfig {
        width: 12,
        height: 10,
        n_frames: 3,
        trajectory: TrajectorySpec::Line {
            velocity: [1.2, 0.4, 0.6],
            rotation_rate: [0.1, -0.2, 0.05],
        },
        ..SimConfig::default()
    };
    let scene = generate(&cfg, seed)?;
    let mut g = scene.frame_graph(2)?;
    for e in g.edges_mut() {
        let gt = scene.gt_flows(e.i.0 as usize, e.j.0 as usize)?;
        e.target = gt.f_o.to_correspondence();
    }
    perturb(&mut g, 0.03, 0.05, seed.wrapping_add(1))?;
    Ok(g)
}

fn check_dba(rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<(CheckResult, CheckResult)> {
    let (mut pose_t, mut depth_t) = (Tally::default(), Tally::default());
    let dcfg = DbaConfig::default();
    for _ in 0..opts.instances {
        let g = dba_instance(rng.random())?;
        let (w, h) = g.intrinsics().shape();
        let weights: Vec<Grid<f64>> = g
            .edges()
            .iter()
            .map(|_| Grid::from_fn(w, h, |_, _| rng.random_range(0.1..1.0)))
            .collect();
        let eval = |g: &FrameGraph| -> Result<f64> { cost(&BaProblem::new(g, &dcfg)?.with_weights(weights.clone())?) };
        let (gp, gd) = cost_gradient(&BaProblem::new(&g, &dcfg)?.with_weights(weights.clone())?)?;
        for (id, grad) in gp {
            for a in 0..6 {
                let mut e = Vector6::zeros();
                e[a] = STEP;
                let shifted = |s: f64| -> Result<f64> {
                    let mut g2 = g.clone();
                    let pose = g2.frame(id)?.pose.retract(&Twist::from_vector(&(e * s)));
                    g2.set_pose(id, pose)?;
                    eval(&g2)
                };
                let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * STEP);
                pose_t.add(rel_err(fd, grad[a], 1e-3));
            }
        }
        let n_px = w * h;
        for _ in 0..4 {
            let pos = rng.random_range(0..g.frames().len());
            let px = rng.random_range(0..n_px);
            let id = g.frames()[pos].id;
            let shifted = |s: f64| -> Result<f64> {
                let mut g2 = g.clone();
                g2.frame_mut(id)?.inv_depth.as_mut_slice()[px] += s * STEP;
                eval(&g2)
            };
            let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * STEP);
            depth_t.add(rel_err(fd, gd[pos * n_px + px], 1e-3));
        }
    }
    Ok((pose_t.result("dba.cost_gradient_pose"), depth_t.result("dba.cost_gradient_depth")))
}

fn smooth_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    let (a, b, c) = (rng.random_range(0.2..0.6), rng.random_range(0.2..0.6), rng.random_range(0.0..6.3));
    Grid::from_fn(w, h, |u, v| 0.5 + 0.3 * (a * u as f64 + c).sin() * (b * v as f64).cos())
}

fn check_pe(rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<CheckResult> {
    let cfg = LossConfig::default();
    let mut t = Tally::default();
    for _ in 0..opts.instances {
        let (w, h) = (9, 8);
        let a = Grid::from_fn(w, h, |_, _| rng.random_range(0.0..1.0));
        let b = Grid::from_fn(w, h, |_, _| rng.random_range(0.0..1.0));
        let grad = pe_geo_mean_grad(&a, &b, &cfg)?;
        for _ in 0..4 {
            let (u, v) = (rng.random_range(0..w), rng.random_range(0..h));
            // |a − b| has a kink at zero.
            if (a[(u, v)] - b[(u, v)]).abs() < 1e-3 {
                continue;
            }
            let loss = |s: f64| -> Result<f64> {
                let mut b2 = b.clone();
                b2[(u, v)] += s * STEP;
                Ok(pe_geo(&a, &b2, &cfg)?.mean())
            };
            let fd = (loss(1.0)? - loss(-1.0)?) / (2.0 * STEP);
            t.add(rel_err(fd, grad[(u, v)], 1e-8));
        }
    }
    Ok(t.result("photometric.pe_geo"))
}

fn check_flow_pair(rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut t = Tally::default();
    let (w, h) = (12, 10);
    for _ in 0..opts.instances {
        let a = smooth_image(rng, w, h);
        let b = smooth_image(rng, w, h);
        let flow = FlowField::from_fn(w, h, |_, _| Some((rng.random_range(0.1..0.9), rng.random_range(0.1..0.9))));
        let (gu, gv) = flow_photo_pair_sum_grad(&a, &b, &flow)?;
        for _ in 0..4 {
            let (u, v) = (rng.random_range(0..w - 1), rng.random_range(0..h - 1));
            let f = flow.at(u, v);
            let Some(bj) = sample_bilinear(&b, u as f64 + f.x, v as f64 + f.y) else {
                continue;
            };
            if (a[(u, v)] - bj).abs() < 1e-3 {
                continue;
            }
            for axis in 0..2 {
                let term = |s: f64| {
                    let (x, y) = if axis == 0 { (f.x + s, f.y) } else { (f.x, f.y + s) };
                    sample_bilinear(&b, u as f64 + x, v as f64 + y).map(|y| (a[(u, v)] - y).abs())
                };
                let (Some(p), Some(m)) = (term(STEP), term(-STEP)) else {
                    continue;
                };
                let fd = (p - m) / (2.0 * STEP);
                let an = if axis == 0 { gu[(u, v)] } else { gv[(u, v)] };
                t.add(rel_err(fd, an, 1e-6));
            }
        }
    }
    Ok(t.result("photometric.flow_pair"))
}

fn check_mask_ce(rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut t = Tally::default();
    for _ in 0..opts.instances {
        let pred = Grid::from_fn(6, 4, |_, _| rng.random_range(0.05..0.95));
        let label = Grid::from_fn(6, 4, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let g = mask_ce_grad(&pred, &label)?;
        let k = rng.random_range(0..pred.len());
        let loss = |s: f64| -> Result<f64> {
            let mut p = pred.clone();
            p.as_mut_slice()[k] += s * 1e-7;
            mask_ce_raw(&p, &label)
        };
        let fd = (loss(1.0)? - loss(-1.0)?) / 2e-7;
        t.add(rel_err(fd, g.as_slice()[k], 1e-8));
    }
    Ok(t.result("photometric.mask_ce"))
}
