//! Dense bundle adjustment over keyframe poses and per-pixel inverse depths.
//!
//! Every edge `(i, j)` contributes one 2-vector residual per pixel of frame
//! `i`:
//!
//! ```text
//! r = p*_s − π(G_ij ∘ π⁻¹(p_i, d_i)),   G_ij = G_j ∘ G_i⁻¹
//! E = Σ_edges Σ_pixels w_d · ‖r‖²
//! w_d = sigmoid(w + (1 − M_d) · η)
//! ```
//!
//! A Gauss-Newton step linearizes around the current state with left
//! perturbations on each free pose and additive perturbations on each inverse
//! depth. Each depth only couples to the poses of the edges leaving its frame,
//! so the depth block `C` is diagonal and is eliminated with a Schur
//! complement before the small dense pose system is factorized.
//!
//! Levenberg damping (scalar, adapted per iteration) replaces a learned
//! per-pixel damping map, and a weak prior on depth increments keeps depths
//! without observations well-posed.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2x6, Vector2, Vector6};
use serde::{Deserialize, Serialize};

use crate::camera::{reproject_jacobians, PixelGrid};
use crate::error::{Error, Result};
use crate::flow::DynamicMask;
use crate::graph::{FrameGraph, FrameId};
use crate::grid::Grid;
use crate::se3::{PoseSE3, Twist};

pub const DEFAULT_ETA: f64 = 10.0;
pub const DEFAULT_DAMPING: f64 = 1e-4;
pub const DEFAULT_DEPTH_PRIOR: f64 = 1e-3;
pub const MIN_INV_DEPTH: f64 = 1e-4;
pub const MAX_INV_DEPTH: f64 = 1e4;

/// Consecutive cost increases tolerated by [`solve`].
pub const MAX_CONSECUTIVE_INCREASES: usize = 3;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// How the dynamic mask enters the confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskWeighting {
    /// `sigmoid(w + (1 − M)·η)`: pixels with `M = 0` (dynamic) gain weight.
    #[default]
    Literal,
    /// `sigmoid(w + M·η)`: the sign-flipped variant, for ablations.
    Inverted,
}

/// Raw confidence logits and the combined per-pixel weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub logits: Grid<f64>,
    pub weights: Grid<f64>,
}

/// Combines correlation logits with the dynamic mask.
pub fn combine_confidence(w: &Grid<f64>, mask: &DynamicMask, eta: f64) -> Result<ConfidenceMap> {
    combine_confidence_with(w, mask, eta, MaskWeighting::Literal)
}

pub fn combine_confidence_with(
    w: &Grid<f64>,
    mask: &DynamicMask,
    eta: f64,
    weighting: MaskWeighting,
) -> Result<ConfidenceMap> {
    w.ensure_shape(mask.shape())?;
    let m = mask.values();
    let weights = Grid::from_fn(w.width(), w.height(), |u, v| {
        let gate = match weighting {
            MaskWeighting::Literal => 1.0 - m[(u, v)],
            MaskWeighting::Inverted => m[(u, v)],
        };
        sigmoid(w[(u, v)] + gate * eta)
    });
    Ok(ConfidenceMap {
        logits: w.clone(),
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbaConfig {
    pub eta: f64,
    pub damping: f64,
    pub depth_prior_weight: f64,
    pub max_iters: usize,
    pub step_tol: f64,
    pub mask_weighting: MaskWeighting,
}

impl Default for DbaConfig {
    fn default() -> Self {
        DbaConfig {
            eta: DEFAULT_ETA,
            damping: DEFAULT_DAMPING,
            depth_prior_weight: DEFAULT_DEPTH_PRIOR,
            max_iters: 20,
            step_tol: 1e-10,
            mask_weighting: MaskWeighting::Literal,
        }
    }
}

/// A graph snapshot plus per-edge weights and the current damping.
#[derive(Debug, Clone)]
pub struct BaProblem<'a> {
    pub graph: &'a FrameGraph,
    pub weights: Vec<Grid<f64>>,
    pub damping: f64,
    pub depth_prior_weight: f64,
}

impl<'a> BaProblem<'a> {
    /// Requires at least two fixed frames and one free frame.
    pub fn new(graph: &'a FrameGraph, config: &DbaConfig) -> Result<Self> {
        if graph.fixed_count() < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least two fixed frames for the gauge, got {}",
                graph.fixed_count()
            )));
        }
        if graph.frames().iter().all(|f| f.fixed) {
            return Err(Error::NoFreeFrames);
        }
        let weights = graph
            .edges()
            .iter()
            .map(|e| {
                combine_confidence_with(&e.confidence_logit, &e.mask, config.eta, config.mask_weighting)
                    .map(|c| c.weights)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BaProblem {
            graph,
            weights,
            damping: config.damping,
            depth_prior_weight: config.depth_prior_weight,
        })
    }

    /// Replaces the weights derived from the edges, e.g. for solver tests.
    pub fn with_weights(mut self, weights: Vec<Grid<f64>>) -> Result<Self> {
        if weights.len() != self.graph.edges().len() {
            return Err(Error::ShapeMismatch {
                expected: (self.graph.edges().len(), 1),
                actual: (weights.len(), 1),
            });
        }
        self.weights = weights;
        Ok(self)
    }

    /// Free frames in graph order; the position is the pose block index.
    pub fn free_frames(&self) -> Vec<FrameId> {
        self.graph
            .frames()
            .iter()
            .filter(|f| !f.fixed)
            .map(|f| f.id)
            .collect()
    }

    fn pose_slots(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.graph
            .frames()
            .iter()
            .map(|f| {
                (!f.fixed).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }

    fn pixels(&self) -> usize {
        let (w, h) = self.graph.intrinsics().shape();
        w * h
    }
}

/// Residuals of one edge; invalid pixels hold zero.
#[derive(Debug, Clone)]
pub struct EdgeResiduals {
    pub values: Grid<Vector2<f64>>,
    pub valid: Grid<bool>,
}

/// A pixel contributes when its target is valid and its reprojection lands in
/// front of the target camera. Image bounds do not matter here: the target is
/// fixed during a step and the residual stays well defined outside the image.
pub fn residuals(problem: &BaProblem) -> Result<Vec<EdgeResiduals>> {
    let g = problem.graph;
    let intr = g.intrinsics();
    let grid = PixelGrid::for_intrinsics(intr);
    g.edges()
        .iter()
        .map(|e| {
            let fi = g.frame(e.i)?;
            let fj = g.frame(e.j)?;
            let gij = PoseSE3::relative(&fi.pose, &fj.pose);
            let corr = crate::camera::reproject(intr, &gij, &fi.inv_depth, &grid)?;
            let depth_ok = front_flags(intr, &gij, &fi.inv_depth, &grid)?;
            let (w, h) = intr.shape();
            let mut values = Grid::filled(w, h, Vector2::zeros());
            let mut valid = Grid::filled(w, h, false);
            for v in 0..h {
                for u in 0..w {
                    if e.target.valid[(u, v)] && depth_ok[(u, v)] {
                        values[(u, v)] = e.target.coords[(u, v)] - corr.coords[(u, v)];
                        valid[(u, v)] = true;
                    }
                }
            }
            Ok(EdgeResiduals { values, valid })
        })
        .collect()
}

fn front_flags(
    intr: &crate::camera::Intrinsics,
    gij: &PoseSE3,
    d: &Grid<f64>,
    grid: &PixelGrid,
) -> Result<Grid<bool>> {
    let r = gij.rotation_matrix();
    let t = gij.translation();
    d.ensure_shape(grid.shape())?;
    Ok(Grid::from_fn(d.width(), d.height(), |u, v| {
        let di = d[(u, v)];
        let z = (r * intr.bearing(&grid.coords[(u, v)]) + t * di).z;
        di > 0.0 && z > crate::camera::Z_MIN * di
    }))
}

/// `E = Σ w_d ‖r‖²`.
pub fn cost(problem: &BaProblem) -> Result<f64> {
    let res = residuals(problem)?;
    Ok(res
        .iter()
        .zip(&problem.weights)
        .map(|(r, w)| {
            r.values
                .iter()
                .zip(r.valid.iter())
                .zip(w.iter())
                .filter(|((_, ok), _)| **ok)
                .map(|((x, _), wt)| wt * x.norm_squared())
                .sum::<f64>()
        })
        .sum())
}

/// Normal equations with depths kept separate.
///
/// ```text
/// [ B   E ] [Δξ]   [g_p]
/// [ Eᵀ  C ] [Δd] = [g_d]
/// ```
///
/// `E` is stored column-wise: for each depth variable, the non-zero 6-blocks
/// keyed by pose slot.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub n_poses: usize,
    pub b: DMatrix<f64>,
    pub e: Vec<Vec<(usize, Vector6<f64>)>>,
    pub c: Vec<f64>,
    pub g_pose: DVector<f64>,
    pub g_depth: Vec<f64>,
}

impl LinearSystem {
    pub fn n_depths(&self) -> usize {
        self.c.len()
    }

    /// Eliminates depths, factorizes the reduced pose system and
    /// back-substitutes.
    pub fn solve_schur(&self) -> Result<(DVector<f64>, Vec<f64>)> {
        let mut s = self.b.clone();
        let mut rhs = self.g_pose.clone();
        for ((col, &c), &gd) in self.e.iter().zip(&self.c).zip(&self.g_depth) {
            let inv_c = 1.0 / c;
            for &(a, ea) in col {
                let scaled = ea * inv_c;
                rhs.fixed_rows_mut::<6>(6 * a).axpy(-gd, &scaled, 1.0);
                for &(b, eb) in col {
                    let mut blk = s.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                    blk -= scaled * eb.transpose();
                }
            }
        }
        let chol = Cholesky::new(s).ok_or(Error::SingularSystem)?;
        let dxi = chol.solve(&rhs);
        let dd = self
            .e
            .iter()
            .zip(&self.c)
            .zip(&self.g_depth)
            .map(|((col, &c), &gd)| {
                let coupled: f64 = col
                    .iter()
                    .map(|&(a, ea)| ea.dot(&dxi.fixed_rows::<6>(6 * a)))
                    .sum();
                (gd - coupled) / c
            })
            .collect();
        Ok((dxi, dd))
    }

    /// The full symmetric matrix and right-hand side.
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let np = 6 * self.n_poses;
        let n = np + self.n_depths();
        let mut h = DMatrix::zeros(n, n);
        h.view_mut((0, 0), (np, np)).copy_from(&self.b);
        for (k, col) in self.e.iter().enumerate() {
            for &(a, ea) in col {
                h.view_mut((6 * a, np + k), (6, 1)).copy_from(&ea);
                h.view_mut((np + k, 6 * a), (1, 6)).copy_from(&ea.transpose());
            }
            h[(np + k, np + k)] = self.c[k];
        }
        let mut g = DVector::zeros(n);
        g.rows_mut(0, np).copy_from(&self.g_pose);
        for (k, &x) in self.g_depth.iter().enumerate() {
            g[np + k] = x;
        }
        (h, g)
    }
}

fn add_to_column(col: &mut Vec<(usize, Vector6<f64>)>, slot: usize, x: Vector6<f64>) {
    match col.iter_mut().find(|(s, _)| *s == slot) {
        Some((_, acc)) => *acc += x,
        None => col.push((slot, x)),
    }
}

/// Per-residual Jacobian blocks, with fixed poses dropped.
struct ResidualBlock {
    slot_i: Option<usize>,
    slot_j: Option<usize>,
    j_i: Matrix2x6<f64>,
    j_j: Matrix2x6<f64>,
    j_d: Vector2<f64>,
}

/// Walks every valid residual in edge order, handing out
/// `(edge index, depth index, weight, residual, jacobians)`.
fn for_each_residual(
    problem: &BaProblem,
    mut visit: impl FnMut(usize, usize, f64, Vector2<f64>, &ResidualBlock),
) -> Result<()> {
    let g = problem.graph;
    let intr = g.intrinsics();
    let grid = PixelGrid::for_intrinsics(intr);
    let slots = problem.pose_slots();
    let npix = problem.pixels();
    for (ei, e) in g.edges().iter().enumerate() {
        let pi = g.frame_position(e.i).ok_or(Error::UnknownFrame(e.i))?;
        let pj = g.frame_position(e.j).ok_or(Error::UnknownFrame(e.j))?;
        let fi = &g.frames()[pi];
        let fj = &g.frames()[pj];
        let gij = PoseSE3::relative(&fi.pose, &fj.pose);
        let neg_adj = -gij.adjoint();
        let jac = reproject_jacobians(intr, &gij, &fi.inv_depth, &grid)?;
        let w = &problem.weights[ei];
        w.ensure_shape(intr.shape())?;
        for k in 0..npix {
            if !(e.target.valid.as_slice()[k] && jac.in_front.as_slice()[k]) {
                continue;
            }
            let r = e.target.coords.as_slice()[k] - jac.field.coords.as_slice()[k];
            let j_j = jac.pose.as_slice()[k];
            let blk = ResidualBlock {
                slot_i: slots[pi],
                slot_j: slots[pj],
                j_i: j_j * neg_adj,
                j_j,
                j_d: jac.depth.as_slice()[k],
            };
            visit(ei, pi * npix + k, w.as_slice()[k], r, &blk);
        }
    }
    Ok(())
}

/// Assembles the damped normal equations.
pub fn build_system(problem: &BaProblem) -> Result<LinearSystem> {
    let n_poses = problem.free_frames().len();
    let n_depths = problem.graph.frames().len() * problem.pixels();
    let mut b = DMatrix::zeros(6 * n_poses, 6 * n_poses);
    let mut g_pose = DVector::zeros(6 * n_poses);
    let mut e: Vec<Vec<(usize, Vector6<f64>)>> = vec![Vec::new(); n_depths];
    let mut c = vec![0.0; n_depths];
    let mut g_depth = vec![0.0; n_depths];

    for_each_residual(problem, |_, k, w, r, blk| {
        let poses = [(blk.slot_i, &blk.j_i), (blk.slot_j, &blk.j_j)];
        for (n, &(sa, ja)) in poses.iter().enumerate() {
            let Some(a) = sa else { continue };
            let wja = ja.transpose() * w;
            let mut gv = g_pose.fixed_rows_mut::<6>(6 * a);
            gv += wja * r;
            add_to_column(&mut e[k], a, wja * blk.j_d);
            // Blocks are filled in mirrored pairs so B stays exactly symmetric.
            let mut diag = b.fixed_view_mut::<6, 6>(6 * a, 6 * a);
            let d = wja * ja;
            diag += (d + d.transpose()) * 0.5;
            for &(sb, jb) in &poses[n + 1..] {
                if let Some(bb) = sb {
                    let off = wja * jb;
                    let mut upper = b.fixed_view_mut::<6, 6>(6 * a, 6 * bb);
                    upper += off;
                    let mut lower = b.fixed_view_mut::<6, 6>(6 * bb, 6 * a);
                    lower += off.transpose();
                }
            }
        }
        c[k] += w * blk.j_d.norm_squared();
        g_depth[k] += w * blk.j_d.dot(&r);
    })?;

    for d in 0..6 * n_poses {
        b[(d, d)] += problem.damping;
    }
    for x in &mut c {
        *x += problem.damping + problem.depth_prior_weight;
    }
    Ok(LinearSystem {
        n_poses,
        b,
        e,
        c,
        g_pose,
        g_depth,
    })
}

/// Increments for one Gauss-Newton step.
#[derive(Debug, Clone)]
pub struct DbaStep {
    pub poses: Vec<(FrameId, Twist)>,
    pub depths: Vec<(FrameId, Grid<f64>)>,
}

impl DbaStep {
    pub fn max_twist_norm(&self) -> f64 {
        self.poses.iter().map(|(_, t)| t.norm()).fold(0.0, f64::max)
    }

    pub fn max_depth_step(&self) -> f64 {
        self.depths
            .iter()
            .flat_map(|(_, d)| d.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// One damped Gauss-Newton step via the Schur complement.
pub fn gauss_newton_step(problem: &BaProblem) -> Result<DbaStep> {
    let free = problem.free_frames();
    if free.is_empty() {
        return Err(Error::NoFreeFrames);
    }
    let sys = build_system(problem)?;
    let (dxi, dd) = sys.solve_schur()?;
    Ok(unpack_step(problem, &free, &dxi, &dd))
}

fn unpack_step(problem: &BaProblem, free: &[FrameId], dxi: &DVector<f64>, dd: &[f64]) -> DbaStep {
    let (w, h) = problem.graph.intrinsics().shape();
    let npix = w * h;
    let poses = free
        .iter()
        .enumerate()
        .map(|(s, &id)| (id, Twist::from_vector(&dxi.fixed_rows::<6>(6 * s).into_owned())))
        .collect();
    let depths = problem
        .graph
        .frames()
        .iter()
        .enumerate()
        .map(|(p, f)| {
            let vals = dd[p * npix..(p + 1) * npix].to_vec();
            (f.id, Grid::from_vec(w, h, vals).expect("sized"))
        })
        .collect();
    DbaStep { poses, depths }
}

/// Retracts free poses and adds depth increments, clamping inverse depth to
/// `[MIN_INV_DEPTH, MAX_INV_DEPTH]`. Fixed poses are never touched.
pub fn apply_step(graph: &mut FrameGraph, step: &DbaStep) -> Result<()> {
    for (id, xi) in &step.poses {
        let pose = graph.frame(*id)?.pose.retract(xi);
        graph.set_pose(*id, pose)?;
    }
    for (id, dd) in &step.depths {
        let f = graph.frame_mut(*id)?;
        dd.ensure_shape(f.inv_depth.shape())?;
        for (d, x) in f.inv_depth.as_mut_slice().iter_mut().zip(dd.iter()) {
            *d = (*d + x).clamp(MIN_INV_DEPTH, MAX_INV_DEPTH);
        }
    }
    Ok(())
}

/// Per free frame gradient w.r.t. its left twist, then per depth variable.
pub type CostGradient = (Vec<(FrameId, Vector6<f64>)>, Vec<f64>);

/// Analytic gradient of [`cost`]: per free frame w.r.t. its left twist, and
/// per depth variable (frame-major, row-major pixels).
pub fn cost_gradient(problem: &BaProblem) -> Result<CostGradient> {
    let free = problem.free_frames();
    let mut gp = vec![Vector6::zeros(); free.len()];
    let mut gd = vec![0.0; problem.graph.frames().len() * problem.pixels()];
    for_each_residual(problem, |_, k, w, r, blk| {
        // r depends on the state through −π(...), so ∂(w‖r‖²) = −2 w Jᵀ r.
        if let Some(a) = blk.slot_i {
            gp[a] -= blk.j_i.transpose() * r * (2.0 * w);
        }
        if let Some(b) = blk.slot_j {
            gp[b] -= blk.j_j.transpose() * r * (2.0 * w);
        }
        gd[k] -= 2.0 * w * blk.j_d.dot(&r);
    })?;
    Ok((free.into_iter().zip(gp).collect(), gd))
}

/// One row of the iteration log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    pub max_twist_norm: f64,
    pub damping: f64,
}

/// CSV with header `iter,cost,max_twist_norm,damping`.
pub fn iteration_log_csv(log: &[IterationRecord]) -> String {
    let mut s = String::from("iter,cost,max_twist_norm,damping\n");
    for r in log {
        let _ = writeln!(s, "{},{:.12e},{:.12e},{:.6e}", r.iter, r.cost, r.max_twist_norm, r.damping);
    }
    s
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub log: Vec<IterationRecord>,
    pub converged: bool,
    pub final_cost: f64,
}

/// Levenberg-Marquardt iterations until the largest twist increment drops
/// below `step_tol` or `max_iters` is reached.
///
/// A step that raises the cost is rejected and the damping grows ×10; an
/// accepted step halves it. After [`MAX_CONSECUTIVE_INCREASES`] rejected steps
/// in a row the graph is left at the best state and `Diverged` is returned.
pub fn solve(graph: &mut FrameGraph, config: &DbaConfig) -> Result<SolveReport> {
    let mut damping = config.damping;
    let mut current = cost(&BaProblem::new(graph, config)?)?;
    let mut log = vec![IterationRecord {
        iter: 0,
        cost: current,
        max_twist_norm: 0.0,
        damping,
    }];
    let mut increases = 0;
    let mut converged = false;
    for iter in 1..=config.max_iters {
        let step = {
            let mut problem = BaProblem::new(graph, config)?;
            problem.damping = damping;
            gauss_newton_step(&problem)?
        };
        let mt = step.max_twist_norm();
        let saved = snapshot(graph);
        apply_step(graph, &step)?;
        let next = cost(&BaProblem::new(graph, config)?)?;
        if next.is_finite() && next <= current {
            current = next;
            damping = (damping * 0.5).max(1e-12);
            increases = 0;
            log.push(IterationRecord {
                iter,
                cost: current,
                max_twist_norm: mt,
                damping,
            });
            if mt < config.step_tol {
                converged = true;
                break;
            }
        } else {
            restore(graph, &saved)?;
            if mt < config.step_tol {
                converged = true;
                break;
            }
            damping *= 10.0;
            increases += 1;
            if increases >= MAX_CONSECUTIVE_INCREASES {
                return Err(Error::Diverged(increases));
            }
        }
    }
    Ok(SolveReport {
        log,
        converged,
        final_cost: current,
    })
}

type Snapshot = Vec<(FrameId, PoseSE3, Grid<f64>)>;

fn snapshot(graph: &FrameGraph) -> Snapshot {
    graph
        .frames()
        .iter()
        .map(|f| (f.id, f.pose, f.inv_depth.clone()))
        .collect()
}

fn restore(graph: &mut FrameGraph, snap: &Snapshot) -> Result<()> {
    for (id, pose, depth) in snap {
        let f = graph.frame_mut(*id)?;
        if !f.fixed {
            f.pose = *pose;
        }
        f.inv_depth = depth.clone();
    }
    Ok(())
}
