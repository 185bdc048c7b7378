//! The outer update loop: acquire optical-flow targets, split them into
//! static and dynamic parts, refresh the dynamic masks, then take one dense
//! bundle adjustment step.
//!
//! Per edge `(i, j)` and outer iteration:
//!
//! 1. `F_s`: the current static flow from the poses and depths;
//! 2. `F_o`: the measured optical flow (oracle or correlation);
//! 3. mask: a pixel is dynamic when `‖F_o − F_s‖` exceeds the threshold;
//! 4. `F_d = (1 − M)·(F_o − F_s)`;
//! 5. static target `p*_s = p + F_o − F_d`, on static pixels only;
//! 6. confidence from the logits and the mask;
//!
//! followed by one global Gauss-Newton step. Static pixels pull the state
//! toward their measured flow, dynamic pixels are explained by `F_d`.
//!
//! The threshold is `max(μ, k·median‖F_o − F_s‖)`. Early on, pose and depth
//! errors make every pixel disagree by more than `μ`; scaling with the median
//! keeps the bulk of the static scene labeled static until the state
//! converges, at which point the threshold falls back to `μ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{reproject, reproject_unbounded, CorrespondenceField, PixelGrid};
use crate::correlation::{build_volume, extract_features, refine_targets, DEFAULT_FEATURE_DIM, DEFAULT_RADIUS};
use crate::dba::{apply_step, cost, gauss_newton_step, BaProblem, DbaConfig, MaskWeighting};
use crate::error::{Error, Result};
use crate::flow::{
    artificial_mask, dynamic_residual, mask_agg, target_disagreement, threshold_disagreement, DynamicMask, FlowField,
    DEFAULT_MU,
};
use crate::graph::{FrameGraph, FrameId};
use crate::grid::Grid;
use crate::photometric::{
    aggregate_masks, flow_photo_loss, geo_photo_loss, mask_ce_loss, BilinearSampler, IterationLosses, LossConfig,
};
use crate::se3::PoseSE3;
use crate::sim::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    /// Ground-truth optical flow plus optional Gaussian noise.
    #[default]
    Oracle,
    /// Correlation-volume matching around the previous estimate.
    Correlation,
}

impl std::str::FromStr for Provider {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Provider::Oracle),
            "correlation" => Ok(Provider::Correlation),
            other => Err(Error::InvalidConfig(format!("unknown provider {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateConfig {
    pub mu: f64,
    pub eta: f64,
    pub radius: usize,
    pub provider: Provider,
    /// Oracle flow noise, pixels.
    pub noise_sigma: f64,
    pub max_outer_iters: usize,
    pub step_tol: f64,
    pub seed: u64,
    /// Baseline: raw optical flow as the target, all pixels static.
    pub single_flow: bool,
    /// Multiple of the median disagreement used as the mask threshold floor.
    pub threshold_factor: f64,
    pub feature_dim: usize,
    pub damping: f64,
    pub depth_prior_weight: f64,
    pub mask_weighting: MaskWeighting,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        let dba = DbaConfig::default();
        UpdateConfig {
            mu: DEFAULT_MU,
            eta: dba.eta,
            radius: DEFAULT_RADIUS,
            provider: Provider::Oracle,
            noise_sigma: 0.0,
            max_outer_iters: 8,
            step_tol: 1e-10,
            seed: 0,
            single_flow: false,
            threshold_factor: 3.0,
            feature_dim: DEFAULT_FEATURE_DIM,
            damping: dba.damping,
            depth_prior_weight: dba.depth_prior_weight,
            mask_weighting: dba.mask_weighting,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.mu > 0.0) {
            return bad("mu must be positive");
        }
        if !(self.eta.is_finite()) {
            return bad("eta must be finite");
        }
        if self.radius == 0 {
            return bad("radius must be at least 1");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(self.step_tol >= 0.0) {
            return bad("step_tol must be non-negative");
        }
        if !(self.threshold_factor >= 0.0) {
            return bad("threshold_factor must be non-negative");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.damping >= 0.0 && self.depth_prior_weight >= 0.0) {
            return bad("damping and depth prior must be non-negative");
        }
        Ok(())
    }

    pub fn dba(&self) -> DbaConfig {
        DbaConfig {
            eta: self.eta,
            damping: self.damping,
            depth_prior_weight: self.depth_prior_weight,
            max_iters: 1,
            step_tol: self.step_tol,
            mask_weighting: self.mask_weighting,
        }
    }
}

/// Source of ground-truth optical flow for the oracle provider.
pub trait FlowOracle {
    fn optical_flow(&self, i: FrameId, j: FrameId) -> Result<FlowField>;
}

impl FlowOracle for Scene {
    fn optical_flow(&self, i: FrameId, j: FrameId) -> Result<FlowField> {
        self.gt_flows(i.0 as usize, j.0 as usize)
            .map(|g| g.f_o)
            .map_err(|_| Error::MissingGroundTruth(i, j))
    }
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub graph: FrameGraph,
    pub iteration: usize,
    pub config: UpdateConfig,
}

/// Per outer iteration summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    /// Bundle adjustment cost against the fresh targets, before the step.
    pub cost: f64,
    pub max_twist_norm: f64,
    /// Share of edge pixels labeled dynamic.
    pub dynamic_fraction: f64,
    /// Mean mask threshold over edges, pixels.
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<IterationMetrics>,
    pub losses: Vec<IterationLosses>,
    pub converged: bool,
}

impl SolverState {
    /// Validates the configuration and, for the correlation provider,
    /// extracts features for every frame.
    pub fn new(mut graph: FrameGraph, config: UpdateConfig) -> Result<Self> {
        config.validate()?;
        if config.provider == Provider::Correlation {
            let ids: Vec<FrameId> = graph.frames().iter().map(|f| f.id).collect();
            for id in ids {
                let f = graph.frame_mut(id)?;
                f.features = Some(extract_features(&f.image, config.feature_dim)?);
            }
        }
        Ok(SolverState {
            graph,
            iteration: 0,
            config,
        })
    }

    /// `(timestamp, world-to-camera pose)` per frame, in graph order.
    pub fn trajectory(&self) -> Vec<(f64, PoseSE3)> {
        self.graph.frames().iter().map(|f| (f.timestamp, f.pose)).collect()
    }
}

fn edge_rng(seed: u64, i: FrameId, j: FrameId) -> ChaCha8Rng {
    let key = (u64::from(i.0) << 32) | u64::from(j.0);
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ key)
}

/// Measured optical-flow correspondences and confidence logits for one edge.
///
/// Oracle noise is drawn from a generator keyed by `(seed, i, j)`, so an edge
/// sees the same measurement in every iteration.
pub fn acquire_targets(
    state: &SolverState,
    edge_index: usize,
    oracle: Option<&dyn FlowOracle>,
) -> Result<(CorrespondenceField, Grid<f64>)> {
    let g = &state.graph;
    let e = g
        .edges()
        .get(edge_index)
        .ok_or_else(|| Error::InvalidConfig(format!("edge index {edge_index} out of range")))?;
    let (w, h) = g.intrinsics().shape();
    match state.config.provider {
        Provider::Oracle => {
            let oracle = oracle.ok_or(Error::MissingGroundTruth(e.i, e.j))?;
            let gt = oracle.optical_flow(e.i, e.j)?;
            gt.du().ensure_shape((w, h))?;
            let sigma = state.config.noise_sigma;
            let flow = if sigma > 0.0 {
                let mut rng = edge_rng(state.config.seed, e.i, e.j);
                let noise = Normal::new(0.0, sigma).map_err(|err| Error::InvalidConfig(err.to_string()))?;
                FlowField::from_fn(w, h, |u, v| {
                    let (nu, nv) = (noise.sample(&mut rng), noise.sample(&mut rng));
                    gt.is_valid(u, v).then(|| {
                        let f = gt.at(u, v);
                        (f.x + nu, f.y + nv)
                    })
                })
            } else {
                gt
            };
            Ok((flow.to_correspondence(), Grid::filled(w, h, 0.0)))
        }
        Provider::Correlation => {
            let fi = g.frame(e.i)?;
            let fj = g.frame(e.j)?;
            let (Some(feat_i), Some(feat_j)) = (&fi.features, &fj.features) else {
                return Err(Error::InvalidConfig("correlation provider needs frame features".into()));
            };
            let init = if e.optical_flow.valid().iter().any(|&v| v) {
                e.optical_flow.to_correspondence()
            } else {
                let grid = PixelGrid::for_intrinsics(g.intrinsics());
                reproject(g.intrinsics(), &PoseSE3::relative(&fi.pose, &fj.pose), &fi.inv_depth, &grid)?
            };
            let pyr = build_volume(feat_i, feat_j)?;
            refine_targets(&pyr, &init, state.config.radius)
        }
    }
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

/// Refreshes the measurement, logits and per-edge mask label of edge `k`.
/// Returns the current static flow and the threshold that was used.
fn measure_edge(state: &mut SolverState, k: usize, oracle: Option<&dyn FlowOracle>) -> Result<(FlowField, f64)> {
    let (measured, logits) = acquire_targets(state, k, oracle)?;
    let cfg = state.config;
    let g = &state.graph;
    let intr = *g.intrinsics();
    let grid = PixelGrid::for_intrinsics(&intr);
    let e = &g.edges()[k];
    let fi = g.frame(e.i)?;
    let fj = g.frame(e.j)?;
    // Bundle adjustment scores every in-front reprojection, so the mask has
    // to judge those too, including ones that leave the image.
    let f_s = FlowField::from_correspondence(&reproject_unbounded(
        &intr,
        &PoseSE3::relative(&fi.pose, &fj.pose),
        &fi.inv_depth,
        &grid,
    )?);
    let f_o = FlowField::from_correspondence(&measured);
    let (w, h) = intr.shape();

    let mut mask = e.mask.clone();
    let tau = if cfg.single_flow {
        mask = DynamicMask::all_static(w, h);
        f64::INFINITY
    } else {
        let dist = target_disagreement(&f_s, &f_o)?;
        let spread = median(dist.iter().flatten().copied().collect()).unwrap_or(0.0);
        let tau = cfg.mu.max(cfg.threshold_factor * spread);
        let label = threshold_disagreement(&dist, tau);
        let delta = Grid::from_fn(w, h, |u, v| label.at(u, v) - mask.at(u, v));
        mask.apply_increment(&delta)?;
        tau
    };

    let e = &mut state.graph.edges_mut()[k];
    e.confidence_logit = logits;
    e.mask = mask;
    e.optical_flow = f_o;
    Ok((f_s, tau))
}

/// Replaces the mask of edge `k` by `mask`, then derives the dynamic flow
/// and the static target from it.
fn finalize_edge(state: &mut SolverState, k: usize, f_s: &FlowField, mask: DynamicMask) -> Result<()> {
    let e = &mut state.graph.edges_mut()[k];
    let raw = dynamic_residual(&e.optical_flow, f_s)?;
    let (w, h) = raw.shape();
    let f_d = FlowField::from_fn(w, h, |u, v| {
        if mask.is_static(u, v) {
            Some((0.0, 0.0))
        } else {
            let r = raw.at(u, v);
            raw.is_valid(u, v).then_some((r.x, r.y))
        }
    });
    // Dynamic pixels carry no static target: it would only restate the
    // current reprojection and pin the state in place.
    e.target = dynamic_residual(&e.optical_flow, &f_d)?
        .with_validity(&mask.binarize())
        .to_correspondence();
    e.dyn_flow = f_d;
    e.mask = mask;
    Ok(())
}

/// One outer iteration over all edges followed by one Gauss-Newton step.
///
/// Edge masks are made consistent per source frame before the step: a pixel
/// flagged dynamic by any outgoing edge is dynamic in all of them. Otherwise
/// a moving pixel that one edge happens to accept could have its free inverse
/// depth fitted to that edge and never be rejected again.
pub fn iterate_once(state: &mut SolverState, oracle: Option<&dyn FlowOracle>) -> Result<IterationMetrics> {
    let n_edges = state.graph.edges().len();
    if n_edges == 0 {
        return Err(Error::EmptyInput);
    }
    let mut tau_sum = 0.0;
    let mut static_flows = Vec::with_capacity(n_edges);
    for k in 0..n_edges {
        let (f_s, tau) = measure_edge(state, k, oracle)?;
        tau_sum += if tau.is_finite() { tau } else { 0.0 };
        static_flows.push(f_s);
    }
    let masks = (0..n_edges)
        .map(|k| {
            let e = &state.graph.edges()[k];
            if state.config.single_flow {
                Ok(e.mask.clone())
            } else {
                mask_agg(&state.graph, e.i).map(|a| DynamicMask::from_static_flags(&a.values))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    for (k, (f_s, mask)) in static_flows.iter().zip(masks).enumerate() {
        finalize_edge(state, k, f_s, mask)?;
    }
    let dba = state.config.dba();
    let (cost_before, step) = {
        let problem = BaProblem::new(&state.graph, &dba)?;
        (cost(&problem)?, gauss_newton_step(&problem)?)
    };
    apply_step(&mut state.graph, &step)?;
    state.iteration += 1;
    let finite = state.graph.frames().iter().all(|f| f.pose.is_finite());
    if !finite || !cost_before.is_finite() {
        return Err(Error::NonFinite(state.iteration));
    }
    let (dyn_px, all_px) = state.graph.edges().iter().fold((0, 0), |(d, n), e| {
        (d + e.mask.dynamic_count(), n + e.mask.values().len())
    });
    Ok(IterationMetrics {
        iter: state.iteration,
        cost: cost_before,
        max_twist_norm: step.max_twist_norm(),
        dynamic_fraction: dyn_px as f64 / all_px as f64,
        threshold: tau_sum / n_edges as f64,
    })
}

/// Self-supervised losses of the current state, using bilinear warps of the
/// stored images.
pub fn current_losses(state: &SolverState, loss_cfg: &LossConfig) -> Result<IterationLosses> {
    let g = &state.graph;
    let sampler = BilinearSampler(g);
    let masks = aggregate_masks(g)?;
    let geo = geo_photo_loss(g, &masks, &sampler, loss_cfg)?.value;
    let flow = flow_photo_loss(g, &sampler)?;
    let intr = g.intrinsics();
    let grid = PixelGrid::for_intrinsics(intr);
    let mut mask = 0.0;
    for e in g.edges() {
        let fi = g.frame(e.i)?;
        let fj = g.frame(e.j)?;
        let label = artificial_mask(
            intr,
            &PoseSE3::relative(&fi.pose, &fj.pose),
            &fi.inv_depth,
            &e.optical_flow,
            &grid,
            state.config.mu,
        )?;
        mask += mask_ce_loss(&e.mask, &label)?;
    }
    mask /= g.edges().len().max(1) as f64;
    Ok(IterationLosses { geo, flow, mask })
}

/// Repeats [`iterate_once`] until the Gauss-Newton step falls below
/// `step_tol` or `max_outer_iters` is reached.
pub fn run(state: &mut SolverState, oracle: Option<&dyn FlowOracle>) -> Result<RunOutput> {
    let loss_cfg = LossConfig::default();
    let mut out = RunOutput {
        metrics: Vec::new(),
        losses: Vec::new(),
        converged: false,
    };
    for _ in 0..state.config.max_outer_iters {
        let m = iterate_once(state, oracle)?;
        out.metrics.push(m);
        out.losses.push(current_losses(state, &loss_cfg)?);
        if m.max_twist_norm < state.config.step_tol {
            out.converged = true;
            break;
        }
    }
    Ok(out)
}

/// CSV with header `iter,cost,max_twist_norm,dynamic_fraction,threshold`.
pub fn metrics_csv(metrics: &[IterationMetrics]) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("iter,cost,max_twist_norm,dynamic_fraction,threshold\n");
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{:.12e},{:.12e},{:.6},{:.6}",
            m.iter, m.cost, m.max_twist_norm, m.dynamic_fraction, m.threshold
        );
    }
    s
}
