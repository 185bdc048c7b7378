use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use dualflow::camera::PixelGrid;
use dualflow::flow::{artificial_mask, dynamic_residual, static_flow, DynamicMask, DEFAULT_MU};
use dualflow::gradcheck::{run_all, GradcheckOptions};
use dualflow::io::{
    encode_flo, encode_image_pgm, encode_mask_pgm, encode_pfm, read_flo, read_mask_pgm, read_pfm,
};
use dualflow::photometric::{loss_csv, LossConfig};
use dualflow::sim::{generate, perturb, Scene, SimConfig};
use dualflow::traj::{ate, format_tum, load_tum, Trajectory};
use dualflow::update::{current_losses, iterate_once, metrics_csv, FlowOracle, SolverState, UpdateConfig};
use dualflow::{Error, FrameGraph, PoseSE3};
use serde::{Deserialize, Serialize};

use crate::manifest::OutputDir;
use crate::{CliError, CliResult, DecomposeArgs, EvalArgs, GradcheckArgs, SimulateArgs, SolveArgs};

/// Scene configuration file: the simulator settings plus the seed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneFile {
    pub seed: u64,
    #[serde(flatten)]
    pub scene: SimConfig,
}

/// Run configuration file for `solve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveFile {
    #[serde(flatten)]
    pub update: UpdateConfig,
    /// Connect frames at most this far apart; all pairs when absent.
    pub window: Option<usize>,
    /// RMS norm of the initial pose perturbation.
    pub pose_sigma: f64,
    /// Relative inverse-depth perturbation.
    pub depth_sigma: f64,
}

impl Default for SolveFile {
    fn default() -> Self {
        SolveFile {
            update: UpdateConfig::default(),
            window: None,
            pose_sigma: 0.02,
            depth_sigma: 0.05,
        }
    }
}

pub const SCENE_CONFIG: &str = "config.json";
pub const GT_TRAJECTORY: &str = "gt_trajectory.txt";

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Parses JSON, reporting the position of syntax errors.
fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8], path: &Path) -> CliResult<T> {
    serde_json::from_slice(bytes).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::config(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn pair_name(i: impl std::fmt::Display, j: impl std::fmt::Display) -> String {
    format!("{i:0>3}_{j:0>3}")
}

pub fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let (mut file, raw) = match &args.config {
        Some(p) => {
            let bytes = read_bytes(p)?;
            (parse_json::<SceneFile>(&bytes, p)?, bytes)
        }
        None => (SceneFile::default(), Vec::new()),
    };
    if let Some(seed) = args.seed {
        file.seed = seed;
    }
    let scene = generate(&file.scene, file.seed)?;
    let mut out = OutputDir::create(&args.out)?;
    let resolved = to_json(&file)?;
    out.write(SCENE_CONFIG, "config", &resolved)?;
    let intr = *scene.intrinsics();
    let grid = PixelGrid::for_intrinsics(&intr);
    for (k, f) in scene.frames().iter().enumerate() {
        out.write(&format!("images/{k:03}.pgm"), "images", &encode_image_pgm(&f.image))?;
        out.write(&format!("inv_depth/{k:03}.pfm"), "inv_depth", &encode_pfm(&f.gt_inv_depth))?;
    }
    let mut dyn_px = 0.0;
    for i in 0..scene.frames().len() - 1 {
        let j = i + 1;
        let gt = scene.gt_flows(i, j)?;
        let name = pair_name(i, j);
        out.write(&format!("flows/{name}_o.flo"), "flow_optical", &encode_flo(&gt.f_o))?;
        out.write(&format!("flows/{name}_s.flo"), "flow_static", &encode_flo(&gt.f_s))?;
        out.write(&format!("flows/{name}_d.flo"), "flow_dynamic", &encode_flo(&gt.f_d))?;
        let (fi, fj) = (&scene.frames()[i], &scene.frames()[j]);
        let mask = artificial_mask(
            &intr,
            &PoseSE3::relative(&fi.gt_pose, &fj.gt_pose),
            &fi.gt_inv_depth,
            &gt.f_o,
            &grid,
            DEFAULT_MU,
        )?;
        dyn_px += mask.dynamic_count() as f64 / (intr.width * intr.height) as f64;
        out.write(&format!("masks/{name}.pgm"), "masks", &encode_mask_pgm(&mask))?;
    }
    let gt = Trajectory::new(scene.gt_trajectory())?;
    out.write(GT_TRAJECTORY, "trajectory", format_tum(&gt).as_bytes())?;
    let n = scene.frames().len();
    let mut metrics = BTreeMap::new();
    metrics.insert("n_frames".into(), n as f64);
    metrics.insert("mean_dynamic_fraction".into(), dyn_px / (n - 1) as f64);
    out.finish("simulate", &raw, file.seed, metrics)?;
    Ok(())
}

/// Regenerates the scene recorded in a `simulate` output directory.
pub fn load_scene(dir: &Path) -> CliResult<(SceneFile, Scene)> {
    if !dir.is_dir() {
        return Err(CliError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "scene directory not found"),
        ));
    }
    let path = dir.join(SCENE_CONFIG);
    let file: SceneFile = parse_json(&read_bytes(&path)?, &path)?;
    let scene = generate(&file.scene, file.seed)?;
    Ok((file, scene))
}

fn is_numeric(e: &Error) -> bool {
    matches!(
        e,
        Error::SingularSystem | Error::Diverged(_) | Error::NonFinite(_) | Error::AngleNearPi { .. }
    )
}

pub fn solve(args: &SolveArgs) -> CliResult<()> {
    let (_, scene) = load_scene(&args.scene)?;
    let (mut run, raw) = match &args.config {
        Some(p) => {
            let bytes = read_bytes(p)?;
            (parse_json::<SolveFile>(&bytes, p)?, bytes)
        }
        None => (SolveFile::default(), Vec::new()),
    };
    let u = &mut run.update;
    if let Some(s) = args.seed {
        u.seed = s;
    }
    if let Some(p) = args.provider {
        u.provider = p;
    }
    if let Some(m) = args.mu {
        u.mu = m;
    }
    if let Some(e) = args.eta {
        u.eta = e;
    }
    if let Some(r) = args.radius {
        u.radius = r;
    }
    u.single_flow |= args.single_flow;
    let cfg = run.update;

    let n = scene.frames().len();
    let mut graph: FrameGraph = scene.frame_graph(run.window.unwrap_or(n))?;
    perturb(&mut graph, run.pose_sigma, run.depth_sigma, cfg.seed)?;
    let mut state = SolverState::new(graph, cfg)?;

    let oracle: &dyn FlowOracle = &scene;
    let loss_cfg = LossConfig::default();
    let (mut metrics, mut losses) = (Vec::new(), Vec::new());
    let mut converged = false;
    let mut failure = None;
    for _ in 0..cfg.max_outer_iters {
        match iterate_once(&mut state, Some(oracle)).and_then(|m| Ok((m, current_losses(&state, &loss_cfg)?))) {
            Ok((m, l)) => {
                metrics.push(m);
                losses.push(l);
                if m.max_twist_norm < cfg.step_tol {
                    converged = true;
                    break;
                }
            }
            Err(e) if is_numeric(&e) => {
                failure = Some(e);
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }

    // Outputs are written even after a numerical failure, so the partial run
    // can be inspected.
    let mut out = OutputDir::create(&args.out)?;
    let est = Trajectory::from_world_to_camera(state.trajectory())?;
    out.write("trajectory.txt", "trajectory", format_tum(&est).as_bytes())?;
    for e in state.graph.edges() {
        let name = pair_name(e.i, e.j);
        out.write(&format!("edges/{name}_o.flo"), "flow_optical", &encode_flo(&e.optical_flow))?;
        out.write(&format!("edges/{name}_d.flo"), "flow_dynamic", &encode_flo(&e.dyn_flow))?;
        out.write(&format!("edges/{name}.pgm"), "masks", &encode_mask_pgm(&e.mask))?;
    }
    out.write("losses.csv", "losses", loss_csv(&losses, &loss_cfg).as_bytes())?;
    out.write("iterations.csv", "iterations", metrics_csv(&metrics).as_bytes())?;

    let mut summary = BTreeMap::new();
    summary.insert("iterations".into(), metrics.len() as f64);
    summary.insert("converged".into(), f64::from(u8::from(converged)));
    if let Some(m) = metrics.last() {
        summary.insert("final_cost".into(), m.cost);
        summary.insert("dynamic_fraction".into(), m.dynamic_fraction);
    }
    let gt = Trajectory::new(scene.gt_trajectory())?;
    if let Ok(a) = ate(&est, &gt, !args.no_scale) {
        if a.rmse.is_finite() {
            summary.insert("ate".into(), a.rmse);
        }
    }
    out.finish("solve", &raw, cfg.seed, summary)?;
    match failure {
        Some(e) => Err(CliError::numeric(format!("{e}; partial outputs kept in {}", args.out.display()))),
        None => Ok(()),
    }
}

pub fn eval(args: &EvalArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let est = load_tum(&args.estimate)?;
    let gt = load_tum(&args.ground_truth)?;
    let a = ate(&est, &gt, !args.no_scale)?;
    writeln!(
        stdout,
        "{:.6},{:.6},{:.6},{:.6}",
        a.rmse, a.per_axis[0], a.per_axis[1], a.per_axis[2]
    )
    .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

/// `|A ∩ B| / |A ∪ B|` over dynamic pixels; 1 when both masks are all static.
pub fn dynamic_iou(a: &DynamicMask, b: &DynamicMask) -> CliResult<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            actual: b.shape(),
        }
        .into());
    }
    let (sa, sb) = (a.binarize(), b.binarize());
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in sa.iter().zip(sb.iter()) {
        let (da, db) = (!x, !y);
        inter += usize::from(da && db);
        union += usize::from(da || db);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn decompose(args: &DecomposeArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let f_o = read_flo(&args.flow)?;
    let traj = load_tum(&args.traj)?;
    let d_i = read_pfm(&args.depth)?;
    let (w, h) = f_o.shape();
    d_i.ensure_shape((w, h))?;
    let intr = match &args.config {
        Some(p) => parse_json::<SceneFile>(&read_bytes(p)?, p)?.scene.intrinsics()?,
        None => SimConfig {
            width: w,
            height: h,
            ..SimConfig::default()
        }
        .intrinsics()?,
    };
    if intr.shape() != (w, h) {
        return Err(Error::ShapeMismatch {
            expected: intr.shape(),
            actual: (w, h),
        }
        .into());
    }
    let (i, j) = (args.frames[0], args.frames[1]);
    let pose = |k: usize| {
        traj.entries()
            .get(k)
            .map(|(_, p)| p.inverse())
            .ok_or_else(|| CliError::config(format!("trajectory has no entry {k}")))
    };
    let (g_i, g_j) = (pose(i)?, pose(j)?);
    let grid = PixelGrid::for_intrinsics(&intr);
    let f_s = static_flow(&intr, &g_i, &g_j, &d_i, &grid)?;
    let f_d = dynamic_residual(&f_o, &f_s)?;
    let mask = artificial_mask(&intr, &PoseSE3::relative(&g_i, &g_j), &d_i, &f_o, &grid, args.mu)?;

    let mut out = OutputDir::create(&args.out)?;
    out.write("flow_s.flo", "flow_static", &encode_flo(&f_s))?;
    out.write("flow_d.flo", "flow_dynamic", &encode_flo(&f_d))?;
    out.write("mask.pgm", "masks", &encode_mask_pgm(&mask))?;
    let mut metrics = BTreeMap::new();
    let frac = mask.dynamic_count() as f64 / (w * h) as f64;
    metrics.insert("dynamic_fraction".into(), frac);
    let iou = match &args.gt_mask {
        Some(p) => Some(dynamic_iou(&mask, &read_mask_pgm(p)?)?),
        None => None,
    };
    if let Some(x) = iou {
        metrics.insert("iou".into(), x);
    }
    out.finish("decompose", &[], 0, metrics)?;
    let io_err = |e| CliError::io(Path::new("<stdout>"), e);
    match iou {
        Some(x) => writeln!(stdout, "dynamic_fraction,iou\n{frac:.6},{x:.6}").map_err(io_err),
        None => writeln!(stdout, "dynamic_fraction\n{frac:.6}").map_err(io_err),
    }
}

pub fn gradcheck(args: &GradcheckArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let results = run_all(&GradcheckOptions {
        seed: args.seed,
        instances: args.instances,
        break_jacobian: args.break_jacobian,
    })?;
    let io_err = |e| CliError::io(Path::new("<stdout>"), e);
    writeln!(stdout, "check,max_rel_err,samples,status").map_err(io_err)?;
    for r in &results {
        let status = if r.passed() { "pass" } else { "FAIL" };
        writeln!(stdout, "{},{:.3e},{},{status}", r.name, r.max_rel_err, r.samples).map_err(io_err)?;
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::numeric(format!("{failed} derivative checks failed")));
    }
    Ok(())
}
