//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dualflow::camera::PixelGrid;
use dualflow::dba::{build_system, sigmoid, solve, BaProblem, DbaConfig};
use dualflow::flow::{artificial_mask, compose_flow, DynamicMask};
use dualflow::gradcheck::{run_all, GradcheckOptions};
use dualflow::grid::Grid;
use dualflow::photometric::{aggregate_masks, geo_photo_loss, pe_geo, total_self_sup_loss, IterationLosses, LossConfig};
use dualflow::se3::{pose_distance, PoseSE3};
use dualflow::sim::{generate, mover_preset, perturb, ObjectSpec, Scene, SimConfig, TrajectorySpec};
use dualflow::traj::{ate_rmse, load_tum, save_tum, Sim3, Trajectory};
use dualflow::update::{run, FlowOracle, SolverState, UpdateConfig};
use dualflow::FrameGraph;
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_config(seed: u64) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectory = match seed % 3 {
        0 => TrajectorySpec::Line {
            velocity: [rng.random_range(-0.8..0.8), rng.random_range(-0.4..0.4), rng.random_range(-0.5..0.8)],
            rotation_rate: [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
        },
        1 => TrajectorySpec::Arc {
            radius: rng.random_range(2.0..6.0),
            speed: rng.random_range(0.2..0.8),
        },
        _ => TrajectorySpec::Orbit {
            radius: rng.random_range(3.0..4.5),
            speed: rng.random_range(0.1..0.4),
        },
    };
    let objects = (0..rng.random_range(0..3))
        .map(|_| ObjectSpec {
            center: [rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4), rng.random_range(1.5..3.0)],
            half_extents: [rng.random_range(0.15..0.5), rng.random_range(0.15..0.4)],
            velocity: [rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)],
            angular_velocity: [0.0, 0.0, rng.random_range(-0.5..0.5)],
        })
        .collect();
    SimConfig {
        trajectory,
        objects,
        texture_seed: seed,
        ..SimConfig::default()
    }
}

fn flow_additivity() -> Outcome {
    let mut pixels = 0usize;
    for seed in 0..20 {
        let scene = generate(&random_config(seed), seed).map_err(|e| e.to_string())?;
        let n = scene.frames().len();
        for (i, j) in [(0, 1), (1, 3), (n - 1, 0)] {
            let gt = scene.gt_flows(i, j).map_err(|e| e.to_string())?;
            let composed = compose_flow(&gt.f_s, &gt.f_d).map_err(|e| e.to_string())?;
            let (w, h) = gt.f_o.shape();
            for v in 0..h {
                for u in 0..w {
                    if !gt.f_d.is_valid(u, v) {
                        continue;
                    }
                    check(composed.at(u, v) == gt.f_o.at(u, v), || {
                        format!("seed {seed} edge {i}->{j} pixel ({u},{v}) differs")
                    })?;
                    pixels += 1;
                }
            }
        }
    }
    Ok(format!("{pixels} pixels bit-exact"))
}

fn jacobians() -> Outcome {
    let results = run_all(&GradcheckOptions {
        seed: 0,
        instances: 50,
        break_jacobian: false,
    })
    .map_err(|e| e.to_string())?;
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    for r in &results {
        check(r.passed(), || format!("{} rel err {:.3e}", r.name, r.max_rel_err))?;
    }
    Ok(format!("{} checks, worst rel err {worst:.2e}", results.len()))
}

fn oracle_graph(scene: &Scene, window: usize) -> FrameGraph {
    let mut g = scene.frame_graph(window).unwrap();
    for e in g.edges_mut() {
        let gt = scene.gt_flows(e.i.0 as usize, e.j.0 as usize).unwrap();
        e.target = gt.f_o.to_correspondence();
        e.optical_flow = gt.f_o;
    }
    g
}

fn schur_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let n = 3 + (seed as usize % 2);
        let cfg = SimConfig {
            width: 4,
            height: 4,
            n_frames: n,
            trajectory: TrajectorySpec::Line {
                velocity: [1.2, 0.4, 0.6],
                rotation_rate: [0.1, -0.2, 0.05],
            },
            ..SimConfig::default()
        };
        let scene = generate(&cfg, seed + 10).unwrap();
        let mut g = oracle_graph(&scene, 2);
        perturb(&mut g, 0.03, 0.05, seed + 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = g
            .edges()
            .iter()
            .map(|_| Grid::from_fn(4, 4, |_, _| rng.random_range(0.05..1.0)))
            .collect();
        let p = BaProblem::new(&g, &DbaConfig::default())
            .unwrap()
            .with_weights(weights)
            .unwrap();
        let sys = build_system(&p).unwrap();
        check(sys.n_depths() <= 64, || format!("{} depth unknowns", sys.n_depths()))?;
        let (dxi, dd) = sys.solve_schur().map_err(|e| e.to_string())?;
        let (hm, gv) = sys.to_dense();
        let full = hm.lu().solve(&gv).ok_or("dense system is singular")?;
        let np = dxi.len();
        for k in 0..np {
            worst = worst.max((dxi[k] - full[k]).abs());
        }
        for (k, d) in dd.iter().enumerate() {
            worst = worst.max((d - full[np + k]).abs());
        }
    }
    check(worst < 1e-8, || format!("max abs diff {worst:.3e}"))?;
    Ok(format!("max abs diff {worst:.2e}"))
}

fn perturbed(scene: &Scene, seed: u64) -> FrameGraph {
    let mut g = scene.frame_graph(scene.frames().len()).unwrap();
    perturb(&mut g, 0.02, 0.05, seed).unwrap();
    g
}

fn ate(state: &SolverState, scene: &Scene) -> f64 {
    let est = Trajectory::from_world_to_camera(state.trajectory()).unwrap();
    let gt = Trajectory::new(scene.gt_trajectory()).unwrap();
    ate_rmse(&est, &gt, true).unwrap()
}

fn solve_scene(scene: &Scene, cfg: UpdateConfig, seed: u64) -> Result<(SolverState, usize), String> {
    let mut state = SolverState::new(perturbed(scene, seed), cfg).map_err(|e| e.to_string())?;
    let out = run(&mut state, Some(scene as &dyn FlowOracle)).map_err(|e| e.to_string())?;
    Ok((state, out.metrics.len()))
}

fn static_convergence() -> Outcome {
    let scene = generate(&SimConfig::default(), 7).unwrap();
    let (w, h) = scene.intrinsics().shape();
    check((w, h) == (64, 48) && scene.frames().len() == 6, || "wrong scene shape".into())?;
    let (state, iters) = solve_scene(&scene, UpdateConfig::default(), 7)?;
    let a = ate(&state, &scene);
    check(iters <= 8, || format!("{iters} outer iterations"))?;
    check(a < 1e-3, || format!("ATE {a:.3e}"))?;
    Ok(format!("ATE {a:.2e} after {iters} iterations"))
}

fn dual_flow_ablation() -> Outcome {
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let scene = generate(&mover_preset(seed), seed).unwrap();
        let n = scene.frames().len();
        let frac = (0..n).map(|k| scene.dynamic_fraction(k).unwrap()).sum::<f64>() / n as f64;
        check((0.25..=0.35).contains(&frac), || format!("seed {seed}: dynamic fraction {frac:.3}"))?;
        let dual = ate(&solve_scene(&scene, UpdateConfig::default(), seed)?.0, &scene);
        let single_cfg = UpdateConfig {
            single_flow: true,
            ..UpdateConfig::default()
        };
        let single = ate(&solve_scene(&scene, single_cfg, seed)?.0, &scene);
        ratios.push(dual / single);
        if dual <= 0.2 * single {
            wins += 1;
        }
    }
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    check(wins >= 9, || format!("dual flow won {wins} of 10"))?;
    Ok(format!("{wins}/10 scenes, worst ratio {worst:.2e}"))
}

fn artificial_mask_identity() -> Outcome {
    let mut pixels = 0usize;
    for seed in 0..8 {
        let cfg = if seed % 2 == 0 { mover_preset(seed) } else { random_config(seed) };
        let scene = generate(&cfg, seed).unwrap();
        let intr = scene.intrinsics();
        let grid = PixelGrid::for_intrinsics(intr);
        let n = scene.frames().len();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (fi, fj) = (scene.frame(i).unwrap(), scene.frame(j).unwrap());
                let gt = scene.gt_flows(i, j).unwrap();
                let rel = PoseSE3::relative(&fi.gt_pose, &fj.gt_pose);
                let m = artificial_mask(intr, &rel, &fi.gt_inv_depth, &gt.f_o, &grid, 0.5).map_err(|e| e.to_string())?;
                let (w, h) = m.shape();
                for v in 0..h {
                    for u in 0..w {
                        let expected = !gt.f_d.is_valid(u, v) || gt.f_d.norm_at(u, v) <= 0.5;
                        check(m.is_static(u, v) == expected, || {
                            format!("seed {seed} edge {i}->{j} pixel ({u},{v})")
                        })?;
                        pixels += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{pixels} pixels agree"))
}

fn mask_agg_benefit() -> Outcome {
    let loss_cfg = LossConfig::default();
    let mut strict = 0;
    let mut gaps = Vec::new();
    for seed in 0..6 {
        let scene = generate(&mover_preset(seed), seed).unwrap();
        let mut g = scene.frame_graph(3).unwrap();
        let mut mismatches = 0usize;
        for e in g.edges_mut() {
            let (i, j) = (e.i.0 as usize, e.j.0 as usize);
            let gt = scene.gt_flows(i, j).unwrap();
            let label = &scene.frame(i).unwrap().gt_label;
            e.mask = DynamicMask::from_static_flags(&label.map(|&l| l == 0));
            mismatches += label
                .iter()
                .zip(gt.f_d.valid().iter().zip(gt.f_d.du().iter().zip(gt.f_d.dv().iter())))
                .filter(|(&l, (&ok, (&du, &dv)))| l != 0 && ok && (du != 0.0 || dv != 0.0))
                .count();
        }
        let masked = geo_photo_loss(&g, &aggregate_masks(&g).unwrap(), &scene, &loss_cfg).map_err(|e| e.to_string())?;
        let unmasked = geo_photo_loss(&g, &BTreeMap::new(), &scene, &loss_cfg).map_err(|e| e.to_string())?;
        check(masked.value <= unmasked.value, || {
            format!("seed {seed}: masked {:.4e} > unmasked {:.4e}", masked.value, unmasked.value)
        })?;
        if mismatches > 0 {
            check(masked.value < unmasked.value, || format!("seed {seed}: no strict improvement"))?;
            strict += 1;
        }
        gaps.push(unmasked.value - masked.value);
    }
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!("{strict}/6 strict, smallest gap {min_gap:.3e}"))
}

fn confidence_formula() -> Outcome {
    check(sigmoid(0.0) == 0.5, || format!("sigmoid(0) = {}", sigmoid(0.0)))?;
    let s10 = sigmoid(10.0);
    check((s10 - 0.9999546).abs() <= 1e-7, || format!("sigmoid(10) = {s10}"))?;
    let scene = generate(&SimConfig::default(), 3).unwrap();
    let cfg = DbaConfig::default();
    check(cfg.eta == 10.0, || format!("eta = {}", cfg.eta))?;
    let mut base = oracle_graph(&scene, 2);
    perturb(&mut base, 0.02, 0.05, 9).unwrap();
    let (w, h) = base.intrinsics().shape();
    let mut dynamic = base.clone();
    for e in dynamic.edges_mut() {
        e.mask = DynamicMask::all_dynamic(w, h);
    }
    let mut shifted = base;
    for e in shifted.edges_mut() {
        e.confidence_logit = e.confidence_logit.map(|x| x + cfg.eta);
    }
    solve(&mut dynamic, &cfg).map_err(|e| e.to_string())?;
    solve(&mut shifted, &cfg).map_err(|e| e.to_string())?;
    let worst = dynamic
        .frames()
        .iter()
        .zip(shifted.frames())
        .map(|(a, b)| pose_distance(&a.pose, &b.pose))
        .fold(0.0, f64::max);
    check(worst < 1e-9, || format!("pose difference {worst:.3e}"))?;
    Ok(format!("sigmoid(10) = {s10:.7}, pose difference {worst:.1e}"))
}

fn ate_machinery() -> Outcome {
    let scene = generate(&SimConfig::default(), 5).unwrap();
    let gt = Trajectory::new(scene.gt_trajectory()).unwrap();
    let sim = Sim3 {
        scale: 2.7,
        rotation: UnitQuaternion::from_euler_angles(0.4, -1.1, 2.3),
        translation: Vector3::new(3.0, -1.5, 0.25),
    };
    let moved = gt.transformed(&sim);
    let a = ate_rmse(&moved, &gt, true).map_err(|e| e.to_string())?;
    check(a < 1e-9, || format!("realigned ATE {a:.3e}"))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("traj.txt");
    save_tum(&path, &moved).map_err(|e| e.to_string())?;
    let back = load_tum(&path).map_err(|e| e.to_string())?;
    check(back.len() == moved.len(), || "length changed".into())?;
    let mut worst: f64 = 0.0;
    for ((ta, pa), (tb, pb)) in moved.entries().iter().zip(back.entries()) {
        worst = worst.max((ta - tb).abs()).max(pose_distance(pa, pb));
    }
    check(worst < 1e-9, || format!("round trip error {worst:.3e}"))?;
    Ok(format!("realigned ATE {a:.1e}, round trip error {worst:.1e}"))
}

fn loss_constants() -> Outcome {
    let cfg = LossConfig::default();
    let scene = generate(&SimConfig::default(), 1).unwrap();
    let img = &scene.frame(0).unwrap().image;
    let pe = pe_geo(img, img, &cfg).map_err(|e| e.to_string())?;
    check(pe.iter().all(|&x| x == 0.0), || "pe(I, I) is not zero".into())?;
    let l = IterationLosses {
        geo: 0.01,
        flow: 0.2,
        mask: 0.5,
    };
    check((cfg.lambda1, cfg.lambda2, cfg.lambda3) == (100.0, 5.0, 0.05), || "unexpected default weights".into())?;
    let total = total_self_sup_loss(&[l], &cfg).map_err(|e| e.to_string())?;
    check(total == 2.025, || format!("total {total:?}"))?;
    Ok(format!("total {total}"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dualflow"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("scene.json");
    let scene_cfg = serde_json::json!({ "seed": 4, "objects": [
        { "center": [0.2, 0.0, 2.4], "half_extents": [0.4, 0.3], "velocity": [-1.0, 0.4, 0.0] }
    ]});
    std::fs::write(&config, scene_cfg.to_string()).map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for run in 0..2 {
        let sim = tmp.path().join(format!("sim{run}"));
        let sol = tmp.path().join(format!("solve{run}"));
        run_cli(&["simulate", "--config", config.to_str().unwrap(), "--out", sim.to_str().unwrap()])?;
        run_cli(&["solve", sim.to_str().unwrap(), "--out", sol.to_str().unwrap(), "--seed", "2"])?;
        trees.push((read_tree(&sim), read_tree(&sol)));
    }
    let files = trees[0].0.len() + trees[0].1.len();
    check(files > 10, || format!("only {files} files written"))?;
    check(trees[0] == trees[1], || "reruns differ".into())?;
    Ok(format!("{files} files byte-identical"))
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "flow additivity", limit: Duration::from_secs(10), run: flow_additivity },
        Criterion { name: "jacobian correctness", limit: Duration::from_secs(30), run: jacobians },
        Criterion { name: "schur equivalence", limit: Duration::from_secs(10), run: schur_equivalence },
        Criterion { name: "static convergence", limit: Duration::from_secs(60), run: static_convergence },
        Criterion { name: "dual-flow ablation", limit: Duration::from_secs(600), run: dual_flow_ablation },
        Criterion { name: "artificial-mask identity", limit: Duration::from_secs(10), run: artificial_mask_identity },
        Criterion { name: "mask-agg benefit", limit: Duration::from_secs(30), run: mask_agg_benefit },
        Criterion { name: "confidence formula", limit: Duration::from_secs(60), run: confidence_formula },
        Criterion { name: "ATE machinery", limit: Duration::from_secs(60), run: ate_machinery },
        Criterion { name: "loss constants", limit: Duration::from_secs(60), run: loss_constants },
        Criterion { name: "determinism", limit: Duration::from_secs(120), run: determinism },
    ];
    let mut failed = 0;
    for (k, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > c.limit => Err(format!("took longer than {:?}", c.limit)),
            o => o,
        };
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(outcome.is_err());
        println!("{status} {:>2} {:<26} {:>7.2}s  {detail}", k + 1, c.name, elapsed.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
