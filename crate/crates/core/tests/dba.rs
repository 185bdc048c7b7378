mod common;

use common::{oracle_graph, small_config, static_scene};
use dualflow::dba::{
    apply_step, build_system, combine_confidence, cost, cost_gradient, gauss_newton_step, residuals, solve,
    BaProblem, DbaConfig,
};
use dualflow::flow::DynamicMask;
use dualflow::grid::Grid;
use dualflow::se3::{pose_distance, PoseSE3, Twist};
use dualflow::sim::{generate, perturb};
use dualflow::{Error, FrameGraph, FrameId};
use nalgebra::{Vector2, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_weights(g: &FrameGraph, rng: &mut ChaCha8Rng) -> Vec<Grid<f64>> {
    let (w, h) = g.intrinsics().shape();
    g.edges()
        .iter()
        .map(|_| Grid::from_fn(w, h, |_, _| rng.random_range(0.05..1.0)))
        .collect()
}

/// Small problem: `n` frames at `w × h`, perturbed away from the targets.
fn random_problem(seed: u64, n: usize, w: usize, h: usize) -> FrameGraph {
    let scene = generate(&small_config(w, h, n), seed).unwrap();
    let mut g = oracle_graph(&scene, 2).unwrap();
    perturb(&mut g, 0.03, 0.05, seed + 100).unwrap();
    g
}

#[test]
fn zero_residuals_at_ground_truth() {
    let scene = static_scene(1);
    let g = oracle_graph(&scene, 2).unwrap();
    let p = BaProblem::new(&g, &DbaConfig::default()).unwrap();
    for r in residuals(&p).unwrap() {
        for (x, ok) in r.values.iter().zip(r.valid.iter()) {
            if *ok {
                assert!(x.amax() < 1e-9);
            }
        }
    }
    let step = gauss_newton_step(&p).unwrap();
    assert!(step.max_twist_norm() < 1e-9);
    assert!(step.max_depth_step() < 1e-9);
}

#[test]
fn cost_matches_scalar_accumulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_problem(2, 4, 12, 10);
    let weights = random_weights(&g, &mut rng);
    let p = BaProblem::new(&g, &DbaConfig::default())
        .unwrap()
        .with_weights(weights.clone())
        .unwrap();
    let intr = g.intrinsics();
    let mut expected = 0.0;
    for (e, w) in g.edges().iter().zip(&weights) {
        let fi = g.frame(e.i).unwrap();
        let fj = g.frame(e.j).unwrap();
        for v in 0..10 {
            for u in 0..12 {
                if !e.target.valid[(u, v)] {
                    continue;
                }
                let d = fi.inv_depth[(u, v)];
                let x = fi.pose.inverse().act(&intr.unproject(&Vector2::new(u as f64, v as f64), d).unwrap());
                let xc = fj.pose.act(&x);
                if xc.z <= 1e-4 {
                    continue;
                }
                let px = intr.fx * xc.x / xc.z + intr.cx;
                let py = intr.fy * xc.y / xc.z + intr.cy;
                let t = e.target.coords[(u, v)];
                expected += w[(u, v)] * ((t.x - px).powi(2) + (t.y - py).powi(2));
            }
        }
    }
    let got = cost(&p).unwrap();
    assert!((got - expected).abs() < 1e-9 * expected.max(1.0), "{got} vs {expected}");
}

#[test]
fn schur_matches_dense_solve() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 + (seed as usize % 2);
        let g = random_problem(seed + 10, n, 8, 8);
        let p = BaProblem::new(&g, &DbaConfig::default())
            .unwrap()
            .with_weights(random_weights(&g, &mut rng))
            .unwrap();
        let sys = build_system(&p).unwrap();
        assert!(sys.n_depths() <= 4 * 64);
        let (dxi, dd) = sys.solve_schur().unwrap();
        let (hm, gv) = sys.to_dense();
        assert_eq!(hm, hm.transpose());
        let full = hm.clone().lu().solve(&gv).unwrap();
        let np = 6 * sys.n_poses;
        let mut worst = 0.0f64;
        for k in 0..np {
            worst = worst.max((full[k] - dxi[k]).abs());
        }
        for (k, x) in dd.iter().enumerate() {
            worst = worst.max((full[np + k] - x).abs());
        }
        assert!(worst < 1e-8, "seed {seed}: {worst}");
    }
}

#[test]
fn cost_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5u64 {
        let g = random_problem(seed + 20, 4, 10, 8);
        let weights = random_weights(&g, &mut rng);
        let eval = |g: &FrameGraph| {
            cost(&BaProblem::new(g, &DbaConfig::default()).unwrap().with_weights(weights.clone()).unwrap()).unwrap()
        };
        let p = BaProblem::new(&g, &DbaConfig::default()).unwrap().with_weights(weights.clone()).unwrap();
        let (grads, _) = cost_gradient(&p).unwrap();
        for (id, grad) in grads {
            for k in 0..6 {
                let h = 1e-6;
                let mut e = Vector6::zeros();
                e[k] = h;
                let shifted = |s: f64| {
                    let mut g2 = g.clone();
                    let pose = g2.frame(id).unwrap().pose.retract(&Twist::from_vector(&(e * s)));
                    g2.set_pose(id, pose).unwrap();
                    eval(&g2)
                };
                let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
                let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
                assert!(rel < 1e-5, "frame {id} axis {k}: fd {fd} analytic {}", grad[k]);
            }
        }
    }
}

#[test]
fn one_step_recovers_single_pose() {
    let scene = generate(&small_config(32, 24, 3), 7).unwrap();
    let mut g = oracle_graph(&scene, 2).unwrap();
    let id = FrameId(2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dir = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
    let pose = g.frame(id).unwrap().pose.retract(&Twist::from_vector(&(dir * 0.05)));
    g.set_pose(id, pose).unwrap();
    // Depths stay at ground truth; only the pose is wrong.
    let cfg = DbaConfig::default();
    let before = cost(&BaProblem::new(&g, &cfg).unwrap()).unwrap();
    let step = gauss_newton_step(&BaProblem::new(&g, &cfg).unwrap()).unwrap();
    apply_step(&mut g, &step).unwrap();
    let after = cost(&BaProblem::new(&g, &cfg).unwrap()).unwrap();
    assert!(after <= 0.1 * before, "{before} -> {after}");
}

#[test]
fn solve_recovers_six_frame_sequence() {
    let scene = static_scene(8);
    let gt = oracle_graph(&scene, 3).unwrap();
    let mut g = gt.clone();
    perturb(&mut g, 0.02, 0.05, 8).unwrap();
    let fixed_before: Vec<PoseSE3> = g.frames().iter().filter(|f| f.fixed).map(|f| f.pose).collect();
    let report = solve(&mut g, &DbaConfig::default()).unwrap();
    let costs: Vec<f64> = report.log.iter().map(|r| r.cost).collect();
    for w in costs.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12), "cost increased: {costs:?}");
    }
    let fixed_after: Vec<PoseSE3> = g.frames().iter().filter(|f| f.fixed).map(|f| f.pose).collect();
    assert_eq!(fixed_before, fixed_after);
    for (a, b) in g.frames().iter().zip(gt.frames()) {
        let err = PoseSE3::relative(&b.pose, &a.pose).log().unwrap().norm();
        assert!(err < 1e-3, "frame {} twist error {err}", a.id);
    }
    assert!(pose_distance(&g.frames()[5].pose, &gt.frames()[5].pose) < 1e-3);
}

#[test]
fn converged_input_is_left_alone() {
    let scene = static_scene(9);
    let mut g = oracle_graph(&scene, 2).unwrap();
    let before = g.clone();
    let cfg = DbaConfig::default();
    let report = solve(&mut g, &cfg).unwrap();
    assert!(report.log.len() <= 2);
    for (a, b) in g.frames().iter().zip(before.frames()) {
        assert!(PoseSE3::relative(&a.pose, &b.pose).log().unwrap().norm() < 1e-8);
    }
}

#[test]
fn mask_weighting_equals_shifted_logits() {
    let scene = static_scene(10);
    let mut base = oracle_graph(&scene, 2).unwrap();
    perturb(&mut base, 0.02, 0.05, 10).unwrap();
    let cfg = DbaConfig::default();
    let (w, h) = base.intrinsics().shape();

    let mut dynamic = base.clone();
    for e in dynamic.edges_mut() {
        e.mask = DynamicMask::all_dynamic(w, h);
    }
    let mut shifted = base.clone();
    for e in shifted.edges_mut() {
        e.confidence_logit = e.confidence_logit.map(|x| x + cfg.eta);
    }
    let c = combine_confidence(&Grid::filled(w, h, 0.0), &DynamicMask::all_dynamic(w, h), cfg.eta).unwrap();
    assert!((c.weights[(0, 0)] - 0.9999546).abs() < 1e-7);

    solve(&mut dynamic, &cfg).unwrap();
    solve(&mut shifted, &cfg).unwrap();
    for (a, b) in dynamic.frames().iter().zip(shifted.frames()) {
        assert!(pose_distance(&a.pose, &b.pose) < 1e-9);
    }
}

#[test]
fn fixed_frames_are_immutable() {
    let scene = static_scene(11);
    let mut g = scene.frame_graph(2).unwrap();
    let id = g.frames()[0].id;
    let pose = g.frames()[0].pose.retract(&Twist::from_vector(&Vector6::repeat(0.01)));
    assert!(matches!(g.set_pose(id, pose), Err(Error::FixedFrame(_))));
}

#[test]
fn gauge_and_free_frame_preconditions() {
    let scene = generate(&small_config(8, 8, 2), 1).unwrap();
    let g = scene.frame_graph(1).unwrap();
    assert!(matches!(BaProblem::new(&g, &DbaConfig::default()), Err(Error::NoFreeFrames)));
}
