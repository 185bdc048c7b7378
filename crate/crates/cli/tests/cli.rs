use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dualflow::flow::{DynamicMask, FlowField};
use dualflow::io::{read_flo, read_mask_pgm, write_flo, write_mask_pgm};
use dualflow::traj::{load_tum, save_tum, Sim3};
use dualflow_cli::manifest::{read_manifest, sha256_hex};
use nalgebra::{UnitQuaternion, Vector3};
use tempfile::TempDir;

fn dualflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualflow")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn mover_config(dir: &Path) -> PathBuf {
    let path = dir.join("scene.json");
    let cfg = r#"{
  "seed": 3,
  "objects": [
    { "center": [0.1, 0.0, 2.2], "half_extents": [0.5, 0.4], "velocity": [-1.2, 0.3, 0.0] }
  ]
}"#;
    std::fs::write(&path, cfg).unwrap();
    path
}

fn simulate(dir: &TempDir, config: Option<&Path>) -> PathBuf {
    let out = dir.path().join("sim");
    let mut args = vec!["simulate", "--out", s(&out)];
    if let Some(c) = config {
        args.extend(["--config", s(c)]);
    }
    let o = dualflow(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn simulate_writes_every_stream_and_a_manifest() {
    let dir = TempDir::new().unwrap();
    let out = simulate(&dir, None);
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.command, "simulate");
    assert_eq!(m.metrics["n_frames"], 6.0);
    let count = |stream: &str| m.outputs.iter().filter(|f| f.stream == stream).count();
    assert_eq!(count("images"), 6);
    assert_eq!(count("inv_depth"), 6);
    assert_eq!(count("flow_optical"), 5);
    assert_eq!(count("masks"), 5);
    assert_eq!(count("trajectory"), 1);
    for f in &m.outputs {
        let bytes = std::fs::read(out.join(&f.path)).unwrap();
        assert_eq!(sha256_hex(&bytes), f.sha256, "{}", f.path);
    }
    assert_eq!(load_tum(out.join("gt_trajectory.txt")).unwrap().len(), 6);
}

#[test]
fn simulate_reports_json_errors_with_position() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"width\": 64,\n  \"height\": oops\n}").unwrap();
    let o = dualflow(&["simulate", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn simulate_rejects_degenerate_scenes() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("one.json");
    std::fs::write(&cfg, r#"{ "n_frames": 1 }"#).unwrap();
    let o = dualflow(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = TempDir::new().unwrap();
    let cfg = mover_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(dualflow(&["simulate", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(dualflow(&["simulate", "--config", s(&cfg), "--out", s(&b), "--seed", "4"]).status.success());
    let (ma, mb) = (read_manifest(&a).unwrap(), read_manifest(&b).unwrap());
    assert_eq!((ma.seed, mb.seed), (3, 4));
    assert_eq!(ma.config_sha256, mb.config_sha256);
    assert_ne!(
        std::fs::read(a.join("images/000.pgm")).unwrap(),
        std::fs::read(b.join("images/000.pgm")).unwrap()
    );
}

#[test]
fn solve_and_eval_on_a_static_scene() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(&dir, None);
    let out = dir.path().join("solve");
    let o = dualflow(&["solve", s(&sim), "--out", s(&out), "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.command, "solve");
    assert_eq!(m.metrics["converged"], 1.0);
    assert!(m.metrics["iterations"] <= 8.0);
    assert!(m.metrics["ate"] < 1e-3);
    let losses = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    assert!(losses.starts_with("iter,geo,flow,mask,total\n"));
    assert_eq!(m.outputs.iter().filter(|f| f.stream == "flow_dynamic").count(), 30);

    let o = dualflow(&["eval", s(&out.join("trajectory.txt")), s(&sim.join("gt_trajectory.txt"))]);
    assert!(o.status.success());
    let text = stdout(&o);
    let fields: Vec<f64> = text.trim().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(fields.len(), 4);
    assert!(fields[0] < 1e-3, "{text}");
}

#[test]
fn single_flow_flag_is_recorded_and_used() {
    let dir = TempDir::new().unwrap();
    let cfg = mover_config(dir.path());
    let sim = simulate(&dir, Some(&cfg));
    let dual = dir.path().join("dual");
    let single = dir.path().join("single");
    assert!(dualflow(&["solve", s(&sim), "--out", s(&dual)]).status.success());
    assert!(dualflow(&["solve", s(&sim), "--out", s(&single), "--single-flow"]).status.success());
    let (md, ms) = (read_manifest(&dual).unwrap(), read_manifest(&single).unwrap());
    assert!(md.metrics["dynamic_fraction"] > 0.05);
    assert_eq!(ms.metrics["dynamic_fraction"], 0.0);
    assert!(md.metrics["ate"] < 0.2 * ms.metrics["ate"]);
}

#[test]
fn solve_run_config_and_bad_overrides() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(&dir, None);
    let run = dir.path().join("run.json");
    std::fs::write(&run, r#"{ "window": 2, "max_outer_iters": 1, "pose_sigma": 0.01 }"#).unwrap();
    let out = dir.path().join("solve");
    let o = dualflow(&["solve", s(&sim), "--config", s(&run), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.metrics["iterations"], 1.0);
    assert_eq!(m.config_sha256, sha256_hex(&std::fs::read(&run).unwrap()));
    // Window 2 over 6 frames: 9 neighbouring pairs in both directions.
    assert_eq!(m.outputs.iter().filter(|f| f.stream == "masks").count(), 18);

    let o = dualflow(&["solve", s(&sim), "--out", s(&out), "--mu", "-1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dualflow(&["solve", s(&sim), "--out", s(&out), "--provider", "magic"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solve_without_scene_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let o = dualflow(&["solve", s(&dir.path().join("missing")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_undoes_similarity_transforms() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(&dir, None);
    let gt_path = sim.join("gt_trajectory.txt");
    let gt = load_tum(&gt_path).unwrap();
    let moved = gt.transformed(&Sim3 {
        scale: 0.4,
        rotation: UnitQuaternion::from_euler_angles(0.3, 0.2, -0.9),
        translation: Vector3::new(1.0, 2.0, 3.0),
    });
    let est = dir.path().join("est.txt");
    save_tum(&est, &moved).unwrap();
    let o = dualflow(&["eval", s(&est), s(&gt_path)]);
    assert_eq!(stdout(&o), "0.000000,0.000000,0.000000,0.000000\n");
    let o = dualflow(&["eval", s(&est), s(&gt_path), "--no-scale"]);
    let rigid: f64 = stdout(&o).split(',').next().unwrap().parse().unwrap();
    assert!(rigid > 1e-3);
}

#[test]
fn eval_rejects_malformed_trajectories() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "# t x y z qx qy qz qw\n0.0 1 2 3 0 0 0 1\n0.1 1 2 3 0 0 0 2\n").unwrap();
    let o = dualflow(&["eval", s(&bad), s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":3"));
    let o = dualflow(&["eval", s(&dir.path().join("nope.txt")), s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn decompose_recovers_simulated_dynamic_flow() {
    let dir = TempDir::new().unwrap();
    let cfg = mover_config(dir.path());
    let sim = simulate(&dir, Some(&cfg));
    let out = dir.path().join("dec");
    let o = dualflow(&[
        "decompose",
        "--flow",
        s(&sim.join("flows/002_003_o.flo")),
        "--traj",
        s(&sim.join("gt_trajectory.txt")),
        "--depth",
        s(&sim.join("inv_depth/002.pfm")),
        "--frames",
        "2",
        "3",
        "--out",
        s(&out),
        "--gt-mask",
        s(&sim.join("masks/002_003.pgm")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("dynamic_fraction,iou"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!(row[0] > 0.05, "{text}");
    assert_eq!(row[1], 1.0, "{text}");

    let expected = read_flo(sim.join("flows/002_003_d.flo")).unwrap();
    let got = read_flo(out.join("flow_d.flo")).unwrap();
    let (w, h) = got.shape();
    for v in 0..h {
        for u in 0..w {
            assert_eq!(got.is_valid(u, v), expected.is_valid(u, v));
            if got.is_valid(u, v) {
                // Both sides went through f32 files.
                assert!((got.at(u, v) - expected.at(u, v)).amax() < 1e-4);
            }
        }
    }
    assert_eq!(read_mask_pgm(out.join("mask.pgm")).unwrap(), read_mask_pgm(sim.join("masks/002_003.pgm")).unwrap());
}

#[test]
fn decompose_of_static_flow_is_all_static() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(&dir, None);
    let out = dir.path().join("dec");
    let all_static = dir.path().join("static.pgm");
    write_mask_pgm(&all_static, &DynamicMask::all_static(64, 48)).unwrap();
    let o = dualflow(&[
        "decompose",
        "--flow",
        s(&sim.join("flows/000_001_s.flo")),
        "--traj",
        s(&sim.join("gt_trajectory.txt")),
        "--depth",
        s(&sim.join("inv_depth/000.pfm")),
        "--out",
        s(&out),
        "--gt-mask",
        s(&all_static),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "dynamic_fraction,iou\n0.000000,1.000000\n");
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.outputs.len(), 3);
}

#[test]
fn decompose_rejects_mismatched_shapes() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(&dir, None);
    let flow = dir.path().join("small.flo");
    write_flo(&flow, &FlowField::zeros(32, 24)).unwrap();
    let o = dualflow(&[
        "decompose",
        "--flow",
        s(&flow),
        "--traj",
        s(&sim.join("gt_trajectory.txt")),
        "--depth",
        s(&sim.join("inv_depth/000.pfm")),
        "--out",
        s(&dir.path().join("dec")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_jacobian() {
    let o = dualflow(&["gradcheck", "--instances", "10"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("check,max_rel_err,samples,status\n"));
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",pass")), "{text}");

    let o = dualflow(&["gradcheck", "--instances", "10", "--break-jacobian"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn numerical_failure_keeps_partial_outputs() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(&dir, None);
    let run = dir.path().join("wild.json");
    std::fs::write(&run, r#"{ "pose_sigma": 1.0, "depth_sigma": 2.0 }"#).unwrap();
    let out = dir.path().join("solve");
    let o = dualflow(&["solve", s(&sim), "--config", s(&run), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.metrics["converged"], 0.0);
    assert_eq!(load_tum(out.join("trajectory.txt")).unwrap().len(), 6);
}

#[test]
fn decompose_of_zero_flow_without_motion_is_all_static() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(&dir, None);
    let flow = dir.path().join("zero.flo");
    write_flo(&flow, &FlowField::zeros(64, 48)).unwrap();
    let out = dir.path().join("dec");
    let o = dualflow(&[
        "decompose",
        "--flow",
        s(&flow),
        "--traj",
        s(&sim.join("gt_trajectory.txt")),
        "--depth",
        s(&sim.join("inv_depth/004.pfm")),
        "--frames",
        "4",
        "4",
        "--mu",
        "0.25",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "dynamic_fraction\n0.000000\n");
    assert_eq!(read_mask_pgm(out.join("mask.pgm")).unwrap(), DynamicMask::all_static(64, 48));
}
