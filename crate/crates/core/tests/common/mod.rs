#![allow(dead_code)]

use dualflow::sim::{generate, ObjectSpec, Scene, SimConfig, TrajectorySpec};
use dualflow::{FrameGraph, Result};

/// Graph at ground truth whose edge targets are the exact optical flow.
pub fn oracle_graph(scene: &Scene, window: usize) -> Result<FrameGraph> {
    let mut g = scene.frame_graph(window)?;
    for e in g.edges_mut() {
        let gt = scene.gt_flows(e.i.0 as usize, e.j.0 as usize)?;
        e.target = gt.f_o.to_correspondence();
        e.optical_flow = gt.f_o;
    }
    Ok(g)
}

pub fn small_config(width: usize, height: usize, n_frames: usize) -> SimConfig {
    SimConfig {
        width,
        height,
        n_frames,
        trajectory: TrajectorySpec::Line {
            velocity: [1.2, 0.4, 0.6],
            rotation_rate: [0.1, -0.2, 0.05],
        },
        ..SimConfig::default()
    }
}

pub fn static_scene(seed: u64) -> Scene {
    generate(&SimConfig::default(), seed).expect("static scene")
}

pub fn mover(center: [f64; 3], half: [f64; 2], velocity: [f64; 3]) -> ObjectSpec {
    ObjectSpec {
        center,
        half_extents: half,
        velocity,
        angular_velocity: [0.0; 3],
    }
}
