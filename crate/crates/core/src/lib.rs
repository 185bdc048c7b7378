//! Dual-flow dynamic visual odometry backend.
//!
//! Splits measured optical flow into a static part, explained by camera
//! motion and depth, and a dynamic part, produced by moving objects. The
//! static part drives a masked dense bundle adjustment over keyframe poses
//! and per-pixel inverse depth.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod correlation;
pub mod dba;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod grid;
pub mod io;
pub mod photometric;
pub mod se3;
pub mod sim;
pub mod traj;
pub mod update;

pub use error::{Error, Result};
pub use graph::{FrameGraph, FrameId};
pub use grid::{Grid, Image};
pub use se3::{PoseSE3, Twist};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

// The guide's code blocks run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/dba.md")]
    mod dba {}
    #[doc = include_str!("../../../book/src/update_loop.md")]
    mod update_loop {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
