//! Co-visibility graph over keyframes.
//!
//! Nodes are keyframes carrying a pose (world-to-camera) and an inverse-depth
//! map. A directed edge `(i, j)` means frame `i`'s pixels are matched into
//! frame `j`; it owns everything that lives on frame `i`'s grid for that pair:
//! the static BA target, confidence logits, dynamic mask, dynamic flow and the
//! measured optical flow.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::camera::{CorrespondenceField, Intrinsics, InverseDepthMap, PixelGrid};
use crate::correlation::FeatureMap;
use crate::error::{Error, Result};
use crate::flow::{static_flow, DynamicMask, FlowField};
use crate::grid::{Grid, Image};
use crate::se3::PoseSE3;

/// Keyframes buffered before the graph is first built.
pub const INIT_FRAMES: usize = 12;
/// Temporal window for initial edges and the number of neighbors a new
/// keyframe connects to.
pub const NEIGHBOR_WINDOW: usize = 3;
/// Admission band for mean static-flow distance between keyframes, pixels.
pub const MIN_KEYFRAME_FLOW: f64 = 8.0;
pub const MAX_KEYFRAME_FLOW: f64 = 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameId(pub u32);

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: FrameId,
    pub timestamp: f64,
    pub image: Image,
    pub features: Option<FeatureMap>,
    pub pose: PoseSE3,
    pub inv_depth: InverseDepthMap,
    pub fixed: bool,
}

impl Frame {
    pub fn new(id: FrameId, timestamp: f64, image: Image, pose: PoseSE3, inv_depth: InverseDepthMap) -> Self {
        Frame {
            id,
            timestamp,
            image,
            features: None,
            pose,
            inv_depth,
            fixed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub i: FrameId,
    pub j: FrameId,
    /// Static BA target `p*_s` in frame `j`.
    pub target: CorrespondenceField,
    pub confidence_logit: Grid<f64>,
    pub mask: DynamicMask,
    pub dyn_flow: FlowField,
    /// Last measured optical flow.
    pub optical_flow: FlowField,
}

impl Edge {
    /// Fresh edge state: no targets yet, zero logits, all pixels static, zero
    /// dynamic flow.
    pub fn new(i: FrameId, j: FrameId, width: usize, height: usize) -> Self {
        Edge {
            i,
            j,
            target: CorrespondenceField::invalid(width, height),
            confidence_logit: Grid::filled(width, height, 0.0),
            mask: DynamicMask::all_static(width, height),
            dyn_flow: FlowField::zeros(width, height),
            optical_flow: FlowField::from_fn(width, height, |_, _| None),
        }
    }

    pub fn key(&self) -> (FrameId, FrameId) {
        (self.i, self.j)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameGraph {
    intrinsics: Intrinsics,
    frames: Vec<Frame>,
    frame_index: BTreeMap<FrameId, usize>,
    edges: Vec<Edge>,
    edge_index: BTreeMap<(FrameId, FrameId), usize>,
}

impl FrameGraph {
    /// Empty graph for images of the given camera.
    pub fn new(intrinsics: Intrinsics) -> Self {
        FrameGraph {
            intrinsics,
            frames: Vec::new(),
            frame_index: BTreeMap::new(),
            edges: Vec::new(),
            edge_index: BTreeMap::new(),
        }
    }

    /// Builds the initial graph from the first [`INIT_FRAMES`] buffered
    /// frames, connecting frames within [`NEIGHBOR_WINDOW`] of each other in
    /// both directions and fixing the first two poses.
    pub fn initialize(intrinsics: Intrinsics, frames: Vec<Frame>) -> Result<Self> {
        if frames.len() < INIT_FRAMES {
            return Err(Error::InsufficientFrames {
                required: INIT_FRAMES,
                actual: frames.len(),
            });
        }
        let frames = frames.into_iter().take(INIT_FRAMES).collect();
        Self::with_window(intrinsics, frames, NEIGHBOR_WINDOW)
    }

    /// Same topology as [`FrameGraph::initialize`] for any number (≥ 2) of
    /// frames and window size.
    pub fn with_window(intrinsics: Intrinsics, frames: Vec<Frame>, window: usize) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InsufficientFrames {
                required: 2,
                actual: frames.len(),
            });
        }
        let mut g = FrameGraph::new(intrinsics);
        for (k, mut f) in frames.into_iter().enumerate() {
            f.fixed = k < 2;
            g.insert_frame(f)?;
        }
        let ids: Vec<FrameId> = g.frames.iter().map(|f| f.id).collect();
        for a in 0..ids.len() {
            for b in a + 1..ids.len().min(a + window + 1) {
                g.add_edge(ids[a], ids[b])?;
                g.add_edge(ids[b], ids[a])?;
            }
        }
        Ok(g)
    }

    pub fn insert_frame(&mut self, frame: Frame) -> Result<()> {
        if self.frame_index.contains_key(&frame.id) {
            return Err(Error::DuplicateFrame(frame.id));
        }
        frame.inv_depth.ensure_shape(self.intrinsics.shape())?;
        frame.image.ensure_shape(self.intrinsics.shape())?;
        self.frame_index.insert(frame.id, self.frames.len());
        self.frames.push(frame);
        Ok(())
    }

    /// Adds a keyframe and connects it both ways to its
    /// [`NEIGHBOR_WINDOW`] temporally nearest keyframes (ties broken by id).
    pub fn add_keyframe(&mut self, frame: Frame) -> Result<Vec<FrameId>> {
        let (id, t) = (frame.id, frame.timestamp);
        if self.frame_index.contains_key(&id) {
            return Err(Error::DuplicateFrame(id));
        }
        let neighbors = self.nearest_frames(t, NEIGHBOR_WINDOW);
        self.insert_frame(frame)?;
        for &n in &neighbors {
            self.add_edge(id, n)?;
            self.add_edge(n, id)?;
        }
        Ok(neighbors)
    }

    /// Up to `k` frame ids sorted by `|Δt|` to `timestamp`.
    pub fn nearest_frames(&self, timestamp: f64, k: usize) -> Vec<FrameId> {
        let mut cands: Vec<(f64, FrameId)> = self
            .frames
            .iter()
            .map(|f| ((f.timestamp - timestamp).abs(), f.id))
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cands.into_iter().take(k).map(|(_, id)| id).collect()
    }

    /// Inserts a directed edge; also the entry point for manually supplied
    /// loop-closure pairs.
    pub fn add_edge(&mut self, i: FrameId, j: FrameId) -> Result<()> {
        if i == j {
            return Err(Error::InvalidEdge(i, j, "self edge"));
        }
        self.frame(i)?;
        self.frame(j)?;
        if self.edge_index.contains_key(&(i, j)) {
            return Err(Error::InvalidEdge(i, j, "duplicate edge"));
        }
        let (w, h) = self.intrinsics.shape();
        self.edge_index.insert((i, j), self.edges.len());
        self.edges.push(Edge::new(i, j, w, h));
        Ok(())
    }

    #[inline]
    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edges_mut(&mut self) -> &mut [Edge] {
        &mut self.edges
    }

    pub fn frame(&self, id: FrameId) -> Result<&Frame> {
        self.frame_index
            .get(&id)
            .map(|&k| &self.frames[k])
            .ok_or(Error::UnknownFrame(id))
    }

    pub fn frame_mut(&mut self, id: FrameId) -> Result<&mut Frame> {
        match self.frame_index.get(&id) {
            Some(&k) => Ok(&mut self.frames[k]),
            None => Err(Error::UnknownFrame(id)),
        }
    }

    pub fn frame_position(&self, id: FrameId) -> Option<usize> {
        self.frame_index.get(&id).copied()
    }

    pub fn edge(&self, i: FrameId, j: FrameId) -> Option<&Edge> {
        self.edge_index.get(&(i, j)).map(|&k| &self.edges[k])
    }

    pub fn edge_mut(&mut self, i: FrameId, j: FrameId) -> Option<&mut Edge> {
        self.edge_index.get(&(i, j)).map(|&k| &mut self.edges[k])
    }

    /// Edges whose source is `id`, in insertion order.
    pub fn outgoing(&self, id: FrameId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.i == id)
    }

    pub fn incoming(&self, id: FrameId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.j == id)
    }

    pub fn fixed_count(&self) -> usize {
        self.frames.iter().filter(|f| f.fixed).count()
    }

    /// Sets the pose of a free frame.
    pub fn set_pose(&mut self, id: FrameId, pose: PoseSE3) -> Result<()> {
        let f = self.frame_mut(id)?;
        if f.fixed {
            return Err(Error::FixedFrame(id));
        }
        f.pose = pose;
        Ok(())
    }

    /// Checks that every edge endpoint exists and the indices match the
    /// stored frames and edges.
    pub fn check_consistency(&self) -> bool {
        let frames_ok = self.frame_index.len() == self.frames.len()
            && self
                .frame_index
                .iter()
                .all(|(id, &k)| self.frames.get(k).is_some_and(|f| f.id == *id));
        let edges_ok = self.edge_index.len() == self.edges.len()
            && self.edge_index.iter().all(|(key, &k)| {
                self.edges.get(k).is_some_and(|e| e.key() == *key)
                    && key.0 != key.1
                    && self.frame_index.contains_key(&key.0)
                    && self.frame_index.contains_key(&key.1)
            });
        frames_ok && edges_ok
    }

    /// Mean magnitude of the static flow from `i` to `j` under the current
    /// poses and depths.
    pub fn mean_flow_distance(&self, i: FrameId, j: FrameId) -> Result<f64> {
        let fi = self.frame(i)?;
        let fj = self.frame(j)?;
        let grid = PixelGrid::for_intrinsics(&self.intrinsics);
        let flow = static_flow(&self.intrinsics, &fi.pose, &fj.pose, &fi.inv_depth, &grid)?;
        flow.mean_magnitude().ok_or(Error::NoValidPixels(i, j))
    }

    /// True when the mean flow distance lies in the keyframe admission band.
    pub fn admits_keyframe(distance: f64) -> bool {
        (MIN_KEYFRAME_FLOW..=MAX_KEYFRAME_FLOW).contains(&distance)
    }

    /// Line-oriented debug dump: `NODE id timestamp fixed` then `EDGE i j`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for f in &self.frames {
            let _ = writeln!(s, "NODE {} {:.9} {}", f.id, f.timestamp, u8::from(f.fixed));
        }
        for e in &self.edges {
            let _ = writeln!(s, "EDGE {} {}", e.i, e.j);
        }
        s
    }
}
