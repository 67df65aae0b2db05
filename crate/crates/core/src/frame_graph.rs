//! Keyframe graph: per-keyframe state (pose, inverse depth, uncertainty,
//! features, optional depth prior) plus directed correspondence edges.
//!
//! Edges are directed: `(i, j)` carries the dense targets and confidences of
//! frame `i`'s pixels observed in frame `j`. Both containers are ordered
//! maps so every traversal of the graph is deterministic.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::field::{FeatureMap, PixelField2, ScalarField};
use crate::geometry::{rigid_correspondence, CameraIntrinsics, SE3Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("missing-keyframe: keyframe {id} is not in the graph")]
    MissingKeyframe { id: usize },
    #[error("duplicate-keyframe: keyframe {id} already exists")]
    DuplicateKeyframe { id: usize },
    #[error("self-edge: edge ({i}, {j}) must connect distinct keyframes")]
    SelfEdge { i: usize, j: usize },
    #[error("duplicate-edge: edge ({i}, {j}) already exists")]
    DuplicateEdge { i: usize, j: usize },
}

/// Dense correspondence observation along one directed edge: per-pixel
/// target positions in the destination frame and per-component confidence
/// weights. Invisible pixels carry zero weight.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeObservation {
    pub target: PixelField2,
    pub weight: PixelField2,
}

/// All optimizable and derived state of one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeState {
    pub frame_index: usize,
    pub timestamp: f64,
    /// World-to-camera pose.
    pub pose: SE3Pose,
    pub inv_depth: ScalarField,
    /// Dynamic-uncertainty field, in the open range `(0, inf)`.
    pub uncertainty: ScalarField,
    pub features: FeatureMap,
    /// Optional per-pixel inverse-depth prior used by the depth
    /// regularization term.
    pub depth_prior: Option<ScalarField>,
}

impl KeyframeState {
    /// New keyframe with the uncertainty field at its neutral initial value
    /// (the zero-parameter output of the uncertainty head).
    pub fn new(
        frame_index: usize,
        timestamp: f64,
        pose: SE3Pose,
        inv_depth: ScalarField,
        features: FeatureMap,
    ) -> Self {
        let u = ScalarField::filled(inv_depth.height(), inv_depth.width(), std::f64::consts::LN_2);
        Self { frame_index, timestamp, pose, inv_depth, uncertainty: u, features, depth_prior: None }
    }
}

/// The keyframe graph. Keyframes are keyed by their source frame index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameGraph {
    keyframes: BTreeMap<usize, KeyframeState>,
    edges: BTreeMap<(usize, usize), EdgeObservation>,
}

impl FrameGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_keyframe(&mut self, state: KeyframeState) -> Result<(), GraphError> {
        let id = state.frame_index;
        if self.keyframes.contains_key(&id) {
            return Err(GraphError::DuplicateKeyframe { id });
        }
        self.keyframes.insert(id, state);
        Ok(())
    }

    pub fn keyframe(&self, id: usize) -> Option<&KeyframeState> {
        self.keyframes.get(&id)
    }

    pub fn keyframe_mut(&mut self, id: usize) -> Option<&mut KeyframeState> {
        self.keyframes.get_mut(&id)
    }

    /// Keyframe ids in ascending frame order.
    pub fn keyframe_ids(&self) -> Vec<usize> {
        self.keyframes.keys().copied().collect()
    }

    pub fn n_keyframes(&self) -> usize {
        self.keyframes.len()
    }

    /// The most recent `n` keyframe ids, ascending.
    pub fn window_ids(&self, n: usize) -> Vec<usize> {
        let ids = self.keyframe_ids();
        let start = ids.len().saturating_sub(n);
        ids[start..].to_vec()
    }

    pub fn insert_edge(&mut self, i: usize, j: usize, obs: EdgeObservation) -> Result<(), GraphError> {
        if i == j {
            return Err(GraphError::SelfEdge { i, j });
        }
        for id in [i, j] {
            if !self.keyframes.contains_key(&id) {
                return Err(GraphError::MissingKeyframe { id });
            }
        }
        if self.edges.contains_key(&(i, j)) {
            return Err(GraphError::DuplicateEdge { i, j });
        }
        self.edges.insert((i, j), obs);
        Ok(())
    }

    pub fn edge(&self, i: usize, j: usize) -> Option<&EdgeObservation> {
        self.edges.get(&(i, j))
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains_key(&(i, j))
    }

    pub fn remove_edge(&mut self, i: usize, j: usize) -> Option<EdgeObservation> {
        self.edges.remove(&(i, j))
    }

    /// Directed edge keys in ascending order.
    pub fn edge_keys(&self) -> Vec<(usize, usize)> {
        self.edges.keys().copied().collect()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edge keys whose endpoints both lie in `ids`.
    pub fn edges_within(&self, ids: &[usize]) -> Vec<(usize, usize)> {
        self.edges
            .keys()
            .filter(|(i, j)| ids.contains(i) && ids.contains(j))
            .copied()
            .collect()
    }

    /// Line-oriented dump of the graph for logs and golden tests: one
    /// `KF id timestamp tx ty tz qx qy qz qw` record per keyframe (the
    /// stored world-to-camera pose) followed by one `EDGE i j` record per
    /// directed edge.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (id, kf) in &self.keyframes {
            let t = kf.pose.translation;
            let q = kf.pose.rotation;
            out.push_str(&format!(
                "KF {id} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
                kf.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            ));
        }
        for (i, j) in self.edges.keys() {
            out.push_str(&format!("EDGE {i} {j}\n"));
        }
        out
    }
}

/// Ordered keyframe pairs within `radius` of each other in window position,
/// both directions, lexicographic order.
pub fn window_pairs(ids: &[usize], radius: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (a, &i) in ids.iter().enumerate() {
        for (b, &j) in ids.iter().enumerate() {
            if a == b {
                continue;
            }
            if a.abs_diff(b) <= radius {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Mean rigid-flow magnitude from keyframe `a` to keyframe `b` under their
/// current poses and `a`'s current depth: the average displacement of valid
/// pixels between their rest position and the induced correspondence.
/// `None` when no pixel projects validly.
pub fn mean_flow_distance(
    a: &KeyframeState,
    b: &KeyframeState,
    intr: &CameraIntrinsics,
) -> Option<f64> {
    let g_ab = b.pose.compose(&a.pose.inverse());
    let (warp, valid) = rigid_correspondence(&g_ab, &a.inv_depth, intr);
    let mut sum = 0.0;
    let mut n = 0usize;
    for row in 0..a.inv_depth.height() {
        for col in 0..a.inv_depth.width() {
            if !valid.at(row, col) {
                continue;
            }
            let p = warp.at(row, col);
            let dx = p[0] - col as f64;
            let dy = p[1] - row as f64;
            sum += (dx * dx + dy * dy).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}
