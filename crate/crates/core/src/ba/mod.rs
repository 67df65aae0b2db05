//! Dense bundle adjustment: joint Gauss-Newton refinement of keyframe poses
//! and per-pixel inverse depth against dense correspondence observations.
//!
//! The energy is a weighted sum of squared reprojection residuals over all
//! directed edges, where each residual compares the observed target position
//! of a source pixel with the position induced by the current poses and the
//! source frame's inverse depth, plus an optional quadratic prior tying
//! inverse depth to a per-frame reference field. Confidence weights are
//! divided by the source pixel's dynamic-uncertainty value when uncertainty
//! weighting is enabled, which is how the uncertainty field down-weights
//! content that violates the rigid model.
//!
//! Each iteration assembles the normal equations, eliminates the depth
//! variables through the Schur complement (they are diagonal), solves the
//! reduced camera system, and back-substitutes. A small Levenberg-Marquardt
//! loop guards against energy increases: a rejected step doubles the damping
//! and is retried once, so the recorded energy sequence is non-increasing by
//! construction.
//!
//! Gauge freedom is pinned automatically: the lowest-id active pose is
//! always held fixed, and when no depth prior is active the same frame's
//! depth is frozen too, anchoring global scale.

mod assemble;
mod schur;

pub use assemble::{assemble_normal_equations, ActiveLayout, DepthBlock, NormalEquations};
pub use schur::{schur_solve, BASolution};

use thiserror::Error;

use crate::frame_graph::FrameGraph;
use crate::geometry::{rigid_correspondence, CameraIntrinsics, SE3Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("singular-system: reduced camera system is not positive definite (eigenvalue range [{min_eig:.3e}, {max_eig:.3e}])")]
    SingularSystem { min_eig: f64, max_eig: f64 },
    #[error("non-finite-energy: the objective evaluated to {value}")]
    NonFiniteEnergy { value: f64 },
    #[error("empty-problem: no correspondence edges among the active keyframes")]
    EmptyProblem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BAConfig {
    /// Gauss-Newton iterations per call.
    pub max_iters: usize,
    /// Initial damping, also the floor it decays back to after accepted
    /// steps.
    pub lm_damping: f64,
    /// Strength of the inverse-depth prior term; zero disables it (and
    /// freezes the anchor frame's depth to fix scale).
    pub gamma_d: f64,
    /// Lower bound on the damped per-pixel depth curvature, so unobserved
    /// pixels never divide by zero.
    pub min_depth_weight: f64,
    /// Inverse depth is clamped to at least this after every update.
    pub depth_floor: f64,
    /// Accepted steps below this norm terminate the iteration early.
    pub step_tolerance: f64,
    /// Keyframe ids whose pose stays fixed, in addition to the automatic
    /// lowest-id anchor.
    pub fixed_poses: Vec<usize>,
    /// Divide confidence weights by the source pixel's uncertainty value.
    pub uncertainty_weighting: bool,
}

impl Default for BAConfig {
    fn default() -> Self {
        Self {
            max_iters: 8,
            lm_damping: 1e-4,
            gamma_d: 0.05,
            min_depth_weight: 1e-8,
            depth_floor: 1e-4,
            step_tolerance: 1e-13,
            fixed_poses: Vec::new(),
            uncertainty_weighting: true,
        }
    }
}

/// Per-component residual weight: observation confidence, optionally
/// divided by the source pixel's uncertainty.
pub(crate) fn effective_weight(w: [f64; 2], u: f64, weighted: bool) -> [f64; 2] {
    if weighted {
        let inv = 1.0 / u.max(1e-12);
        [w[0] * inv, w[1] * inv]
    } else {
        w
    }
}

/// Total bundle adjustment energy over the edges and priors of the active
/// keyframe set, under the current graph state.
pub fn ba_energy(
    graph: &FrameGraph,
    ids: &[usize],
    intr: &CameraIntrinsics,
    config: &BAConfig,
) -> f64 {
    let mut energy = 0.0;
    for (i, j) in graph.edges_within(ids) {
        let kf_i = graph.keyframe(i).expect("edge endpoints exist");
        let kf_j = graph.keyframe(j).expect("edge endpoints exist");
        let obs = graph.edge(i, j).expect("edge exists");
        let g_ij = kf_j.pose.compose(&kf_i.pose.inverse());
        let (warp, valid) = rigid_correspondence(&g_ij, &kf_i.inv_depth, intr);
        for row in 0..intr.height {
            for col in 0..intr.width {
                if !valid.at(row, col) {
                    continue;
                }
                let w_obs = obs.weight.at(row, col);
                if w_obs[0] <= 0.0 && w_obs[1] <= 0.0 {
                    continue;
                }
                let w = effective_weight(
                    w_obs,
                    kf_i.uncertainty.at(row, col),
                    config.uncertainty_weighting,
                );
                let t = obs.target.at(row, col);
                let p = warp.at(row, col);
                let rx = t[0] - p[0];
                let ry = t[1] - p[1];
                energy += w[0] * rx * rx + w[1] * ry * ry;
            }
        }
    }
    if config.gamma_d > 0.0 {
        for &id in ids {
            let kf = graph.keyframe(id).expect("active keyframe exists");
            if let Some(prior) = &kf.depth_prior {
                for (d, p) in kf.inv_depth.as_slice().iter().zip(prior.as_slice()) {
                    let r = d - p;
                    energy += config.gamma_d * r * r;
                }
            }
        }
    }
    energy
}

/// Applies a solved update: left-multiplied pose increments and clamped
/// additive depth increments.
pub fn apply_update(graph: &mut FrameGraph, sol: &BASolution, depth_floor: f64) {
    for (&id, delta) in &sol.pose_delta {
        let kf = graph.keyframe_mut(id).expect("solution frame exists");
        kf.pose = kf.pose.left_update(delta);
    }
    for (&id, delta) in &sol.depth_delta {
        let kf = graph.keyframe_mut(id).expect("solution frame exists");
        let depth = kf.inv_depth.as_mut_slice();
        for (d, dd) in depth.iter_mut().zip(delta) {
            *d = (*d + dd).max(depth_floor);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub energy: f64,
    pub damping: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// `[initial, after iter 1, after iter 2, ...]`; non-increasing.
    pub energies: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub termination: Termination,
}

struct StateSnapshot {
    poses: Vec<(usize, SE3Pose)>,
    depths: Vec<(usize, Vec<f64>)>,
}

fn save_state(graph: &FrameGraph, ids: &[usize]) -> StateSnapshot {
    let mut poses = Vec::with_capacity(ids.len());
    let mut depths = Vec::with_capacity(ids.len());
    for &id in ids {
        let kf = graph.keyframe(id).expect("active keyframe exists");
        poses.push((id, kf.pose));
        depths.push((id, kf.inv_depth.as_slice().to_vec()));
    }
    StateSnapshot { poses, depths }
}

fn restore_state(graph: &mut FrameGraph, snap: &StateSnapshot) {
    for (id, pose) in &snap.poses {
        graph.keyframe_mut(*id).expect("snapshot frame exists").pose = *pose;
    }
    for (id, depth) in &snap.depths {
        graph
            .keyframe_mut(*id)
            .expect("snapshot frame exists")
            .inv_depth
            .as_mut_slice()
            .copy_from_slice(depth);
    }
}

/// Runs up to `config.max_iters` damped Gauss-Newton iterations on the
/// active keyframe set, mutating poses and depths in place.
pub fn ba_iterate(
    graph: &mut FrameGraph,
    ids: &[usize],
    intr: &CameraIntrinsics,
    config: &BAConfig,
) -> Result<ConvergenceReport, SolveError> {
    if graph.edges_within(ids).is_empty() {
        return Err(SolveError::EmptyProblem);
    }
    let mut energy = ba_energy(graph, ids, intr, config);
    if !energy.is_finite() {
        return Err(SolveError::NonFiniteEnergy { value: energy });
    }
    let mut lambda = config.lm_damping;
    let mut energies = vec![energy];
    let mut trace = Vec::with_capacity(config.max_iters);
    let mut termination = Termination::MaxIters;

    for iter in 0..config.max_iters {
        let eqs = assemble_normal_equations(graph, ids, intr, config);
        let snapshot = save_state(graph, ids);
        let mut accepted_step = 0.0;
        let mut accepted = false;
        let mut damping_used = lambda;
        for _attempt in 0..2 {
            damping_used = lambda;
            let sol = schur_solve(&eqs, lambda, config.min_depth_weight)?;
            apply_update(graph, &sol, config.depth_floor);
            let candidate = ba_energy(graph, ids, intr, config);
            if candidate.is_finite() && candidate <= energy {
                energy = candidate;
                accepted_step = sol.step_norm;
                accepted = true;
                lambda = (0.5 * lambda).max(config.lm_damping);
                break;
            }
            restore_state(graph, &snapshot);
            lambda *= 2.0;
        }
        if !accepted {
            damping_used = lambda;
        }
        energies.push(energy);
        trace.push(TraceRow { iter, energy, damping: damping_used, step_norm: accepted_step });
        if accepted && accepted_step < config.step_tolerance {
            termination = Termination::Converged;
            break;
        }
    }
    Ok(ConvergenceReport { energies, trace, termination })
}
