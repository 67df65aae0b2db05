//! Assembly of the Gauss-Newton normal equations.
//!
//! The system has a dense pose-pose block `B`, a diagonal depth-depth block
//! `C` (pixels never share a residual), and a pose-depth coupling `E` that
//! is dense only over the handful of pose blocks each source frame actually
//! touches. `E` is therefore stored per source frame as a flat array indexed
//! by (pixel, support slot), which keeps the Schur reduction linear in the
//! number of pixels.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2x6, Vector2};

use crate::frame_graph::FrameGraph;
use crate::geometry::{relative_correspondence_jacobians, CameraIntrinsics};

use super::schur::BASolution;
use super::{effective_weight, BAConfig};

/// Variable layout of one solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveLayout {
    /// Active keyframe ids, ascending.
    pub ids: Vec<usize>,
    /// Keyframe id to pose block index, non-fixed poses only.
    pub pose_index: BTreeMap<usize, usize>,
    /// Frame whose depth is frozen to anchor scale when no prior is active.
    pub frozen_depth: Option<usize>,
    /// Pixels per frame.
    pub n_pixels: usize,
}

impl ActiveLayout {
    pub fn build(ids: &[usize], config: &BAConfig, n_pixels: usize) -> Self {
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let anchor = sorted.first().copied();
        let mut pose_index = BTreeMap::new();
        let mut next = 0usize;
        for &id in &sorted {
            let fixed = Some(id) == anchor || config.fixed_poses.contains(&id);
            if !fixed {
                pose_index.insert(id, next);
                next += 1;
            }
        }
        let frozen_depth = if config.gamma_d == 0.0 { anchor } else { None };
        Self { ids: sorted, pose_index, frozen_depth, n_pixels }
    }

    pub fn n_pose_blocks(&self) -> usize {
        self.pose_index.len()
    }
}

/// Depth-variable block of one source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBlock {
    pub frame: usize,
    /// Pose block indices this frame's depth variables couple to, ascending.
    pub support: Vec<usize>,
    /// Pose-depth coupling, layout `e[(pixel * support.len() + slot) * 6 + k]`.
    pub e: Vec<f64>,
    /// Diagonal depth curvature per pixel.
    pub c: Vec<f64>,
    /// Depth gradient side per pixel.
    pub w: Vec<f64>,
    /// False for the scale-gauge frame, whose depth stays put.
    pub optimized: bool,
}

impl DepthBlock {
    /// The coupling 6-vector of `pixel` against support slot `slot`.
    pub fn e_at(&self, pixel: usize, slot: usize) -> &[f64] {
        let base = (pixel * self.support.len() + slot) * 6;
        &self.e[base..base + 6]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub layout: ActiveLayout,
    /// Pose-pose system, `6 * n_pose_blocks` square.
    pub b: DMatrix<f64>,
    /// Pose gradient side.
    pub v: DVector<f64>,
    /// One block per active keyframe, ascending frame id.
    pub depth: Vec<DepthBlock>,
}

fn scale_rows(m: &Matrix2x6<f64>, w: [f64; 2]) -> Matrix2x6<f64> {
    let mut out = *m;
    for c in 0..6 {
        out[(0, c)] *= w[0];
        out[(1, c)] *= w[1];
    }
    out
}

/// Builds the undamped normal equations at the current graph state. Damping
/// is applied at solve time so one assembly serves retries at different
/// damping levels.
pub fn assemble_normal_equations(
    graph: &FrameGraph,
    ids: &[usize],
    intr: &CameraIntrinsics,
    config: &BAConfig,
) -> NormalEquations {
    let n_pixels = intr.height * intr.width;
    let layout = ActiveLayout::build(ids, config, n_pixels);
    let edges = graph.edges_within(&layout.ids);

    let mut support_sets: BTreeMap<usize, BTreeSet<usize>> =
        layout.ids.iter().map(|&id| (id, BTreeSet::new())).collect();
    for &(i, j) in &edges {
        let set = support_sets.get_mut(&i).expect("edge source is active");
        if let Some(&bi) = layout.pose_index.get(&i) {
            set.insert(bi);
        }
        if let Some(&bj) = layout.pose_index.get(&j) {
            set.insert(bj);
        }
    }

    let mut depth_blocks = Vec::with_capacity(layout.ids.len());
    let mut depth_index = BTreeMap::new();
    for &id in &layout.ids {
        let optimized = layout.frozen_depth != Some(id);
        let support: Vec<usize> = if optimized {
            support_sets[&id].iter().copied().collect()
        } else {
            Vec::new()
        };
        let (e, c, w) = if optimized {
            (vec![0.0; n_pixels * support.len() * 6], vec![0.0; n_pixels], vec![0.0; n_pixels])
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        depth_index.insert(id, depth_blocks.len());
        depth_blocks.push(DepthBlock { frame: id, support, e, c, w, optimized });
    }

    let n6 = 6 * layout.n_pose_blocks();
    let mut b = DMatrix::zeros(n6, n6);
    let mut v = DVector::zeros(n6);

    for &(i, j) in &edges {
        let kf_i = graph.keyframe(i).expect("edge source exists");
        let kf_j = graph.keyframe(j).expect("edge target exists");
        let obs = graph.edge(i, j).expect("edge exists");
        let g_ij = kf_j.pose.compose(&kf_i.pose.inverse());
        let bi = layout.pose_index.get(&i).copied();
        let bj = layout.pose_index.get(&j).copied();
        let block_idx = depth_index[&i];
        let (slot_i, slot_j) = {
            let sup = &depth_blocks[block_idx].support;
            (
                bi.and_then(|blk| sup.binary_search(&blk).ok()),
                bj.and_then(|blk| sup.binary_search(&blk).ok()),
            )
        };
        let n_sup = depth_blocks[block_idx].support.len();
        let block = &mut depth_blocks[block_idx];

        for row in 0..intr.height {
            for col in 0..intr.width {
                let w_obs = obs.weight.at(row, col);
                if w_obs[0] <= 0.0 && w_obs[1] <= 0.0 {
                    continue;
                }
                let d = kf_i.inv_depth.at(row, col);
                let pixel = Vector2::new(col as f64, row as f64);
                let Some(jac) = relative_correspondence_jacobians(&g_ij, intr, &pixel, d) else {
                    continue;
                };
                if !intr.in_bounds(&jac.warped) {
                    continue;
                }
                let t = obs.target.at(row, col);
                let r = Vector2::new(t[0] - jac.warped.x, t[1] - jac.warped.y);
                let w = effective_weight(
                    w_obs,
                    kf_i.uncertainty.at(row, col),
                    config.uncertainty_weighting,
                );
                let wr = Vector2::new(w[0] * r.x, w[1] * r.y);
                let jw_i = scale_rows(&jac.j_pose_i, w);
                let jw_j = scale_rows(&jac.j_pose_j, w);

                if let Some(a) = bi {
                    let g = jac.j_pose_i.tr_mul(&wr);
                    for k in 0..6 {
                        v[6 * a + k] += g[k];
                    }
                    let m = jac.j_pose_i.tr_mul(&jw_i);
                    for rr in 0..6 {
                        for cc in 0..6 {
                            b[(6 * a + rr, 6 * a + cc)] += m[(rr, cc)];
                        }
                    }
                    if let Some(bb) = bj {
                        let m = jac.j_pose_i.tr_mul(&jw_j);
                        for rr in 0..6 {
                            for cc in 0..6 {
                                b[(6 * a + rr, 6 * bb + cc)] += m[(rr, cc)];
                                b[(6 * bb + cc, 6 * a + rr)] += m[(rr, cc)];
                            }
                        }
                    }
                }
                if let Some(bb) = bj {
                    let g = jac.j_pose_j.tr_mul(&wr);
                    for k in 0..6 {
                        v[6 * bb + k] += g[k];
                    }
                    let m = jac.j_pose_j.tr_mul(&jw_j);
                    for rr in 0..6 {
                        for cc in 0..6 {
                            b[(6 * bb + rr, 6 * bb + cc)] += m[(rr, cc)];
                        }
                    }
                }

                if block.optimized {
                    let p = row * intr.width + col;
                    let jd_w = Vector2::new(w[0] * jac.j_depth.x, w[1] * jac.j_depth.y);
                    block.c[p] += jd_w.dot(&jac.j_depth);
                    block.w[p] += jd_w.dot(&r);
                    if let Some(slot) = slot_i {
                        let e6 = jac.j_pose_i.tr_mul(&jd_w);
                        let base = (p * n_sup + slot) * 6;
                        for k in 0..6 {
                            block.e[base + k] += e6[k];
                        }
                    }
                    if let Some(slot) = slot_j {
                        let e6 = jac.j_pose_j.tr_mul(&jd_w);
                        let base = (p * n_sup + slot) * 6;
                        for k in 0..6 {
                            block.e[base + k] += e6[k];
                        }
                    }
                }
            }
        }
    }

    if config.gamma_d > 0.0 {
        for block in &mut depth_blocks {
            if !block.optimized {
                continue;
            }
            let kf = graph.keyframe(block.frame).expect("active keyframe exists");
            if let Some(prior) = &kf.depth_prior {
                let depth = kf.inv_depth.as_slice();
                let prior = prior.as_slice();
                for p in 0..n_pixels {
                    block.c[p] += config.gamma_d;
                    block.w[p] += config.gamma_d * (prior[p] - depth[p]);
                }
            }
        }
    }

    NormalEquations { layout, b, v, depth: depth_blocks }
}

impl NormalEquations {
    /// Total number of optimized depth variables.
    pub fn n_depth_vars(&self) -> usize {
        self.depth.iter().filter(|b| b.optimized).count() * self.layout.n_pixels
    }

    /// Materializes the full damped system `[B+L, E; E^T, C']` with
    /// variables ordered as pose blocks followed by the optimized depth
    /// blocks in ascending frame order. Intended for small problems and
    /// cross-checks; the production path never builds this matrix.
    pub fn dense_system(&self, lambda: f64, min_depth_weight: f64) -> (DMatrix<f64>, DVector<f64>) {
        let n6 = 6 * self.layout.n_pose_blocks();
        let nd = self.n_depth_vars();
        let mut h = DMatrix::zeros(n6 + nd, n6 + nd);
        let mut rhs = DVector::zeros(n6 + nd);
        h.view_mut((0, 0), (n6, n6)).copy_from(&self.b);
        for k in 0..n6 {
            h[(k, k)] += lambda;
            rhs[k] = self.v[k];
        }
        let mut off = n6;
        for block in &self.depth {
            if !block.optimized {
                continue;
            }
            let n_sup = block.support.len();
            for p in 0..self.layout.n_pixels {
                let cp = (block.c[p] + lambda).max(min_depth_weight);
                h[(off + p, off + p)] = cp;
                rhs[off + p] = block.w[p];
                for (slot, &blk) in block.support.iter().enumerate() {
                    let base = (p * n_sup + slot) * 6;
                    for k in 0..6 {
                        let val = block.e[base + k];
                        h[(6 * blk + k, off + p)] = val;
                        h[(off + p, 6 * blk + k)] = val;
                    }
                }
            }
            off += self.layout.n_pixels;
        }
        (h, rhs)
    }

    /// Stacks a solution into the variable order of [`Self::dense_system`].
    pub fn flatten_solution(&self, sol: &BASolution) -> DVector<f64> {
        let n6 = 6 * self.layout.n_pose_blocks();
        let mut x = DVector::zeros(n6 + self.n_depth_vars());
        for (id, blk) in &self.layout.pose_index {
            let delta = &sol.pose_delta[id];
            for k in 0..6 {
                x[6 * blk + k] = delta[k];
            }
        }
        let mut off = n6;
        for block in &self.depth {
            if !block.optimized {
                continue;
            }
            let delta = &sol.depth_delta[&block.frame];
            for p in 0..self.layout.n_pixels {
                x[off + p] = delta[p];
            }
            off += self.layout.n_pixels;
        }
        x
    }
}
