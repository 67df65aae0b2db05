//! Schur-complement solve of the assembled normal equations.
//!
//! Depth variables are diagonal, so they are eliminated pixel by pixel: each
//! pixel subtracts a rank-one outer product of its pose-coupling vector from
//! the reduced camera system. The reduced system is solved by Cholesky and
//! depth increments are recovered by back-substitution.

use std::collections::BTreeMap;

use nalgebra::{DVector, Vector6};

use super::assemble::NormalEquations;
use super::SolveError;

/// Increments produced by one solve, keyed by keyframe id.
#[derive(Debug, Clone, PartialEq)]
pub struct BASolution {
    pub pose_delta: BTreeMap<usize, Vector6<f64>>,
    pub depth_delta: BTreeMap<usize, Vec<f64>>,
    /// Euclidean norm of the full stacked increment.
    pub step_norm: f64,
}

/// Solves the damped system. `lambda` is added to the pose diagonal and the
/// per-pixel depth curvature; the damped curvature is additionally clamped
/// below by `min_depth_weight` so unobserved pixels stay inert instead of
/// dividing by zero.
pub fn schur_solve(
    eqs: &NormalEquations,
    lambda: f64,
    min_depth_weight: f64,
) -> Result<BASolution, SolveError> {
    let n_blocks = eqs.layout.n_pose_blocks();
    let n6 = 6 * n_blocks;
    let n_pixels = eqs.layout.n_pixels;

    let mut s = eqs.b.clone();
    for k in 0..n6 {
        s[(k, k)] += lambda;
    }
    let mut rhs = eqs.v.clone();

    for block in &eqs.depth {
        if !block.optimized || block.support.is_empty() {
            continue;
        }
        let n_sup = block.support.len();
        for p in 0..n_pixels {
            let cp = (block.c[p] + lambda).max(min_depth_weight);
            if cp <= 0.0 {
                // A pixel with no curvature has no couplings either; it
                // drops out of the reduced system instead of dividing by
                // zero.
                continue;
            }
            let inv_c = 1.0 / cp;
            let wp = block.w[p];
            let row = &block.e[p * n_sup * 6..(p + 1) * n_sup * 6];
            for (sa, &a) in block.support.iter().enumerate() {
                let ea = &row[sa * 6..sa * 6 + 6];
                for k in 0..6 {
                    rhs[6 * a + k] -= ea[k] * wp * inv_c;
                }
                for (sb, &bb) in block.support.iter().enumerate() {
                    let eb = &row[sb * 6..sb * 6 + 6];
                    for r in 0..6 {
                        let f = ea[r] * inv_c;
                        let row_base = 6 * a + r;
                        for c in 0..6 {
                            s[(row_base, 6 * bb + c)] -= f * eb[c];
                        }
                    }
                }
            }
        }
    }

    let pose = if n6 > 0 {
        match s.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                let eigs = s.symmetric_eigenvalues();
                return Err(SolveError::SingularSystem { min_eig: eigs.min(), max_eig: eigs.max() });
            }
        }
    } else {
        DVector::zeros(0)
    };

    let mut step_sq: f64 = pose.norm_squared();
    let mut pose_delta = BTreeMap::new();
    for (&id, &blk) in &eqs.layout.pose_index {
        pose_delta.insert(id, Vector6::from_column_slice(&pose.as_slice()[6 * blk..6 * blk + 6]));
    }

    let mut depth_delta = BTreeMap::new();
    for block in &eqs.depth {
        if !block.optimized {
            continue;
        }
        let n_sup = block.support.len();
        let mut dd = vec![0.0; n_pixels];
        for p in 0..n_pixels {
            let cp = (block.c[p] + lambda).max(min_depth_weight);
            if cp <= 0.0 {
                continue;
            }
            let mut acc = block.w[p];
            let row = &block.e[p * n_sup * 6..(p + 1) * n_sup * 6];
            for (sa, &a) in block.support.iter().enumerate() {
                let ea = &row[sa * 6..sa * 6 + 6];
                for k in 0..6 {
                    acc -= ea[k] * pose[6 * a + k];
                }
            }
            dd[p] = acc / cp;
            step_sq += dd[p] * dd[p];
        }
        depth_delta.insert(block.frame, dd);
    }

    Ok(BASolution { pose_delta, depth_delta, step_norm: step_sq.sqrt() })
}
