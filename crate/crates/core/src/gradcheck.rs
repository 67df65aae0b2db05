//! Finite-difference validation of the analytic derivatives.
//!
//! Two families of checks, both runnable in bulk over seeded random
//! instances: the parameter gradient of the uncertainty objective against
//! central differences, and the gradient sides (pose `v`, depth `w`) of the
//! bundle adjustment normal equations against `-1/2` times central
//! differences of the energy.
//!
//! Instances are built to be differentiation-safe: pixels whose warp sits
//! within a tiny margin of a validity boundary (image border, near plane)
//! get their observation weight zeroed so the finite-difference probes never
//! cross a masking discontinuity. The uncertainty objective needs no such
//! guard because its sample set is fixed before differentiation and does not
//! depend on the head parameters.

use nalgebra::{DVector, Vector2, Vector6};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ba::{assemble_normal_equations, ba_energy, BAConfig};
use crate::field::{FeatureMap, PixelField2, ScalarField};
use crate::frame_graph::{EdgeObservation, FrameGraph, KeyframeState};
use crate::geometry::{
    backproject, project, rigid_correspondence, se3_exp, CameraIntrinsics, SE3Pose, Z_MIN,
};
use crate::uncertainty::{
    build_similarities, similarity_energy, theta_gradient, AffineUncertaintyModel,
    SimilarityCoupling, UncertaintyConfig,
};

/// Outcome of one bulk derivative check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub trials: usize,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Where the worst deviation occurred.
    pub worst_case: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} trials, max rel error {:.3e} (tolerance {:.0e}), worst at {} -> {}",
            self.name,
            self.trials,
            self.max_rel_error,
            self.tolerance,
            self.worst_case,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn rel_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
}

fn random_pose(rng: &mut ChaCha8Rng, t_scale: f64, r_scale: f64) -> SE3Pose {
    se3_exp(&Vector6::new(
        rng.gen_range(-t_scale..t_scale),
        rng.gen_range(-t_scale..t_scale),
        rng.gen_range(-t_scale..t_scale),
        rng.gen_range(-r_scale..r_scale),
        rng.gen_range(-r_scale..r_scale),
        rng.gen_range(-r_scale..r_scale),
    ))
}

fn random_depth(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ScalarField {
    let mut d = ScalarField::filled(h, w, 0.0);
    for v in d.as_mut_slice() {
        *v = rng.gen_range(0.3..0.8);
    }
    d
}

fn random_features(rng: &mut ChaCha8Rng, h: usize, w: usize, channels: usize) -> FeatureMap {
    let mut m = FeatureMap::zeros(h, w, channels);
    for p in 0..h * w {
        let px = m.pixel_mut(p / w, p % w);
        let mut norm = 0.0;
        for v in px.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
            norm += *v * *v;
        }
        let norm = norm.sqrt().max(1e-9);
        for v in px.iter_mut() {
            *v /= norm;
        }
    }
    m
}

/// Random multi-frame graph for uncertainty checks. `spread` scales the
/// inter-frame translations; large values push part of the warps out of
/// bounds, exercising the sample masking.
pub fn random_uncertainty_instance(
    seed: u64,
    channels: usize,
    spread: f64,
) -> (FrameGraph, Vec<(usize, usize)>, CameraIntrinsics) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let intr = CameraIntrinsics::new(11.0, 11.0, 6.5, 4.5, 10, 14);
    let n_frames = 3;
    let mut graph = FrameGraph::new();
    for f in 0..n_frames {
        let pose = if f == 0 {
            SE3Pose::identity()
        } else {
            random_pose(&mut rng, spread, 0.04)
        };
        let mut features = random_features(&mut rng, 10, 14, channels);
        // A few zero-feature pixels exercise the norm mask.
        for _ in 0..3 {
            let p = rng.gen_range(0..10 * 14);
            for v in features.pixel_mut(p / 14, p % 14) {
                *v = 0.0;
            }
        }
        graph
            .insert_keyframe(KeyframeState::new(
                f,
                f as f64 * 0.1,
                pose,
                random_depth(&mut rng, 10, 14),
                features,
            ))
            .unwrap();
    }
    let mut pairs = Vec::new();
    for i in 0..n_frames {
        for j in 0..n_frames {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    (graph, pairs, intr)
}

/// Bulk check of the uncertainty parameter gradient over a grid of channel
/// counts, prior strengths, and both coupling modes.
pub fn check_theta_gradient(trials: usize, seed: u64) -> GradCheckReport {
    let channel_grid = [4usize, 8, 16];
    let gamma_grid = [0.0, 0.01, 0.1];
    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    for t in 0..trials {
        let channels = channel_grid[t % 3];
        let gamma = gamma_grid[(t / 3) % 3];
        let coupling = if t % 2 == 0 {
            SimilarityCoupling::SourceTarget
        } else {
            SimilarityCoupling::SourceSquared
        };
        // Every third instance uses wide baselines so warps leave the grid.
        let spread = if t % 3 == 2 { 0.45 } else { 0.12 };
        let (graph, pairs, intr) = random_uncertainty_instance(seed + t as u64, channels, spread);
        let sims = build_similarities(&graph, &pairs, &intr);
        let config = UncertaintyConfig { gamma_prior: gamma, coupling, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7919 * t as u64);
        let theta = DVector::from_fn(channels + 1, |_, _| rng.gen_range(-0.6..0.6));
        let mut model = AffineUncertaintyModel::new(channels);
        model.set_theta(theta.clone()).expect("dimensions match");
        let g = theta_gradient(&graph, &sims, &model, &config).expect("dimensions match");
        let h = 1e-5;
        for k in 0..channels + 1 {
            let mut mp = model.clone();
            let mut tp = theta.clone();
            tp[k] += h;
            mp.set_theta(tp).unwrap();
            let mut mm = model.clone();
            let mut tm = theta.clone();
            tm[k] -= h;
            mm.set_theta(tm).unwrap();
            let ep = similarity_energy(&graph, &sims, &mp, &config).unwrap();
            let em = similarity_energy(&graph, &sims, &mm, &config).unwrap();
            let fd = (ep - em) / (2.0 * h);
            let rel = rel_error(g[k], fd);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("trial {t}, theta[{k}] (C={channels}, gamma={gamma})");
            }
        }
    }
    GradCheckReport {
        name: "uncertainty-parameter-gradient",
        trials,
        tolerance: 1e-4,
        max_rel_error: max_rel,
        worst_case: worst,
    }
}

/// Zeroes observation weights of pixels whose warp sits within a safety
/// margin of any validity boundary, so energy differentiation never crosses
/// a mask change.
fn sanitize_edge_weights(graph: &mut FrameGraph, i: usize, j: usize, intr: &CameraIntrinsics) {
    let margin_px = 1e-3;
    let margin_z = 1e-4;
    let (g_ij, depths): (SE3Pose, Vec<f64>) = {
        let kf_i = graph.keyframe(i).unwrap();
        let kf_j = graph.keyframe(j).unwrap();
        (kf_j.pose.compose(&kf_i.pose.inverse()), kf_i.inv_depth.as_slice().to_vec())
    };
    let (h, w) = (intr.height, intr.width);
    let mut dead = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let d = depths[row * w + col];
            let ok = d > 1e-3
                && {
                    let x = backproject(intr, &Vector2::new(col as f64, row as f64), d).unwrap();
                    let y = g_ij.transform(&x);
                    y.z > Z_MIN + margin_z && {
                        let (p, vis) = project(intr, &y);
                        vis && p.x > margin_px
                            && p.y > margin_px
                            && p.x < (w - 1) as f64 - margin_px
                            && p.y < (h - 1) as f64 - margin_px
                    }
                };
            if !ok {
                dead.push((row, col));
            }
        }
    }
    if let Some(mut edge) = graph.remove_edge(i, j) {
        for (row, col) in dead {
            edge.weight.set(row, col, [0.0, 0.0]);
        }
        graph.insert_edge(i, j, edge).unwrap();
    }
}

/// Random bundle adjustment problem (3 to 6 poses, 4x4 to 8x8 grid) with
/// noisy targets, random confidence and uncertainty fields, occasional
/// priors, and differentiation-safe masking.
pub fn random_ba_instance(seed: u64) -> (FrameGraph, Vec<usize>, CameraIntrinsics, BAConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(3));
    let h = rng.gen_range(4..=8);
    let w = rng.gen_range(4..=8);
    let intr = CameraIntrinsics::new(
        0.9 * w as f64,
        0.9 * w as f64,
        (w as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
        h,
        w,
    );
    let n_frames = rng.gen_range(3..=6);
    let gamma_d = if rng.gen_bool(0.5) { 0.05 } else { 0.0 };
    let mut graph = FrameGraph::new();
    let mut poses = Vec::new();
    for f in 0..n_frames {
        let pose =
            if f == 0 { SE3Pose::identity() } else { random_pose(&mut rng, 0.08, 0.03) };
        poses.push(pose);
        let mut kf = KeyframeState::new(
            f,
            f as f64 * 0.1,
            pose,
            random_depth(&mut rng, h, w),
            FeatureMap::zeros(h, w, 2),
        );
        for u in kf.uncertainty.as_mut_slice() {
            *u = rng.gen_range(0.3..2.0);
        }
        if gamma_d > 0.0 && rng.gen_bool(0.7) {
            let mut prior = kf.inv_depth.clone();
            for p in prior.as_mut_slice() {
                *p += rng.gen_range(-0.08..0.08);
            }
            kf.depth_prior = Some(prior);
        }
        graph.insert_keyframe(kf).unwrap();
    }
    for i in 0..n_frames {
        for j in 0..n_frames {
            if i == j {
                continue;
            }
            let g_ij = poses[j].compose(&poses[i].inverse());
            let (warp, valid) =
                rigid_correspondence(&g_ij, &graph.keyframe(i).unwrap().inv_depth, &intr);
            let mut target = PixelField2::filled(h, w, [0.0, 0.0]);
            let mut weight = PixelField2::filled(h, w, [0.0, 0.0]);
            for row in 0..h {
                for col in 0..w {
                    if !valid.at(row, col) {
                        continue;
                    }
                    let p = warp.at(row, col);
                    target.set(
                        row,
                        col,
                        [p[0] + rng.gen_range(-0.4..0.4), p[1] + rng.gen_range(-0.4..0.4)],
                    );
                    weight.set(row, col, [rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)]);
                }
            }
            graph.insert_edge(i, j, EdgeObservation { target, weight }).unwrap();
            sanitize_edge_weights(&mut graph, i, j, &intr);
        }
    }
    let config = BAConfig {
        gamma_d,
        uncertainty_weighting: rng.gen_bool(0.5),
        ..BAConfig::default()
    };
    (graph, (0..n_frames).collect(), intr, config)
}

/// Bulk check that the assembled gradient sides equal `-1/2` times the
/// energy derivative: `v` against pose increments, `w` against depth values,
/// on a random subset of pixels.
pub fn check_ba_gradient(trials: usize, seed: u64) -> GradCheckReport {
    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    for t in 0..trials {
        let (mut graph, ids, intr, config) = random_ba_instance(seed + t as u64);
        let eqs = assemble_normal_equations(&graph, &ids, &intr, &config);
        let h = 1e-6;

        for (&id, &blk) in &eqs.layout.pose_index.clone() {
            for k in 0..6 {
                let mut delta = Vector6::zeros();
                delta[k] = h;
                let original = graph.keyframe(id).unwrap().pose;
                graph.keyframe_mut(id).unwrap().pose = original.left_update(&delta);
                let ep = ba_energy(&graph, &ids, &intr, &config);
                delta[k] = -h;
                graph.keyframe_mut(id).unwrap().pose = original.left_update(&delta);
                let em = ba_energy(&graph, &ids, &intr, &config);
                graph.keyframe_mut(id).unwrap().pose = original;
                let fd = -0.5 * (ep - em) / (2.0 * h);
                let rel = rel_error(eqs.v[6 * blk + k], fd);
                if rel > max_rel {
                    max_rel = rel;
                    worst = format!("trial {t}, pose {id} coord {k}");
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64) << 17);
        for block in &eqs.depth {
            if !block.optimized {
                continue;
            }
            for _ in 0..12 {
                let p = rng.gen_range(0..eqs.layout.n_pixels);
                let (row, col) = (p / intr.width, p % intr.width);
                let original = graph.keyframe(block.frame).unwrap().inv_depth.at(row, col);
                graph.keyframe_mut(block.frame).unwrap().inv_depth.set(row, col, original + h);
                let ep = ba_energy(&graph, &ids, &intr, &config);
                graph.keyframe_mut(block.frame).unwrap().inv_depth.set(row, col, original - h);
                let em = ba_energy(&graph, &ids, &intr, &config);
                graph.keyframe_mut(block.frame).unwrap().inv_depth.set(row, col, original);
                let fd = -0.5 * (ep - em) / (2.0 * h);
                let rel = rel_error(block.w[p], fd);
                if rel > max_rel {
                    max_rel = rel;
                    worst = format!("trial {t}, frame {} depth pixel {p}", block.frame);
                }
            }
        }
    }
    GradCheckReport {
        name: "bundle-adjustment-gradient-sides",
        trials,
        tolerance: 1e-5,
        max_rel_error: max_rel,
        worst_case: worst,
    }
}
