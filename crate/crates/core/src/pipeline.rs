//! End-to-end session orchestration: keyframe accumulation, sliding-window
//! tracking with interleaved pose-depth and uncertainty optimization, global
//! refinement with a frozen uncertainty head, and recovery of a full
//! per-frame trajectory by pose interpolation.
//!
//! The pipeline consumes frames through the [`FrameDataProvider`] trait so
//! that the synthetic simulator and any future recorded-data source plug in
//! identically, and it is fully deterministic: the same provider, config,
//! and seed produce a bitwise-identical [`SessionResult`].

use std::collections::BTreeSet;

use nalgebra::DVector;
use thiserror::Error;

use crate::ba::{ba_iterate, BAConfig, ConvergenceReport, SolveError};
use crate::eval::Trajectory;
use crate::features::{synth_features, FeatureNoiseSpec};
use crate::field::{FeatureMap, ScalarField};
use crate::frame_graph::{
    mean_flow_distance, window_pairs, EdgeObservation, FrameGraph, GraphError, KeyframeState,
};
use crate::geometry::{
    se3_exp, se3_interpolate, se3_log, CameraIntrinsics, GeometryError, SE3Pose,
};
use crate::scene::{depth_prior, observe_correspondence, ObservationNoise, SyntheticSequence};
use crate::uncertainty::{
    build_similarities, direct_field_step, field_energy, gradient_descent_phase,
    refresh_uncertainty, AffineUncertaintyModel, SimilarityCoupling, UncertaintyConfig,
    UncertaintyError,
};

/// Floor applied by the head-free uncertainty update so fields stay positive.
const DIRECT_FIELD_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("init-underflow: stream ended after {accepted} keyframes, {required} required")]
    InitUnderflow { accepted: usize, required: usize },
    #[error("extrapolation-unsupported: t={t} outside keyframe span [{lo}, {hi}]")]
    ExtrapolationUnsupported { t: f64, lo: f64, hi: f64 },
    /// A pose-depth solve failed; `phase` and `iter` locate the failing
    /// optimization phase and its global iteration counter at entry.
    #[error("solve-failed in phase {phase}, iteration {iter}: {source}")]
    Solve { phase: String, iter: usize, source: SolveError },
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Source of per-frame data for a tracking session. Implementations must be
/// deterministic: repeated calls with the same arguments return identical
/// values.
pub trait FrameDataProvider {
    fn intrinsics(&self) -> CameraIntrinsics;
    fn n_frames(&self) -> usize;
    fn timestamp(&self, frame: usize) -> f64;
    fn features(&self, frame: usize) -> FeatureMap;
    /// Optional per-pixel inverse-depth prior for `frame`.
    fn depth_prior(&self, frame: usize) -> Option<ScalarField>;
    /// Dense correspondence observation from frame `i` to frame `j`.
    fn observe(&self, i: usize, j: usize) -> EdgeObservation;
}

/// [`FrameDataProvider`] backed by the synthetic scene simulator.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    pub sequence: SyntheticSequence,
    pub noise: ObservationNoise,
    pub feature_noise: FeatureNoiseSpec,
    pub channels: usize,
    pub with_depth_prior: bool,
    pub seed: u64,
}

impl SyntheticProvider {
    /// Noiseless provider over `sequence` with 16 feature channels and depth
    /// priors enabled.
    pub fn new(sequence: SyntheticSequence, seed: u64) -> Self {
        Self {
            sequence,
            noise: ObservationNoise::noiseless(),
            feature_noise: FeatureNoiseSpec::clean(),
            channels: 16,
            with_depth_prior: true,
            seed,
        }
    }
}

impl FrameDataProvider for SyntheticProvider {
    fn intrinsics(&self) -> CameraIntrinsics {
        self.sequence.intrinsics()
    }

    fn n_frames(&self) -> usize {
        self.sequence.timestamps.len()
    }

    fn timestamp(&self, frame: usize) -> f64 {
        self.sequence.timestamps[frame]
    }

    fn features(&self, frame: usize) -> FeatureMap {
        synth_features(&self.sequence, frame, self.channels, &self.feature_noise, self.seed)
    }

    fn depth_prior(&self, frame: usize) -> Option<ScalarField> {
        self.with_depth_prior
            .then(|| depth_prior(&self.sequence, frame, &self.noise, self.seed))
    }

    fn observe(&self, i: usize, j: usize) -> EdgeObservation {
        observe_correspondence(&self.sequence, i, j, &self.noise, self.seed)
    }
}

/// Feature switches for ablation runs. All off reproduces the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AblationFlags {
    /// Disable the uncertainty machinery entirely; BA weights are the raw
    /// observation confidences.
    pub no_uba: bool,
    /// Drop the inverse-depth prior term and initialize depth at constant 1.
    pub no_depth_prior: bool,
    /// Score similarity against the source uncertainty only, squared.
    pub coupled_similarity: bool,
    /// Optimize the uncertainty fields directly instead of through the
    /// affine head.
    pub no_affine_map: bool,
    /// Remove parameter decay from the uncertainty update.
    pub no_weight_decay: bool,
    /// Remove the logarithmic prior from the uncertainty objective.
    pub no_prior_term: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 6] = [
        "no_uba",
        "no_depth_prior",
        "coupled_similarity",
        "no_affine_map",
        "no_weight_decay",
        "no_prior_term",
    ];

    /// Sets the flag named `name`; returns false when no flag matches.
    pub fn set(&mut self, name: &str, value: bool) -> bool {
        match name {
            "no_uba" => self.no_uba = value,
            "no_depth_prior" => self.no_depth_prior = value,
            "coupled_similarity" => self.coupled_similarity = value,
            "no_affine_map" => self.no_affine_map = value,
            "no_weight_decay" => self.no_weight_decay = value,
            "no_prior_term" => self.no_prior_term = value,
            _ => return false,
        }
        true
    }

    /// The single-flag variant named `name`, or all-off for "full".
    pub fn variant(name: &str) -> Option<Self> {
        let mut flags = Self::default();
        if name == "full" || flags.set(name, true) {
            Some(flags)
        } else {
            None
        }
    }
}

/// All tunables of a tracking session.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Keyframes accumulated before the first optimization.
    pub init_keyframes: usize,
    /// Keyframes in the sliding optimization window.
    pub window_size: usize,
    /// Temporal radius of window edges.
    pub edge_radius: usize,
    /// Maximum mean rigid flow (pixels) for a window edge to be kept.
    pub window_max_flow: f64,
    /// Minimum observed mean flow (pixels) for a frame to become a keyframe.
    pub motion_threshold: f64,
    /// Alternation rounds per frontend step.
    pub interleave_rounds: usize,
    /// Alternation rounds for the initialization window.
    pub init_rounds: usize,
    /// Pose-depth Gauss-Newton iterations per round.
    pub gn_steps_per_phase: usize,
    /// Uncertainty gradient steps per round.
    pub gd_steps_per_phase: usize,
    /// Temporal radius of unconditional global edges.
    pub global_radius: usize,
    /// Mean-flow cutoff (pixels) for long-range global edges.
    pub global_max_flow: f64,
    /// Gauss-Newton iterations of the final global refinement.
    pub global_gn_steps: usize,
    /// Re-zero the affine head parameters whenever a keyframe is accepted.
    pub reset_theta_per_window: bool,
    pub ba: BAConfig,
    pub uncertainty: UncertaintyConfig,
    pub ablation: AblationFlags,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            init_keyframes: 12,
            window_size: 8,
            edge_radius: 3,
            window_max_flow: 16.0,
            motion_threshold: 2.4,
            interleave_rounds: 4,
            init_rounds: 8,
            gn_steps_per_phase: 2,
            gd_steps_per_phase: 4,
            global_radius: 2,
            global_max_flow: 8.0,
            global_gn_steps: 16,
            reset_theta_per_window: false,
            ba: BAConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl PipelineConfig {
    /// The uncertainty settings with ablation flags applied and the step
    /// count bound to the per-phase budget.
    pub fn effective_uncertainty(&self) -> UncertaintyConfig {
        UncertaintyConfig {
            gamma_prior: if self.ablation.no_prior_term { 0.0 } else { self.uncertainty.gamma_prior },
            weight_decay: if self.ablation.no_weight_decay { 0.0 } else { self.uncertainty.weight_decay },
            steps: self.gd_steps_per_phase,
            coupling: if self.ablation.coupled_similarity {
                SimilarityCoupling::SourceSquared
            } else {
                self.uncertainty.coupling
            },
            ..self.uncertainty.clone()
        }
    }

    /// The solver settings with ablation flags applied, an iteration budget,
    /// and an extra set of fixed poses.
    pub fn effective_ba(&self, max_iters: usize, fixed_poses: Vec<usize>) -> BAConfig {
        BAConfig {
            max_iters,
            fixed_poses,
            uncertainty_weighting: self.ba.uncertainty_weighting && !self.ablation.no_uba,
            gamma_d: if self.ablation.no_depth_prior { 0.0 } else { self.ba.gamma_d },
            ..self.ba.clone()
        }
    }

    /// Every setting as `(key, value)` pairs for logging and export.
    pub fn echo(&self) -> Vec<(String, String)> {
        let coupling = match self.uncertainty.coupling {
            SimilarityCoupling::SourceTarget => "source_target",
            SimilarityCoupling::SourceSquared => "source_squared",
        };
        let mut out: Vec<(String, String)> = vec![
            ("init_keyframes".into(), self.init_keyframes.to_string()),
            ("window_size".into(), self.window_size.to_string()),
            ("edge_radius".into(), self.edge_radius.to_string()),
            ("window_max_flow".into(), format!("{}", self.window_max_flow)),
            ("motion_threshold".into(), format!("{}", self.motion_threshold)),
            ("interleave_rounds".into(), self.interleave_rounds.to_string()),
            ("init_rounds".into(), self.init_rounds.to_string()),
            ("gn_steps_per_phase".into(), self.gn_steps_per_phase.to_string()),
            ("gd_steps_per_phase".into(), self.gd_steps_per_phase.to_string()),
            ("global_radius".into(), self.global_radius.to_string()),
            ("global_max_flow".into(), format!("{}", self.global_max_flow)),
            ("global_gn_steps".into(), self.global_gn_steps.to_string()),
            ("reset_theta_per_window".into(), self.reset_theta_per_window.to_string()),
            ("ba.max_iters".into(), self.ba.max_iters.to_string()),
            ("ba.lm_damping".into(), format!("{}", self.ba.lm_damping)),
            ("ba.gamma_d".into(), format!("{}", self.ba.gamma_d)),
            ("ba.min_depth_weight".into(), format!("{}", self.ba.min_depth_weight)),
            ("ba.depth_floor".into(), format!("{}", self.ba.depth_floor)),
            ("ba.step_tolerance".into(), format!("{}", self.ba.step_tolerance)),
            ("ba.uncertainty_weighting".into(), self.ba.uncertainty_weighting.to_string()),
            ("uncertainty.gamma_prior".into(), format!("{}", self.uncertainty.gamma_prior)),
            ("uncertainty.learning_rate".into(), format!("{}", self.uncertainty.learning_rate)),
            ("uncertainty.weight_decay".into(), format!("{}", self.uncertainty.weight_decay)),
            ("uncertainty.coupling".into(), coupling.into()),
        ];
        for name in AblationFlags::NAMES {
            let mut probe = AblationFlags::default();
            probe.set(name, true);
            let on = match name {
                "no_uba" => self.ablation.no_uba,
                "no_depth_prior" => self.ablation.no_depth_prior,
                "coupled_similarity" => self.ablation.coupled_similarity,
                "no_affine_map" => self.ablation.no_affine_map,
                "no_weight_decay" => self.ablation.no_weight_decay,
                _ => self.ablation.no_prior_term,
            };
            out.push((format!("ablation.{name}"), on.to_string()));
        }
        out
    }
}

/// One logged optimizer iteration, labeled by pipeline phase. Pose-depth
/// rows carry the damping and step norm of the accepted step; uncertainty
/// rows log the post-step objective with both set to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTraceRow {
    pub phase: String,
    pub iter: usize,
    pub energy: f64,
    pub damping: f64,
    pub step_norm: f64,
}

/// Accumulated per-phase logs of a session.
#[derive(Debug, Clone, Default)]
pub struct SessionTrace {
    pub energy: Vec<PhaseTraceRow>,
    /// Affine head parameters after each gradient step, labeled by phase.
    pub theta: Vec<(String, DVector<f64>)>,
}

/// Everything a finished session produces. Trajectories are camera-to-world.
#[derive(Debug, Clone)]
pub struct SessionResult {
    pub keyframe_trajectory: Trajectory,
    pub full_trajectory: Trajectory,
    /// Final per-keyframe uncertainty fields, keyed by source frame index.
    pub uncertainty: Vec<(usize, ScalarField)>,
    pub energy_trace: Vec<PhaseTraceRow>,
    pub theta_trace: Vec<(String, DVector<f64>)>,
    pub config_echo: Vec<(String, String)>,
    pub graph: FrameGraph,
}

/// Mean displacement between rest positions and observed targets over
/// positive-weight pixels; `None` when nothing was observed.
pub fn observed_mean_flow(obs: &EdgeObservation) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for row in 0..obs.target.height() {
        for col in 0..obs.target.width() {
            let w = obs.weight.at(row, col);
            if w[0] <= 0.0 && w[1] <= 0.0 {
                continue;
            }
            let t = obs.target.at(row, col);
            let dx = t[0] - col as f64;
            let dy = t[1] - row as f64;
            sum += (dx * dx + dy * dy).sqrt();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Keyframe admission test: the first frame is always accepted; later frames
/// must move the image by at least `threshold` pixels of observed mean flow
/// relative to the latest keyframe. The gate reads the measured flow rather
/// than pose-induced flow because candidate frames have no pose estimate
/// yet. An observation with no valid pixels accepts, so the graph cannot
/// starve on a degenerate stretch.
fn gate_accepts(
    graph: &FrameGraph,
    provider: &dyn FrameDataProvider,
    frame: usize,
    threshold: f64,
) -> bool {
    let Some(&latest) = graph.keyframe_ids().last() else {
        return true;
    };
    let obs = provider.observe(latest, frame);
    observed_mean_flow(&obs).map_or(true, |f| f >= threshold)
}

fn insert_new_keyframe(
    graph: &mut FrameGraph,
    provider: &dyn FrameDataProvider,
    config: &PipelineConfig,
    frame: usize,
    pose: SE3Pose,
) -> Result<(), GraphError> {
    let features = provider.features(frame);
    let prior =
        if config.ablation.no_depth_prior { None } else { provider.depth_prior(frame) };
    let inv_depth = prior
        .clone()
        .unwrap_or_else(|| ScalarField::filled(features.height(), features.width(), 1.0));
    let mut kf =
        KeyframeState::new(frame, provider.timestamp(frame), pose, inv_depth, features);
    kf.depth_prior = prior;
    graph.insert_keyframe(kf)
}

/// Constant-velocity pose prediction for time `t_new` from the last two
/// keyframes; degenerate histories fall back to the latest pose.
fn extrapolated_pose(graph: &FrameGraph, t_new: f64) -> SE3Pose {
    let ids = graph.keyframe_ids();
    let Some(&last) = ids.last() else {
        return SE3Pose::identity();
    };
    let latest = graph.keyframe(last).expect("keyframe exists");
    if ids.len() < 2 {
        return latest.pose;
    }
    let prev = graph.keyframe(ids[ids.len() - 2]).expect("keyframe exists");
    let dt = latest.timestamp - prev.timestamp;
    if dt <= 0.0 {
        return latest.pose;
    }
    let ratio = (t_new - latest.timestamp) / dt;
    let rel = latest.pose.compose(&prev.pose.inverse());
    match se3_log(&rel) {
        Ok(xi) => se3_exp(&(xi * ratio)).compose(&latest.pose),
        Err(_) => latest.pose,
    }
}

fn sync_edges(
    graph: &mut FrameGraph,
    provider: &dyn FrameDataProvider,
    ids: &[usize],
    desired: &BTreeSet<(usize, usize)>,
) -> Result<(), GraphError> {
    for (i, j) in graph.edges_within(ids) {
        if !desired.contains(&(i, j)) {
            graph.remove_edge(i, j);
        }
    }
    for &(i, j) in desired {
        if !graph.has_edge(i, j) {
            graph.insert_edge(i, j, provider.observe(i, j))?;
        }
    }
    Ok(())
}

/// Rebuilds the edge set over `ids`: pairs within `radius` positions whose
/// pose-induced mean flow stays below `max_flow`. The ascending-direction
/// flow decides each pair so the edge set stays symmetric. Existing edges
/// keep their observations; edges within `ids` that no longer qualify are
/// dropped.
pub fn rebuild_window_edges(
    graph: &mut FrameGraph,
    provider: &dyn FrameDataProvider,
    ids: &[usize],
    radius: usize,
    max_flow: f64,
    intr: &CameraIntrinsics,
) -> Result<(), GraphError> {
    let mut desired = BTreeSet::new();
    for (i, j) in window_pairs(ids, radius) {
        if i > j {
            continue;
        }
        let a = graph.keyframe(i).expect("keyframe exists");
        let b = graph.keyframe(j).expect("keyframe exists");
        if mean_flow_distance(a, b, intr).is_some_and(|f| f < max_flow) {
            desired.insert((i, j));
            desired.insert((j, i));
        }
    }
    sync_edges(graph, provider, ids, &desired)
}

/// Rebuilds edges over all keyframes for the global refinement: every pair
/// within `radius` positions unconditionally (connectivity), plus every pair
/// whose mean flow stays below `max_flow` (long-range constraints).
pub fn rebuild_global_edges(
    graph: &mut FrameGraph,
    provider: &dyn FrameDataProvider,
    radius: usize,
    max_flow: f64,
    intr: &CameraIntrinsics,
) -> Result<(), GraphError> {
    let ids = graph.keyframe_ids();
    let mut desired: BTreeSet<(usize, usize)> = window_pairs(&ids, radius).into_iter().collect();
    for (pos, &i) in ids.iter().enumerate() {
        for &j in &ids[pos + 1..] {
            let a = graph.keyframe(i).expect("keyframe exists");
            let b = graph.keyframe(j).expect("keyframe exists");
            if mean_flow_distance(a, b, intr).is_some_and(|f| f < max_flow) {
                desired.insert((i, j));
                desired.insert((j, i));
            }
        }
    }
    sync_edges(graph, provider, &ids, &desired)
}

/// Alternates pose-depth refinement and uncertainty optimization over the
/// keyframes in `ids` for `rounds` rounds. Each round recomputes the
/// uncertainty fields from the affine head, runs a budgeted pose-depth
/// solve, then descends the uncertainty objective; ablation flags skip or
/// reshape the uncertainty phases. Trace rows are labeled `{label}.ba` and
/// `{label}.gd`.
pub fn interleaved_optimize(
    graph: &mut FrameGraph,
    ids: &[usize],
    model: &mut AffineUncertaintyModel,
    intr: &CameraIntrinsics,
    config: &PipelineConfig,
    rounds: usize,
    label: &str,
    trace: &mut SessionTrace,
) -> Result<(), PipelineError> {
    let flags = config.ablation;
    let ba_cfg = config.effective_ba(config.gn_steps_per_phase, Vec::new());
    let ucfg = config.effective_uncertainty();
    for round in 0..rounds {
        if graph.edges_within(ids).is_empty() {
            return Ok(());
        }
        if !flags.no_uba && !flags.no_affine_map {
            refresh_uncertainty(graph, ids, model)?;
        }
        let report = ba_iterate(graph, ids, intr, &ba_cfg).map_err(|source| {
            PipelineError::Solve {
                phase: format!("{label}.ba"),
                iter: round * config.gn_steps_per_phase,
                source,
            }
        })?;
        for row in &report.trace {
            trace.energy.push(PhaseTraceRow {
                phase: format!("{label}.ba"),
                iter: round * config.gn_steps_per_phase + row.iter,
                energy: row.energy,
                damping: row.damping,
                step_norm: row.step_norm,
            });
        }
        if flags.no_uba || config.gd_steps_per_phase == 0 {
            continue;
        }
        let pairs = graph.edges_within(ids);
        let sims = build_similarities(graph, &pairs, intr);
        if flags.no_affine_map {
            for step in 0..config.gd_steps_per_phase {
                direct_field_step(graph, &sims, &ucfg, ucfg.learning_rate, DIRECT_FIELD_FLOOR);
                trace.energy.push(PhaseTraceRow {
                    phase: format!("{label}.gd"),
                    iter: round * config.gd_steps_per_phase + step,
                    energy: field_energy(graph, &sims, &ucfg),
                    damping: 0.0,
                    step_norm: 0.0,
                });
            }
        } else {
            let descent = gradient_descent_phase(graph, &sims, model, &ucfg)?;
            for (step, theta) in descent.thetas.iter().enumerate() {
                trace.energy.push(PhaseTraceRow {
                    phase: format!("{label}.gd"),
                    iter: round * config.gd_steps_per_phase + step,
                    energy: descent.energies[step + 1],
                    damping: 0.0,
                    step_norm: 0.0,
                });
                trace.theta.push((format!("{label}.gd"), theta.clone()));
            }
        }
    }
    Ok(())
}

fn accept_keyframe(
    graph: &mut FrameGraph,
    model: &mut AffineUncertaintyModel,
    provider: &dyn FrameDataProvider,
    config: &PipelineConfig,
    frame: usize,
    label: &str,
    trace: &mut SessionTrace,
) -> Result<(), PipelineError> {
    let pose = extrapolated_pose(graph, provider.timestamp(frame));
    insert_new_keyframe(graph, provider, config, frame, pose)?;
    if config.reset_theta_per_window && !model.is_frozen() {
        model.set_theta(DVector::zeros(model.channels() + 1))?;
    }
    let intr = provider.intrinsics();
    let window = graph.window_ids(config.window_size);
    rebuild_window_edges(
        graph,
        provider,
        &window,
        config.edge_radius,
        config.window_max_flow,
        &intr,
    )?;
    interleaved_optimize(
        graph,
        &window,
        model,
        &intr,
        config,
        config.interleave_rounds,
        label,
        trace,
    )
}

/// Gates `frame` and, when accepted, inserts it with a constant-velocity
/// pose, rebuilds the sliding-window edges, and optimizes the window.
/// Poses outside the window are untouched. Returns whether the frame became
/// a keyframe; a rejected frame leaves the graph unchanged.
pub fn frontend_step(
    graph: &mut FrameGraph,
    model: &mut AffineUncertaintyModel,
    provider: &dyn FrameDataProvider,
    config: &PipelineConfig,
    frame: usize,
    trace: &mut SessionTrace,
) -> Result<bool, PipelineError> {
    if !gate_accepts(graph, provider, frame, config.motion_threshold) {
        return Ok(false);
    }
    accept_keyframe(graph, model, provider, config, frame, &format!("kf{frame:04}"), trace)?;
    Ok(true)
}

/// Final whole-graph refinement: edges are rebuilt over all keyframes, the
/// uncertainty head is frozen, the stored uncertainty fields are recomputed
/// once from the frozen parameters, and a budgeted pose-depth solve runs
/// over every keyframe. The head parameters are not modified.
pub fn global_ba(
    graph: &mut FrameGraph,
    model: &mut AffineUncertaintyModel,
    provider: &dyn FrameDataProvider,
    config: &PipelineConfig,
    trace: &mut SessionTrace,
) -> Result<ConvergenceReport, PipelineError> {
    let intr = provider.intrinsics();
    rebuild_global_edges(graph, provider, config.global_radius, config.global_max_flow, &intr)?;
    model.freeze();
    let ids = graph.keyframe_ids();
    if !config.ablation.no_uba && !config.ablation.no_affine_map {
        refresh_uncertainty(graph, &ids, model)?;
    }
    let ba_cfg = config.effective_ba(config.global_gn_steps, Vec::new());
    let report = ba_iterate(graph, &ids, &intr, &ba_cfg).map_err(|source| {
        PipelineError::Solve { phase: "global.ba".into(), iter: 0, source }
    })?;
    for row in &report.trace {
        trace.energy.push(PhaseTraceRow {
            phase: "global.ba".into(),
            iter: row.iter,
            energy: row.energy,
            damping: row.damping,
            step_norm: row.step_norm,
        });
    }
    Ok(report)
}

/// Camera-to-world pose for every timestamp in `timestamps`, passing
/// keyframe poses through exactly and interpolating between bracketing
/// keyframes elsewhere. Timestamps outside the keyframe span fail, modulo a
/// tiny slack for float noise.
pub fn recover_full_trajectory(
    graph: &FrameGraph,
    timestamps: &[f64],
) -> Result<Trajectory, PipelineError> {
    let ids = graph.keyframe_ids();
    let kf_t: Vec<f64> =
        ids.iter().map(|&id| graph.keyframe(id).expect("keyframe exists").timestamp).collect();
    let kf_pose: Vec<SE3Pose> =
        ids.iter().map(|&id| graph.keyframe(id).expect("keyframe exists").pose).collect();
    assert!(!kf_t.is_empty(), "trajectory recovery needs at least one keyframe");
    let (lo, hi) = (kf_t[0], kf_t[kf_t.len() - 1]);
    let slack = 1e-12 * (1.0 + hi.abs());
    let mut out = Trajectory::new();
    for &t in timestamps {
        if t < lo - slack || t > hi + slack {
            return Err(PipelineError::ExtrapolationUnsupported { t, lo, hi });
        }
        // Index of the first keyframe time strictly after t.
        let k = kf_t.partition_point(|&x| x <= t);
        let pose = if k == 0 {
            kf_pose[0]
        } else if k == kf_t.len() {
            kf_pose[k - 1]
        } else {
            let (ta, tb) = (kf_t[k - 1], kf_t[k]);
            if t == ta {
                kf_pose[k - 1]
            } else {
                se3_interpolate(&kf_pose[k - 1], &kf_pose[k], (t - ta) / (tb - ta))?
            }
        };
        out.push(t, pose.inverse());
    }
    Ok(out)
}

/// Runs a complete tracking session over every frame of `provider`:
/// initialization, frontend sliding-window tracking, a forced final
/// keyframe so interpolation covers the whole stream, global refinement,
/// and trajectory recovery.
pub fn run_session(
    provider: &dyn FrameDataProvider,
    config: &PipelineConfig,
) -> Result<SessionResult, PipelineError> {
    assert!(config.init_keyframes >= 2, "initialization needs at least two keyframes");
    assert!(config.window_size >= 2, "the sliding window needs at least two keyframes");
    let intr = provider.intrinsics();
    let n = provider.n_frames();
    let mut graph = FrameGraph::new();
    let channels = provider.features(0).channels();
    let mut model = AffineUncertaintyModel::new(channels);
    let mut trace = SessionTrace::default();

    let mut next_frame = 0usize;
    while graph.n_keyframes() < config.init_keyframes && next_frame < n {
        if gate_accepts(&graph, provider, next_frame, config.motion_threshold) {
            let pose = graph
                .keyframe_ids()
                .last()
                .map(|&id| graph.keyframe(id).expect("keyframe exists").pose)
                .unwrap_or_else(SE3Pose::identity);
            insert_new_keyframe(&mut graph, provider, config, next_frame, pose)?;
        }
        next_frame += 1;
    }
    if graph.n_keyframes() < config.init_keyframes {
        return Err(PipelineError::InitUnderflow {
            accepted: graph.n_keyframes(),
            required: config.init_keyframes,
        });
    }
    let init_ids = graph.keyframe_ids();
    rebuild_window_edges(
        &mut graph,
        provider,
        &init_ids,
        config.edge_radius,
        config.window_max_flow,
        &intr,
    )?;
    interleaved_optimize(
        &mut graph,
        &init_ids,
        &mut model,
        &intr,
        config,
        config.init_rounds,
        "init",
        &mut trace,
    )?;

    for frame in next_frame..n {
        frontend_step(&mut graph, &mut model, provider, config, frame, &mut trace)?;
    }
    if n > 0 && graph.keyframe(n - 1).is_none() {
        accept_keyframe(&mut graph, &mut model, provider, config, n - 1, "final", &mut trace)?;
    }

    global_ba(&mut graph, &mut model, provider, config, &mut trace)?;

    let ids = graph.keyframe_ids();
    let mut keyframe_trajectory = Trajectory::new();
    for &id in &ids {
        let kf = graph.keyframe(id).expect("keyframe exists");
        keyframe_trajectory.push(kf.timestamp, kf.pose.inverse());
    }
    let stamps: Vec<f64> = (0..n).map(|f| provider.timestamp(f)).collect();
    let full_trajectory = recover_full_trajectory(&graph, &stamps)?;
    let uncertainty = ids
        .iter()
        .map(|&id| (id, graph.keyframe(id).expect("keyframe exists").uncertainty.clone()))
        .collect();
    Ok(SessionResult {
        keyframe_trajectory,
        full_trajectory,
        uncertainty,
        energy_trace: trace.energy,
        theta_trace: trace.theta,
        config_echo: config.echo(),
        graph,
    })
}
