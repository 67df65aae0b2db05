//! Line-based `key = value` configuration files.
//!
//! The format is deliberately minimal so files stay reviewable in diffs: one
//! assignment per line, `#` starts a comment, blank lines are ignored, and
//! dotted keys express nesting (`ba.lm_damping`). Vector values are
//! whitespace-separated numbers in a single assignment. Mover entries use
//! indexed keys (`movers[0].size`). Every diagnostic names the offending key
//! and line.

use nalgebra::{Vector3, Vector6};
use thiserror::Error;

use dynba_core::features::{DynamicFeatureMode, FeatureNoiseSpec};
use dynba_core::pipeline::{AblationFlags, PipelineConfig};
use dynba_core::scene::{
    ConfidenceMode, MoverShape, MoverSpec, ObservationNoise, PathKind, SceneConfig,
};
use dynba_core::uncertainty::SimilarityCoupling;

#[derive(Debug, Error)]
#[error("{path}:{line}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub line: usize,
    pub message: String,
}

fn err(path: &str, line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError { path: path.to_string(), line, message: message.into() }
}

/// One `key = value` line, with its position for diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits config text into assignments. `label` names the source in errors.
pub fn parse_assignments(text: &str, label: &str) -> Result<Vec<Assignment>, ConfigError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(err(label, line_no, format!("expected `key = value`, found {line:?}")));
        };
        let key = line[..eq].trim();
        let value = line[eq + 1..].trim();
        if key.is_empty() {
            return Err(err(label, line_no, "empty key before `=`"));
        }
        if key.split_whitespace().count() != 1 {
            return Err(err(label, line_no, format!("key {key:?} contains whitespace")));
        }
        out.push(Assignment { key: key.to_string(), value: value.to_string(), line: line_no });
    }
    Ok(out)
}

struct ValueParser<'a> {
    path: &'a str,
}

impl<'a> ValueParser<'a> {
    fn f64(&self, a: &Assignment) -> Result<f64, ConfigError> {
        let v: f64 = a.value.parse().map_err(|_| {
            err(self.path, a.line, format!("key {:?}: invalid number {:?}", a.key, a.value))
        })?;
        if !v.is_finite() {
            return Err(err(self.path, a.line, format!("key {:?}: non-finite value", a.key)));
        }
        Ok(v)
    }

    fn positive_f64(&self, a: &Assignment) -> Result<f64, ConfigError> {
        let v = self.f64(a)?;
        if v <= 0.0 {
            return Err(err(
                self.path,
                a.line,
                format!("key {:?}: must be positive, got {}", a.key, a.value),
            ));
        }
        Ok(v)
    }

    fn nonneg_f64(&self, a: &Assignment) -> Result<f64, ConfigError> {
        let v = self.f64(a)?;
        if v < 0.0 {
            return Err(err(
                self.path,
                a.line,
                format!("key {:?}: must be non-negative, got {}", a.key, a.value),
            ));
        }
        Ok(v)
    }

    fn usize(&self, a: &Assignment) -> Result<usize, ConfigError> {
        a.value.parse().map_err(|_| {
            err(self.path, a.line, format!("key {:?}: invalid count {:?}", a.key, a.value))
        })
    }

    fn u64(&self, a: &Assignment) -> Result<u64, ConfigError> {
        a.value.parse().map_err(|_| {
            err(self.path, a.line, format!("key {:?}: invalid seed {:?}", a.key, a.value))
        })
    }

    fn bool(&self, a: &Assignment) -> Result<bool, ConfigError> {
        match a.value.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(err(
                self.path,
                a.line,
                format!("key {:?}: expected true or false, got {other:?}", a.key),
            )),
        }
    }

    fn floats(&self, a: &Assignment, n: usize) -> Result<Vec<f64>, ConfigError> {
        let parts: Vec<&str> = a.value.split_whitespace().collect();
        if parts.len() != n {
            return Err(err(
                self.path,
                a.line,
                format!("key {:?}: expected {n} numbers, found {}", a.key, parts.len()),
            ));
        }
        let mut out = Vec::with_capacity(n);
        for p in parts {
            let v: f64 = p.parse().map_err(|_| {
                err(self.path, a.line, format!("key {:?}: invalid number {p:?}", a.key))
            })?;
            if !v.is_finite() {
                return Err(err(self.path, a.line, format!("key {:?}: non-finite value", a.key)));
            }
            out.push(v);
        }
        Ok(out)
    }

    fn vec3(&self, a: &Assignment) -> Result<Vector3<f64>, ConfigError> {
        let v = self.floats(a, 3)?;
        Ok(Vector3::new(v[0], v[1], v[2]))
    }

    fn vec6(&self, a: &Assignment) -> Result<Vector6<f64>, ConfigError> {
        let v = self.floats(a, 6)?;
        Ok(Vector6::new(v[0], v[1], v[2], v[3], v[4], v[5]))
    }
}

/// Builds a scene configuration from assignments, applied in file order.
///
/// The baseline is the standard mover-free desk scene; `preset` replaces the
/// whole configuration (keeping the current seed), so it belongs on the first
/// line. Movers are declared with indexed keys and must be introduced in
/// order: assigning any field of `movers[k]` with `k` equal to the current
/// count appends a default sphere first.
pub fn build_scene_config(
    assignments: &[Assignment],
    label: &str,
) -> Result<SceneConfig, ConfigError> {
    let p = ValueParser { path: label };
    let mut cfg = SceneConfig::standard_static(0);
    for a in assignments {
        if let Some(rest) = a.key.strip_prefix("movers[") {
            apply_mover_key(&p, &mut cfg, a, rest, label)?;
            continue;
        }
        match a.key.as_str() {
            "preset" => {
                let seed = cfg.seed;
                cfg = match a.value.as_str() {
                    "standard_dynamic" => SceneConfig::standard_dynamic(seed),
                    "standard_static" => SceneConfig::standard_static(seed),
                    other => {
                        return Err(err(
                            label,
                            a.line,
                            format!(
                                "key \"preset\": unknown preset {other:?} \
                                 (expected standard_dynamic or standard_static)"
                            ),
                        ))
                    }
                };
            }
            "n_frames" => {
                cfg.n_frames = p.usize(a)?;
                if cfg.n_frames < 2 {
                    return Err(err(
                        label,
                        a.line,
                        format!("key \"n_frames\": need at least 2 frames, got {}", cfg.n_frames),
                    ));
                }
            }
            "fps" => cfg.fps = p.positive_f64(a)?,
            "grid_h" => {
                cfg.grid_h = p.usize(a)?;
                if cfg.grid_h < 2 {
                    return Err(err(label, a.line, "key \"grid_h\": need at least 2 rows"));
                }
            }
            "grid_w" => {
                cfg.grid_w = p.usize(a)?;
                if cfg.grid_w < 2 {
                    return Err(err(label, a.line, "key \"grid_w\": need at least 2 columns"));
                }
            }
            "fx" => cfg.fx = p.positive_f64(a)?,
            "fy" => cfg.fy = p.positive_f64(a)?,
            "cx" => cfg.cx = p.f64(a)?,
            "cy" => cfg.cy = p.f64(a)?,
            "camera_path.kind" => {
                cfg.camera_path.kind = match a.value.as_str() {
                    "orbit" => PathKind::Orbit,
                    "forward" => PathKind::Forward,
                    "lateral" => PathKind::Lateral,
                    "random_smooth" => PathKind::RandomSmooth,
                    other => {
                        return Err(err(
                            label,
                            a.line,
                            format!(
                                "key \"camera_path.kind\": unknown path {other:?} \
                                 (expected orbit, forward, lateral, or random_smooth)"
                            ),
                        ))
                    }
                };
            }
            "camera_path.magnitude" => cfg.camera_path.magnitude = p.f64(a)?,
            "world.half_extents" => {
                let v = p.vec3(a)?;
                if v.min() <= 0.0 {
                    return Err(err(
                        label,
                        a.line,
                        "key \"world.half_extents\": extents must be positive",
                    ));
                }
                cfg.world.half_extents = v;
            }
            "world.perturb_amp" => cfg.world.perturb_amp = p.nonneg_f64(a)?,
            "world.perturb_freq" => cfg.world.perturb_freq = p.positive_f64(a)?,
            "seed" => cfg.seed = p.u64(a)?,
            other => {
                return Err(err(label, a.line, format!("unknown scene key {other:?}")));
            }
        }
    }
    Ok(cfg)
}

fn apply_mover_key(
    p: &ValueParser,
    cfg: &mut SceneConfig,
    a: &Assignment,
    rest: &str,
    label: &str,
) -> Result<(), ConfigError> {
    let Some((idx_text, field)) = rest.split_once("].") else {
        return Err(err(
            label,
            a.line,
            format!("key {:?}: expected the form movers[<index>].<field>", a.key),
        ));
    };
    let idx: usize = idx_text.parse().map_err(|_| {
        err(label, a.line, format!("key {:?}: invalid mover index {idx_text:?}", a.key))
    })?;
    if idx > cfg.movers.len() {
        return Err(err(
            label,
            a.line,
            format!(
                "key {:?}: mover index {idx} would leave a gap, only {} movers defined so far",
                a.key,
                cfg.movers.len()
            ),
        ));
    }
    if idx == cfg.movers.len() {
        cfg.movers.push(MoverSpec {
            shape: MoverShape::Sphere,
            size: 0.4,
            position: Vector3::new(0.0, 0.0, 1.0),
            velocity: Vector6::zeros(),
        });
    }
    let mover = &mut cfg.movers[idx];
    match field {
        "shape" => {
            mover.shape = match a.value.as_str() {
                "sphere" => MoverShape::Sphere,
                "box" => MoverShape::Box,
                other => {
                    return Err(err(
                        label,
                        a.line,
                        format!("key {:?}: unknown shape {other:?} (expected sphere or box)", a.key),
                    ))
                }
            };
        }
        "size" => {
            let v = p.f64(a)?;
            if v <= 0.0 {
                return Err(err(
                    label,
                    a.line,
                    format!("key {:?}: mover size must be positive, got {}", a.key, a.value),
                ));
            }
            mover.size = v;
        }
        "position" => mover.position = p.vec3(a)?,
        "velocity" => mover.velocity = p.vec6(a)?,
        other => {
            return Err(err(
                label,
                a.line,
                format!(
                    "key {:?}: unknown mover field {other:?} \
                     (expected shape, size, position, or velocity)",
                    a.key
                ),
            ))
        }
    }
    Ok(())
}

/// Renders a scene configuration as complete, preset-free config text that
/// [`build_scene_config`] parses back to the identical value.
pub fn scene_config_echo(cfg: &SceneConfig) -> String {
    let kind = match cfg.camera_path.kind {
        PathKind::Orbit => "orbit",
        PathKind::Forward => "forward",
        PathKind::Lateral => "lateral",
        PathKind::RandomSmooth => "random_smooth",
    };
    let mut out = String::from("# resolved scene configuration\n");
    out.push_str(&format!("n_frames = {}\n", cfg.n_frames));
    out.push_str(&format!("fps = {}\n", cfg.fps));
    out.push_str(&format!("grid_h = {}\n", cfg.grid_h));
    out.push_str(&format!("grid_w = {}\n", cfg.grid_w));
    out.push_str(&format!("fx = {}\n", cfg.fx));
    out.push_str(&format!("fy = {}\n", cfg.fy));
    out.push_str(&format!("cx = {}\n", cfg.cx));
    out.push_str(&format!("cy = {}\n", cfg.cy));
    out.push_str(&format!("camera_path.kind = {kind}\n"));
    out.push_str(&format!("camera_path.magnitude = {}\n", cfg.camera_path.magnitude));
    let he = cfg.world.half_extents;
    out.push_str(&format!("world.half_extents = {} {} {}\n", he.x, he.y, he.z));
    out.push_str(&format!("world.perturb_amp = {}\n", cfg.world.perturb_amp));
    out.push_str(&format!("world.perturb_freq = {}\n", cfg.world.perturb_freq));
    for (k, m) in cfg.movers.iter().enumerate() {
        let shape = match m.shape {
            MoverShape::Sphere => "sphere",
            MoverShape::Box => "box",
        };
        out.push_str(&format!("movers[{k}].shape = {shape}\n"));
        out.push_str(&format!("movers[{k}].size = {}\n", m.size));
        out.push_str(&format!(
            "movers[{k}].position = {} {} {}\n",
            m.position.x, m.position.y, m.position.z
        ));
        let v = m.velocity;
        out.push_str(&format!(
            "movers[{k}].velocity = {} {} {} {} {} {}\n",
            v[0], v[1], v[2], v[3], v[4], v[5]
        ));
    }
    out.push_str(&format!("seed = {}\n", cfg.seed));
    out
}

/// Everything a tracking run needs beyond the scene: the pipeline settings
/// and the synthetic data provider's knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSetup {
    pub pipeline: PipelineConfig,
    pub channels: usize,
    pub with_depth_prior: bool,
    pub noise: ObservationNoise,
    pub feature_noise: FeatureNoiseSpec,
}

impl Default for RunSetup {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            channels: 16,
            with_depth_prior: true,
            noise: ObservationNoise::standard(),
            feature_noise: FeatureNoiseSpec::clean(),
        }
    }
}

/// Builds the run setup from assignments. Accepts every key the session
/// writes to its `config.txt` echo, so a previous run's echo is a valid
/// pipeline configuration, plus `provider.*` keys for the synthetic
/// observation source.
pub fn build_run_setup(assignments: &[Assignment], label: &str) -> Result<RunSetup, ConfigError> {
    let p = ValueParser { path: label };
    let mut setup = RunSetup::default();
    for a in assignments {
        if let Some(flag) = a.key.strip_prefix("ablation.") {
            let on = p.bool(a)?;
            if !setup.pipeline.ablation.set(flag, on) {
                return Err(err(
                    label,
                    a.line,
                    format!(
                        "key {:?}: unknown ablation flag (expected one of {})",
                        a.key,
                        AblationFlags::NAMES.join(", ")
                    ),
                ));
            }
            continue;
        }
        let pl = &mut setup.pipeline;
        match a.key.as_str() {
            "init_keyframes" => {
                pl.init_keyframes = p.usize(a)?;
                if pl.init_keyframes < 2 {
                    return Err(err(
                        label,
                        a.line,
                        "key \"init_keyframes\": initialization needs at least 2 keyframes",
                    ));
                }
            }
            "window_size" => {
                pl.window_size = p.usize(a)?;
                if pl.window_size < 2 {
                    return Err(err(
                        label,
                        a.line,
                        "key \"window_size\": the window needs at least 2 keyframes",
                    ));
                }
            }
            "edge_radius" => {
                pl.edge_radius = p.usize(a)?;
                if pl.edge_radius == 0 {
                    return Err(err(label, a.line, "key \"edge_radius\": must be at least 1"));
                }
            }
            "window_max_flow" => pl.window_max_flow = p.positive_f64(a)?,
            "motion_threshold" => pl.motion_threshold = p.nonneg_f64(a)?,
            "interleave_rounds" => pl.interleave_rounds = p.usize(a)?,
            "init_rounds" => pl.init_rounds = p.usize(a)?,
            "gn_steps_per_phase" => pl.gn_steps_per_phase = p.usize(a)?,
            "gd_steps_per_phase" => pl.gd_steps_per_phase = p.usize(a)?,
            "global_radius" => pl.global_radius = p.usize(a)?,
            "global_max_flow" => pl.global_max_flow = p.positive_f64(a)?,
            "global_gn_steps" => pl.global_gn_steps = p.usize(a)?,
            "reset_theta_per_window" => pl.reset_theta_per_window = p.bool(a)?,
            "ba.max_iters" => pl.ba.max_iters = p.usize(a)?,
            "ba.lm_damping" => pl.ba.lm_damping = p.positive_f64(a)?,
            "ba.gamma_d" => pl.ba.gamma_d = p.nonneg_f64(a)?,
            "ba.min_depth_weight" => pl.ba.min_depth_weight = p.positive_f64(a)?,
            "ba.depth_floor" => pl.ba.depth_floor = p.positive_f64(a)?,
            "ba.step_tolerance" => pl.ba.step_tolerance = p.nonneg_f64(a)?,
            "ba.uncertainty_weighting" => pl.ba.uncertainty_weighting = p.bool(a)?,
            "uncertainty.gamma_prior" => pl.uncertainty.gamma_prior = p.nonneg_f64(a)?,
            "uncertainty.learning_rate" => pl.uncertainty.learning_rate = p.positive_f64(a)?,
            "uncertainty.weight_decay" => pl.uncertainty.weight_decay = p.nonneg_f64(a)?,
            "uncertainty.coupling" => {
                pl.uncertainty.coupling = match a.value.as_str() {
                    "source_target" => SimilarityCoupling::SourceTarget,
                    "source_squared" => SimilarityCoupling::SourceSquared,
                    other => {
                        return Err(err(
                            label,
                            a.line,
                            format!(
                                "key \"uncertainty.coupling\": unknown coupling {other:?} \
                                 (expected source_target or source_squared)"
                            ),
                        ))
                    }
                };
            }
            "provider.channels" => {
                setup.channels = p.usize(a)?;
                if setup.channels == 0 {
                    return Err(err(
                        label,
                        a.line,
                        "key \"provider.channels\": need at least 1 channel",
                    ));
                }
            }
            "provider.with_depth_prior" => setup.with_depth_prior = p.bool(a)?,
            "provider.noise.preset" => {
                setup.noise = match a.value.as_str() {
                    "noiseless" => ObservationNoise::noiseless(),
                    "standard" => ObservationNoise::standard(),
                    other => {
                        return Err(err(
                            label,
                            a.line,
                            format!(
                                "key \"provider.noise.preset\": unknown preset {other:?} \
                                 (expected noiseless or standard)"
                            ),
                        ))
                    }
                };
            }
            "provider.noise.corr_sigma" => setup.noise.corr_sigma = p.nonneg_f64(a)?,
            "provider.noise.outlier_frac" => {
                let v = p.nonneg_f64(a)?;
                if v > 1.0 {
                    return Err(err(
                        label,
                        a.line,
                        "key \"provider.noise.outlier_frac\": must be at most 1",
                    ));
                }
                setup.noise.outlier_frac = v;
            }
            "provider.noise.outlier_sigma" => setup.noise.outlier_sigma = p.nonneg_f64(a)?,
            "provider.noise.confidence" => {
                setup.noise.confidence = match a.value.as_str() {
                    "ideal" => ConfidenceMode::Ideal,
                    "noisy_informative" => ConfidenceMode::NoisyInformative,
                    "uninformative" => ConfidenceMode::Uninformative,
                    other => {
                        return Err(err(
                            label,
                            a.line,
                            format!(
                                "key \"provider.noise.confidence\": unknown mode {other:?} \
                                 (expected ideal, noisy_informative, or uninformative)"
                            ),
                        ))
                    }
                };
            }
            "provider.noise.depth_prior_sigma" => {
                setup.noise.depth_prior_sigma = p.nonneg_f64(a)?
            }
            "provider.noise.depth_prior_scale_jitter" => {
                let v = p.f64(a)?;
                if v <= -1.0 {
                    return Err(err(
                        label,
                        a.line,
                        "key \"provider.noise.depth_prior_scale_jitter\": must exceed -1",
                    ));
                }
                setup.noise.depth_prior_scale_jitter = v;
            }
            "provider.feature_noise.static_sigma" => {
                setup.feature_noise.static_sigma = p.nonneg_f64(a)?
            }
            "provider.feature_noise.dynamic_mode" => {
                setup.feature_noise.dynamic_mode = match a.value.as_str() {
                    "consistent" => DynamicFeatureMode::Consistent,
                    "decorrelated" => DynamicFeatureMode::Decorrelated,
                    "drifting" => DynamicFeatureMode::Drifting,
                    other => {
                        return Err(err(
                            label,
                            a.line,
                            format!(
                                "key \"provider.feature_noise.dynamic_mode\": unknown mode \
                                 {other:?} (expected consistent, decorrelated, or drifting)"
                            ),
                        ))
                    }
                };
            }
            "provider.feature_noise.drift_rate" => {
                setup.feature_noise.drift_rate = p.f64(a)?
            }
            other => {
                return Err(err(label, a.line, format!("unknown pipeline key {other:?}")));
            }
        }
    }
    Ok(setup)
}
