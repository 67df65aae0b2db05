//! The four `dynba` subcommands.
//!
//! Every failure path maps onto one of two documented exit classes: input
//! errors (bad configuration, unreadable or malformed files) exit with 2,
//! solver and check failures (optimization breakdown, gradient mismatch)
//! exit with 1. Success is 0.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use thiserror::Error;

use dynba_core::eval::{ate_rmse, uncertainty_auc, EvalError, Trajectory};
use dynba_core::field::BoolField;
use dynba_core::gradcheck::{
    check_ba_gradient, check_theta_gradient, random_uncertainty_instance,
};
use dynba_core::io::{
    load_mask, parse_scalar_field_csv, parse_trajectory, save_depth_map, save_mask,
    save_session_result, save_trajectory, IoError,
};
use dynba_core::pipeline::{run_session, PipelineError, SyntheticProvider};
use dynba_core::scene::{generate_scene, SceneError};
use dynba_core::uncertainty::{
    build_similarities, similarity_energy, theta_gradient, AffineUncertaintyModel,
    UncertaintyConfig, UncertaintyError,
};

use crate::config::{
    build_run_setup, build_scene_config, parse_assignments, scene_config_echo, ConfigError,
};
use crate::manifest::ManifestBuilder;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or input files; exit code 2.
    #[error("{0}")]
    Input(String),
    /// Optimization or derivative-check failure; exit code 1.
    #[error("{0}")]
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Solver(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Solver(e.to_string())
    }
}

impl From<UncertaintyError> for CliError {
    fn from(e: UncertaintyError) -> Self {
        CliError::Solver(e.to_string())
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", path.display())))
}

/// Wraps a core I/O error, attaching the path when the underlying OS error
/// has none of its own.
fn input_io(path: &Path, e: IoError) -> CliError {
    match e {
        IoError::Io(inner) => {
            CliError::Input(format!("cannot access {}: {inner}", path.display()))
        }
        other => CliError::Input(other.to_string()),
    }
}

fn manifest_io(root: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("manifest error under {}: {e}", root.display()))
}

fn load_traj(path: &Path) -> Result<Trajectory, CliError> {
    let text = read_text(path)?;
    parse_trajectory(&text, &path.display().to_string())
        .map_err(|e| CliError::Input(e.to_string()))
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Generates a synthetic scene and writes its artifacts: the resolved
/// configuration, the ground-truth camera-to-world trajectory, per-frame
/// inverse-depth maps and dynamic masks, and a checksummed manifest.
pub fn cmd_simulate(
    scene_config: &Path,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let label = scene_config.display().to_string();
    let text = read_text(scene_config)?;
    let mut cfg = build_scene_config(&parse_assignments(&text, &label)?, &label)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let echo = scene_config_echo(&cfg);
    let seq = generate_scene(&cfg)?;

    create_dir(out_dir)?;
    create_dir(&out_dir.join("depth"))?;
    create_dir(&out_dir.join("masks"))?;
    let mut manifest = ManifestBuilder::new("simulate", &echo, cfg.seed);

    write_bytes(&out_dir.join("scene.cfg"), echo.as_bytes())?;
    manifest.add_file(out_dir, "scene.cfg").map_err(|e| manifest_io(out_dir, e))?;

    let mut gt = Trajectory::new();
    for (t, pose) in seq.timestamps.iter().zip(&seq.poses) {
        gt.push(*t, pose.inverse());
    }
    save_trajectory(&out_dir.join("traj_gt.txt"), &gt)
        .map_err(|e| input_io(out_dir, e))?;
    manifest.add_file(out_dir, "traj_gt.txt").map_err(|e| manifest_io(out_dir, e))?;

    for f in 0..seq.n_frames() {
        let depth_rel = format!("depth/frame_{f:04}.dmap");
        let mask_rel = format!("masks/frame_{f:04}.dmap");
        save_depth_map(&out_dir.join(&depth_rel), &seq.gt_inv_depth[f])
            .map_err(|e| input_io(out_dir, e))?;
        save_mask(&out_dir.join(&mask_rel), &seq.dynamic_masks[f])
            .map_err(|e| input_io(out_dir, e))?;
        manifest.add_file(out_dir, &depth_rel).map_err(|e| manifest_io(out_dir, e))?;
        manifest.add_file(out_dir, &mask_rel).map_err(|e| manifest_io(out_dir, e))?;
    }
    manifest.write(out_dir).map_err(|e| manifest_io(out_dir, e))?;

    println!(
        "simulated {} frames at {}x{}, dynamic coverage {:.1}%",
        seq.n_frames(),
        cfg.grid_h,
        cfg.grid_w,
        100.0 * seq.mean_dynamic_coverage()
    );
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

/// Regenerates the scene recorded in `scene_dir/scene.cfg`, runs a tracking
/// session with the given pipeline configuration and ablation flags, and
/// writes the session result plus a manifest into `out_dir`.
pub fn cmd_run(
    scene_dir: &Path,
    pipeline_config: &Path,
    out_dir: &Path,
    ablation: &[String],
) -> Result<(), CliError> {
    let scene_path = scene_dir.join("scene.cfg");
    let scene_label = scene_path.display().to_string();
    let scene_text = read_text(&scene_path)?;
    let scene_cfg =
        build_scene_config(&parse_assignments(&scene_text, &scene_label)?, &scene_label)?;

    let pl_label = pipeline_config.display().to_string();
    let pl_text = read_text(pipeline_config)?;
    let mut setup = build_run_setup(&parse_assignments(&pl_text, &pl_label)?, &pl_label)?;
    for flag in ablation {
        if flag == "full" {
            continue;
        }
        if !setup.pipeline.ablation.set(flag, true) {
            return Err(CliError::Input(format!(
                "unknown ablation flag {flag:?} (expected full, no_uba, no_depth_prior, \
                 coupled_similarity, no_affine_map, no_weight_decay, or no_prior_term)"
            )));
        }
    }

    let sequence = generate_scene(&scene_cfg)?;
    let n_frames = sequence.n_frames();
    let provider = SyntheticProvider {
        sequence,
        noise: setup.noise,
        feature_noise: setup.feature_noise,
        channels: setup.channels,
        with_depth_prior: setup.with_depth_prior,
        seed: scene_cfg.seed,
    };
    let result = run_session(&provider, &setup.pipeline)?;

    let written =
        save_session_result(out_dir, &result).map_err(|e| input_io(out_dir, e))?;
    let mut echo_text = String::new();
    for (k, v) in &result.config_echo {
        echo_text.push_str(&format!("{k} = {v}\n"));
    }
    let mut manifest = ManifestBuilder::new("run", &echo_text, scene_cfg.seed);
    for path in &written {
        let rel = path
            .strip_prefix(out_dir)
            .expect("session artifacts live under the output directory")
            .to_string_lossy()
            .into_owned();
        manifest.add_file(out_dir, &rel).map_err(|e| manifest_io(out_dir, e))?;
    }
    manifest.write(out_dir).map_err(|e| manifest_io(out_dir, e))?;

    println!(
        "session complete: {} keyframes over {} frames",
        result.keyframe_trajectory.len(),
        n_frames
    );
    println!("results in {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// `kf_0003.csv` -> 3; `None` for anything else.
fn uncertainty_frame_index(name: &str) -> Option<usize> {
    name.strip_prefix("kf_")?.strip_suffix(".csv")?.parse().ok()
}

/// Sorted `(frame, path)` pairs of the per-keyframe uncertainty CSV exports
/// under `result_dir`, empty when the directory is absent.
fn uncertainty_files(result_dir: &Path) -> Result<Vec<(usize, PathBuf)>, CliError> {
    let dir = result_dir.join("uncertainty");
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let entries = fs::read_dir(&dir)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry =
            entry.map_err(|e| CliError::Input(format!("cannot read {}: {e}", dir.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(frame) = uncertainty_frame_index(&name) {
            out.push((frame, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn mask_for_frame(masks_dir: &Path, frame: usize) -> Result<BoolField, CliError> {
    let path = masks_dir.join(format!("frame_{frame:04}.dmap"));
    if !path.is_file() {
        return Err(CliError::Input(format!(
            "mask for frame {frame} not found at {} (masks directory present but incomplete)",
            path.display()
        )));
    }
    load_mask(&path).map_err(|e| input_io(&path, e))
}

/// Evaluates a session result against a ground-truth trajectory: similarity
/// aligned ATE RMSE of the full and keyframe trajectories (plus unit-path
/// normalized variants with `normalize`), and the ROC AUC of the uncertainty
/// fields against the ground-truth dynamic masks when a `masks` directory
/// sits next to the trajectory file. The report is printed and written to
/// `result_dir/report.txt`.
pub fn cmd_eval(result_dir: &Path, gt_path: &Path, normalize: bool) -> Result<(), CliError> {
    let est_full = load_traj(&result_dir.join("traj_full.txt"))?;
    let est_kf = load_traj(&result_dir.join("traj_kf.txt"))?;
    let gt = load_traj(gt_path)?;

    let mut report = String::from("# trajectory evaluation\n");
    report.push_str(&format!("ate_rmse_full = {}\n", ate_rmse(&est_full, &gt, false)?));
    report.push_str(&format!("ate_rmse_kf = {}\n", ate_rmse(&est_kf, &gt, false)?));
    if normalize {
        report.push_str(&format!(
            "ate_rmse_full_normalized = {}\n",
            ate_rmse(&est_full, &gt, true)?
        ));
        report.push_str(&format!(
            "ate_rmse_kf_normalized = {}\n",
            ate_rmse(&est_kf, &gt, true)?
        ));
    }

    let masks_dir = gt_path.parent().unwrap_or_else(|| Path::new(".")).join("masks");
    let ufiles = uncertainty_files(result_dir)?;
    if masks_dir.is_dir() && !ufiles.is_empty() {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (frame, path) in &ufiles {
            let label = path.display().to_string();
            let field = parse_scalar_field_csv(&read_text(path)?, &label)
                .map_err(|e| CliError::Input(e.to_string()))?;
            let mask = mask_for_frame(&masks_dir, *frame)?;
            for row in 0..field.height() {
                for col in 0..field.width() {
                    scores.push(field.at(row, col));
                    labels.push(mask.at(row, col));
                }
            }
        }
        match uncertainty_auc(&scores, &labels) {
            Ok(auc) => report.push_str(&format!("uncertainty_auc = {auc}\n")),
            // A fully static (or fully dynamic) scene has one-class labels;
            // the AUC is undefined there, not an error.
            Err(EvalError::DegenerateLabels) => {}
            Err(other) => return Err(other.into()),
        }
    }

    write_bytes(&result_dir.join("report.txt"), report.as_bytes())?;
    print!("{report}");
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

/// Negative control: corrupts an analytic gradient on purpose and checks
/// that the finite-difference comparison flags it. Exits through the solver
/// error path when the corruption is detected (the expected outcome).
fn corrupted_gradient_control(seed: u64) -> Result<(), CliError> {
    let channels = 8;
    let (graph, pairs, intr) = random_uncertainty_instance(seed, channels, 0.12);
    let sims = build_similarities(&graph, &pairs, &intr);
    let config = UncertaintyConfig::default();
    let mut model = AffineUncertaintyModel::new(channels);
    let theta = DVector::from_fn(channels + 1, |k, _| 0.1 * k as f64 - 0.3);
    model.set_theta(theta.clone())?;

    let mut g = theta_gradient(&graph, &sims, &model, &config)?;
    for v in g.iter_mut() {
        *v += 0.05;
    }

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for k in 0..theta.len() {
        let probe = |delta: f64| -> Result<f64, CliError> {
            let mut m = model.clone();
            let mut t = theta.clone();
            t[k] += delta;
            m.set_theta(t)?;
            Ok(similarity_energy(&graph, &sims, &m, &config)?)
        };
        let fd = (probe(h)? - probe(-h)?) / (2.0 * h);
        let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    if max_rel > 1e-4 {
        return Err(CliError::Solver(format!(
            "corrupted-gradient control detected the error as intended: \
             max rel error {max_rel:.3e} exceeds 1e-4"
        )));
    }
    println!("warning: deliberate corruption went undetected; the comparator is broken");
    Ok(())
}

/// Runs bulk finite-difference checks of the uncertainty parameter gradient
/// and the bundle adjustment gradient sides over `trials` random instances
/// each. Any relative error above the per-family tolerance fails the
/// command.
pub fn cmd_gradcheck(trials: usize, seed: u64, corrupt_gradient: bool) -> Result<(), CliError> {
    if corrupt_gradient {
        return corrupted_gradient_control(seed);
    }
    if trials == 0 {
        println!("warning: no trials requested; nothing was checked");
        return Ok(());
    }
    let theta_report = check_theta_gradient(trials, seed);
    println!("{}", theta_report.summary());
    let ba_report = check_ba_gradient(trials, seed);
    println!("{}", ba_report.summary());
    if theta_report.passed() && ba_report.passed() {
        Ok(())
    } else {
        Err(CliError::Solver(format!(
            "gradient check failed: {}; {}",
            theta_report.summary(),
            ba_report.summary()
        )))
    }
}
