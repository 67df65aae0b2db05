//! End-to-end tests of the `dynba` binary: exit codes, diagnostics, artifact
//! layout, and byte-level determinism of reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::tempdir;

fn dynba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynba"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Small but fully dynamic scene: the standard desk scene shrunk to a
/// 12x16 grid with matching intrinsics and six frames.
const SMALL_DYNAMIC: &str = "preset = standard_dynamic\n\
                             n_frames = 6\n\
                             grid_h = 12\n\
                             grid_w = 16\n\
                             fx = 13\n\
                             fy = 13\n\
                             cx = 7.5\n\
                             cy = 5.5\n\
                             seed = 5\n";

/// Mover-free variant with enough frames for a short tracking session.
const SMALL_STATIC: &str = "preset = standard_static\n\
                            n_frames = 10\n\
                            grid_h = 12\n\
                            grid_w = 16\n\
                            fx = 13\n\
                            fy = 13\n\
                            cx = 7.5\n\
                            cy = 5.5\n\
                            seed = 5\n";

/// Pipeline settings sized for the small test scenes.
const SMALL_PIPELINE: &str = "init_keyframes = 4\n\
                              window_size = 4\n\
                              edge_radius = 2\n\
                              motion_threshold = 0.05\n\
                              interleave_rounds = 1\n\
                              init_rounds = 2\n\
                              gn_steps_per_phase = 1\n\
                              gd_steps_per_phase = 2\n\
                              global_gn_steps = 4\n\
                              provider.channels = 4\n\
                              provider.noise.preset = noiseless\n";

/// All file paths under `root`, relative, sorted.
fn file_tree(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        for entry in fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Asserts two directories hold byte-identical files, ignoring the manifest
/// (whose wall-time line is allowed to differ); manifests must still agree
/// on everything but that line.
fn assert_dirs_match(a: &Path, b: &Path) {
    let files_a = file_tree(a);
    assert_eq!(files_a, file_tree(b), "directory layouts differ");
    for rel in &files_a {
        let bytes_a = fs::read(a.join(rel)).expect("readable");
        let bytes_b = fs::read(b.join(rel)).expect("readable");
        if rel == Path::new("manifest.txt") {
            let strip = |bytes: &[u8]| -> String {
                String::from_utf8_lossy(bytes)
                    .lines()
                    .filter(|l| !l.starts_with("wall_time_ms"))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            assert_eq!(strip(&bytes_a), strip(&bytes_b), "manifests differ beyond wall time");
        } else {
            assert_eq!(bytes_a, bytes_b, "file {} differs between reruns", rel.display());
        }
    }
}

#[test]
fn simulate_writes_complete_deterministic_artifacts() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("scene.cfg");
    fs::write(&cfg, SMALL_DYNAMIC).unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let run = dynba(&["simulate", cfg.to_str().unwrap(), out.to_str().unwrap(), "--seed", "7"]);
        assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));
    }
    for sub in ["depth", "masks"] {
        let count = fs::read_dir(out_a.join(sub)).unwrap().count();
        assert_eq!(count, 6, "expected one {sub} file per frame");
    }
    for name in ["scene.cfg", "traj_gt.txt", "manifest.txt"] {
        assert!(out_a.join(name).is_file(), "{name} missing");
    }
    let manifest = fs::read_to_string(out_a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command = simulate"), "{manifest}");
    assert!(manifest.contains("seed = 7"), "{manifest}");
    assert_eq!(manifest.matches("artifact = ").count(), 2 + 12, "{manifest}");
    assert_dirs_match(&out_a, &out_b);
}

#[test]
fn simulate_rejects_invalid_mover_size_citing_key_and_line() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("scene.cfg");
    fs::write(&cfg, "preset = standard_dynamic\nmovers[0].size = -1\n").unwrap();
    let out = dir.path().join("out");
    let run = dynba(&["simulate", cfg.to_str().unwrap(), out.to_str().unwrap()]);
    assert_eq!(code(&run), 2);
    let msg = stderr(&run);
    assert!(msg.contains("movers[0].size"), "{msg}");
    assert!(msg.contains(":2:"), "diagnostic should cite line 2: {msg}");
}

#[test]
fn run_and_eval_rerun_byte_identically() {
    let dir = tempdir().unwrap();
    let scene_cfg = dir.path().join("scene.cfg");
    let pl_cfg = dir.path().join("pipeline.cfg");
    fs::write(&scene_cfg, SMALL_STATIC).unwrap();
    fs::write(&pl_cfg, SMALL_PIPELINE).unwrap();
    let scene = dir.path().join("scene");
    let sim = dynba(&["simulate", scene_cfg.to_str().unwrap(), scene.to_str().unwrap()]);
    assert_eq!(code(&sim), 0, "stderr: {}", stderr(&sim));

    let res_a = dir.path().join("res_a");
    let res_b = dir.path().join("res_b");
    let gt = scene.join("traj_gt.txt");
    for res in [&res_a, &res_b] {
        let run = dynba(&[
            "run",
            scene.to_str().unwrap(),
            pl_cfg.to_str().unwrap(),
            res.to_str().unwrap(),
        ]);
        assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));
        let eval = dynba(&[
            "eval",
            res.to_str().unwrap(),
            gt.to_str().unwrap(),
            "--normalize",
        ]);
        assert_eq!(code(&eval), 0, "stderr: {}", stderr(&eval));
        let text = stdout(&eval);
        assert!(text.contains("ate_rmse_full = "), "{text}");
        assert!(text.contains("ate_rmse_full_normalized = "), "{text}");
    }
    for name in ["traj_kf.txt", "traj_full.txt", "report.txt", "config.txt"] {
        assert!(res_a.join(name).is_file(), "{name} missing");
    }
    // The static scene has single-class masks, so no AUC line is expected.
    let report = fs::read_to_string(res_a.join("report.txt")).unwrap();
    assert!(!report.contains("uncertainty_auc"), "{report}");
    assert_dirs_match(&res_a, &res_b);
}

#[test]
fn run_applies_ablations_and_rejects_unknown_flags() {
    let dir = tempdir().unwrap();
    let scene_cfg = dir.path().join("scene.cfg");
    let pl_cfg = dir.path().join("pipeline.cfg");
    let mut dynamic_long = SMALL_DYNAMIC.replace("n_frames = 6", "n_frames = 10");
    dynamic_long.push_str("movers[0].velocity = 0.5 0.05 -0.1 0 0.3 0\n");
    fs::write(&scene_cfg, &dynamic_long).unwrap();
    fs::write(&pl_cfg, SMALL_PIPELINE).unwrap();
    let scene = dir.path().join("scene");
    let sim = dynba(&["simulate", scene_cfg.to_str().unwrap(), scene.to_str().unwrap()]);
    assert_eq!(code(&sim), 0, "stderr: {}", stderr(&sim));

    let res = dir.path().join("res");
    let run = dynba(&[
        "run",
        scene.to_str().unwrap(),
        pl_cfg.to_str().unwrap(),
        res.to_str().unwrap(),
        "--ablation",
        "no_uba",
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));
    assert!(res.join("traj_full.txt").is_file());
    let config = fs::read_to_string(res.join("config.txt")).unwrap();
    assert!(config.contains("ablation.no_uba = true"), "{config}");

    let bad = dynba(&[
        "run",
        scene.to_str().unwrap(),
        pl_cfg.to_str().unwrap(),
        dir.path().join("res2").to_str().unwrap(),
        "--ablation",
        "bogus",
    ]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("bogus"), "{}", stderr(&bad));
}

#[test]
fn eval_of_ground_truth_against_itself_is_zero_with_perfect_auc() {
    let dir = tempdir().unwrap();
    let scene_cfg = dir.path().join("scene.cfg");
    fs::write(&scene_cfg, SMALL_DYNAMIC).unwrap();
    let scene = dir.path().join("scene");
    let sim = dynba(&["simulate", scene_cfg.to_str().unwrap(), scene.to_str().unwrap()]);
    assert_eq!(code(&sim), 0, "stderr: {}", stderr(&sim));

    // Fabricate a result whose trajectories are the ground truth and whose
    // only uncertainty field is frame 0's dynamic mask itself.
    let res = dir.path().join("res");
    fs::create_dir_all(res.join("uncertainty")).unwrap();
    let gt = scene.join("traj_gt.txt");
    fs::copy(&gt, res.join("traj_full.txt")).unwrap();
    fs::copy(&gt, res.join("traj_kf.txt")).unwrap();
    let mask = dynba_core::io::load_mask(&scene.join("masks/frame_0000.dmap")).unwrap();
    let mut csv = String::new();
    for row in 0..mask.height() {
        let cells: Vec<&str> =
            (0..mask.width()).map(|col| if mask.at(row, col) { "1" } else { "0" }).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    fs::write(res.join("uncertainty/kf_0000.csv"), csv).unwrap();

    let eval = dynba(&["eval", res.to_str().unwrap(), gt.to_str().unwrap()]);
    assert_eq!(code(&eval), 0, "stderr: {}", stderr(&eval));
    let text = stdout(&eval);
    let ate_line = text
        .lines()
        .find(|l| l.starts_with("ate_rmse_full = "))
        .expect("full ATE line present");
    let ate: f64 = ate_line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(ate < 1e-9, "self-evaluation should be numerically zero: {ate}");
    assert!(text.contains("uncertainty_auc = 1"), "{text}");
}

#[test]
fn eval_names_the_corrupt_trajectory_line() {
    let dir = tempdir().unwrap();
    let scene_cfg = dir.path().join("scene.cfg");
    fs::write(&scene_cfg, SMALL_DYNAMIC).unwrap();
    let scene = dir.path().join("scene");
    let sim = dynba(&["simulate", scene_cfg.to_str().unwrap(), scene.to_str().unwrap()]);
    assert_eq!(code(&sim), 0, "stderr: {}", stderr(&sim));

    let res = dir.path().join("res");
    fs::create_dir_all(&res).unwrap();
    let gt = scene.join("traj_gt.txt");
    let mut lines: Vec<String> =
        fs::read_to_string(&gt).unwrap().lines().map(String::from).collect();
    lines[2] = "garbage".into();
    fs::write(res.join("traj_full.txt"), lines.join("\n")).unwrap();
    fs::copy(&gt, res.join("traj_kf.txt")).unwrap();

    let eval = dynba(&["eval", res.to_str().unwrap(), gt.to_str().unwrap()]);
    assert_eq!(code(&eval), 2);
    let msg = stderr(&eval);
    assert!(msg.contains(":3:"), "diagnostic should cite line 3: {msg}");
}

#[test]
fn gradcheck_zero_trials_warns_and_succeeds() {
    let run = dynba(&["gradcheck", "--trials", "0"]);
    assert_eq!(code(&run), 0);
    assert!(stdout(&run).contains("no trials"), "{}", stdout(&run));
}

#[test]
fn gradcheck_small_run_passes() {
    let run = dynba(&["gradcheck", "--trials", "2", "--seed", "11"]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));
    let text = stdout(&run);
    assert_eq!(text.matches("-> PASS").count(), 2, "{text}");
}

#[test]
fn gradcheck_corrupted_gradient_control_fails() {
    let run = dynba(&["gradcheck", "--corrupt-gradient"]);
    assert_eq!(code(&run), 1);
    assert!(stderr(&run).contains("corrupted"), "{}", stderr(&run));
}
