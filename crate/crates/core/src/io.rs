//! Bit-exact file formats: binary feature/depth containers, TUM-style
//! trajectory text, PGM uncertainty images with an embedded affine scale,
//! CSV traces, and the session-result directory layout.
//!
//! Every writer is deterministic: the same in-memory value always produces
//! the same bytes, which is what makes whole-run checksums meaningful.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};
use thiserror::Error;

use crate::ba::ConvergenceReport;
use crate::eval::Trajectory;
use crate::field::{BoolField, FeatureMap, ScalarField};
use crate::geometry::SE3Pose;
use crate::pipeline::{PhaseTraceRow, SessionResult};

/// Container version written and accepted by the binary map formats.
const CONTAINER_VERSION: u32 = 1;
/// Upper bound on `height * width * channels` accepted by the loader, as a
/// guard against allocating on corrupt headers.
const MAX_CONTAINER_VALUES: u64 = 1 << 26;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("format-error at byte {offset} of {path}: {message}")]
    Format { path: String, offset: usize, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_error(path: &Path, offset: usize, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

fn parse_error(label: &str, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { path: label.to_string(), line, message: message.into() }
}

// ---------------------------------------------------------------------------
// Binary map containers.
// ---------------------------------------------------------------------------

/// Serializes one dense map: a 4-byte magic, little-endian u32 version,
/// height, width, and channel count, then `h*w*c` little-endian f32 values
/// in row-major, channel-fastest order.
fn encode_container(magic: &[u8; 4], h: usize, w: usize, c: usize, data: &[f64]) -> Vec<u8> {
    assert_eq!(data.len(), h * w * c, "value count must match the declared shape");
    let mut out = Vec::with_capacity(20 + 4 * data.len());
    out.extend_from_slice(magic);
    for v in [CONTAINER_VERSION, h as u32, w as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode_container(
    path: &Path,
    bytes: &[u8],
    magic: &[u8; 4],
) -> Result<(usize, usize, usize, Vec<f64>), IoError> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        let found = bytes.get(..4).map(String::from_utf8_lossy).unwrap_or_default();
        return Err(format_error(
            path,
            0,
            format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                found
            ),
        ));
    }
    let mut words = [0u32; 4];
    for (k, word) in words.iter_mut().enumerate() {
        let offset = 4 + 4 * k;
        let Some(chunk) = bytes.get(offset..offset + 4) else {
            return Err(format_error(path, offset, "truncated header"));
        };
        *word = u32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
    }
    let [version, h, w, c] = words;
    if version != CONTAINER_VERSION {
        return Err(format_error(
            path,
            4,
            format!("unsupported version {version}, expected {CONTAINER_VERSION}"),
        ));
    }
    let values = h as u64 * w as u64 * c as u64;
    if values == 0 || values > MAX_CONTAINER_VALUES {
        return Err(format_error(path, 8, format!("implausible shape {h}x{w}x{c}")));
    }
    let body = 20usize;
    let expected = body + 4 * values as usize;
    if bytes.len() < expected {
        return Err(format_error(path, bytes.len(), "truncated payload"));
    }
    if bytes.len() > expected {
        return Err(format_error(path, expected, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(values as usize);
    for k in 0..values as usize {
        let offset = body + 4 * k;
        let v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(format_error(path, offset, format!("non-finite value {v}")));
        }
        data.push(v as f64);
    }
    Ok((h as usize, w as usize, c as usize, data))
}

pub fn save_feature_map(path: &Path, map: &FeatureMap) -> Result<(), IoError> {
    let bytes =
        encode_container(b"FMAP", map.height(), map.width(), map.channels(), map.as_slice());
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap, IoError> {
    let bytes = fs::read(path)?;
    let (h, w, c, data) = decode_container(path, &bytes, b"FMAP")?;
    Ok(FeatureMap::from_vec(h, w, c, data))
}

/// Saves a scalar field (inverse depth, mask weights) as a single-channel
/// `DMAP` container.
pub fn save_depth_map(path: &Path, field: &ScalarField) -> Result<(), IoError> {
    let bytes = encode_container(b"DMAP", field.height(), field.width(), 1, field.as_slice());
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_depth_map(path: &Path) -> Result<ScalarField, IoError> {
    let bytes = fs::read(path)?;
    let (h, w, _c, data) = decode_container(path, &bytes, b"DMAP")?;
    Ok(ScalarField::from_vec(h, w, data))
}

/// Saves a boolean mask as a 0/1-valued `DMAP`.
pub fn save_mask(path: &Path, mask: &BoolField) -> Result<(), IoError> {
    let mut field = ScalarField::filled(mask.height(), mask.width(), 0.0);
    for row in 0..mask.height() {
        for col in 0..mask.width() {
            if mask.at(row, col) {
                field.set(row, col, 1.0);
            }
        }
    }
    save_depth_map(path, &field)
}

pub fn load_mask(path: &Path) -> Result<BoolField, IoError> {
    let field = load_depth_map(path)?;
    let mut mask = BoolField::filled(field.height(), field.width(), false);
    for row in 0..field.height() {
        for col in 0..field.width() {
            mask.set(row, col, field.at(row, col) > 0.5);
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Trajectory text.
// ---------------------------------------------------------------------------

/// Renders a camera-to-world trajectory as
/// `timestamp tx ty tz qx qy qz qw` lines with nine decimal digits.
pub fn trajectory_to_string(traj: &Trajectory) -> String {
    let mut out = String::new();
    out.push_str("# timestamp tx ty tz qx qy qz qw\n");
    for (t, pose) in traj.timestamps().iter().zip(traj.poses()) {
        let tr = pose.translation;
        let q = pose.rotation;
        out.push_str(&format!(
            "{t:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
            tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w
        ));
    }
    out
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<(), IoError> {
    fs::write(path, trajectory_to_string(traj))?;
    Ok(())
}

/// Parses trajectory text; `label` names the source in diagnostics. Empty
/// and `#` comment lines are ignored. Timestamps must strictly increase.
pub fn parse_trajectory(text: &str, label: &str) -> Result<Trajectory, IoError> {
    let mut traj = Trajectory::new();
    let mut last_t: Option<f64> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_error(
                label,
                line_no,
                format!("expected 8 fields, found {}", fields.len()),
            ));
        }
        let mut values = [0.0f64; 8];
        for (k, field) in fields.iter().enumerate() {
            values[k] = field.parse::<f64>().map_err(|_| {
                parse_error(label, line_no, format!("invalid number {field:?}"))
            })?;
        }
        let [t, tx, ty, tz, qx, qy, qz, qw] = values;
        if !values.iter().all(|v| v.is_finite()) {
            return Err(parse_error(label, line_no, "non-finite value"));
        }
        if last_t.is_some_and(|prev| t <= prev) {
            return Err(parse_error(label, line_no, format!("non-increasing timestamp {t}")));
        }
        last_t = Some(t);
        traj.push(t, SE3Pose::from_xyzw(qx, qy, qz, qw, Vector3::new(tx, ty, tz)));
    }
    Ok(traj)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    let text = fs::read_to_string(path)?;
    parse_trajectory(&text, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Scalar-field images and CSV.
// ---------------------------------------------------------------------------

/// Renders a field as an 8-bit binary PGM, affinely scaled to [0, 255]. The
/// scale is recorded in a header comment line `# umin=<a> umax=<b>` so the
/// image remains self-describing; a constant field maps to zeros.
pub fn scalar_field_to_pgm(field: &ScalarField) -> Vec<u8> {
    let (h, w) = (field.height(), field.width());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in field.as_slice() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut out = format!("P5\n# umin={lo} umax={hi}\n{w} {h}\n255\n").into_bytes();
    for &v in field.as_slice() {
        let byte = if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
        out.push(byte);
    }
    out
}

/// Exact CSV rendering of a field: one line per row, `{}`-formatted values
/// (shortest representation that round-trips f64).
pub fn scalar_field_to_csv(field: &ScalarField) -> String {
    let mut out = String::new();
    for row in 0..field.height() {
        let cells: Vec<String> =
            (0..field.width()).map(|col| format!("{}", field.at(row, col))).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_scalar_field_csv(text: &str, label: &str) -> Result<ScalarField, IoError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for cell in raw.split(',') {
            row.push(cell.trim().parse::<f64>().map_err(|_| {
                parse_error(label, line_no, format!("invalid number {cell:?}"))
            })?);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_error(
                    label,
                    line_no,
                    format!("ragged row: {} cells, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_error(label, 1, "empty field"));
    }
    let (h, w) = (rows.len(), rows[0].len());
    Ok(ScalarField::from_vec(h, w, rows.into_iter().flatten().collect()))
}

// ---------------------------------------------------------------------------
// Optimization traces.
// ---------------------------------------------------------------------------

/// CSV rendering of the per-phase energy trace:
/// `phase,iter,energy,damping,step_norm`.
pub fn energy_trace_to_csv(rows: &[PhaseTraceRow]) -> String {
    let mut out = String::from("phase,iter,energy,damping,step_norm\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.phase, row.iter, row.energy, row.damping, row.step_norm
        ));
    }
    out
}

/// CSV rendering of one solver report: `iter,energy,damping,step_norm`.
pub fn convergence_to_csv(report: &ConvergenceReport) -> String {
    let mut out = String::from("iter,energy,damping,step_norm\n");
    for row in &report.trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.iter, row.energy, row.damping, row.step_norm
        ));
    }
    out
}

/// CSV rendering of the affine-head parameter trajectory, one row per
/// gradient step: `phase,step,theta_0,...`.
pub fn theta_trace_to_csv(rows: &[(String, DVector<f64>)]) -> String {
    let dim = rows.first().map_or(0, |(_, theta)| theta.len());
    let mut out = String::from("phase,step");
    for k in 0..dim {
        out.push_str(&format!(",theta_{k}"));
    }
    out.push('\n');
    for (step, (phase, theta)) in rows.iter().enumerate() {
        out.push_str(&format!("{phase},{step}"));
        for v in theta.iter() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Session-result directory.
// ---------------------------------------------------------------------------

/// Writes a session result under `dir`: `traj_kf.txt` and `traj_full.txt`
/// (trajectory text), `uncertainty/kf_<frame>.pgm` and `.csv` per keyframe,
/// `energy_trace.csv`, `theta_trace.csv`, and `config.txt`. Returns every
/// path written, in order.
pub fn save_session_result(dir: &Path, result: &SessionResult) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let emit = |path: PathBuf, bytes: Vec<u8>| -> Result<PathBuf, IoError> {
        fs::write(&path, bytes)?;
        Ok(path)
    };

    written.push(emit(
        dir.join("traj_kf.txt"),
        trajectory_to_string(&result.keyframe_trajectory).into_bytes(),
    )?);
    written.push(emit(
        dir.join("traj_full.txt"),
        trajectory_to_string(&result.full_trajectory).into_bytes(),
    )?);

    let udir = dir.join("uncertainty");
    fs::create_dir_all(&udir)?;
    for (frame, field) in &result.uncertainty {
        written.push(emit(udir.join(format!("kf_{frame:04}.pgm")), scalar_field_to_pgm(field))?);
        written.push(emit(
            udir.join(format!("kf_{frame:04}.csv")),
            scalar_field_to_csv(field).into_bytes(),
        )?);
    }

    written.push(emit(
        dir.join("energy_trace.csv"),
        energy_trace_to_csv(&result.energy_trace).into_bytes(),
    )?);
    written.push(emit(
        dir.join("theta_trace.csv"),
        theta_trace_to_csv(&result.theta_trace).into_bytes(),
    )?);

    let mut config = String::new();
    for (key, value) in &result.config_echo {
        config.push_str(&format!("{key} = {value}\n"));
    }
    written.push(emit(dir.join("config.txt"), config.into_bytes())?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::PhaseTraceRow;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use tempfile::tempdir;

    fn f32_clean(values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| v as f32 as f64).collect()
    }

    #[test]
    fn feature_map_round_trips_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.fmap");
        let data = f32_clean(&[0.25, -1.5, 3.75, 0.0, 1e-3, -7.25, 2.5, 9.0, -0.125, 4.0, 1.0, 0.5]);
        let map = FeatureMap::from_vec(2, 2, 3, data);
        save_feature_map(&path, &map).unwrap();
        let loaded = load_feature_map(&path).unwrap();
        assert_eq!(loaded, map);
        // Re-saving produces identical bytes.
        let first = fs::read(&path).unwrap();
        save_feature_map(&path, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn depth_map_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.dmap");
        let field = ScalarField::from_vec(2, 3, f32_clean(&[0.5, 1.0, 1.5, 2.0, 2.5, 3.0]));
        save_depth_map(&path, &field).unwrap();
        assert_eq!(load_depth_map(&path).unwrap(), field);
    }

    #[test]
    fn mask_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.dmap");
        let mut mask = BoolField::filled(2, 2, false);
        mask.set(0, 1, true);
        mask.set(1, 0, true);
        save_mask(&path, &mask).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
    }

    #[test]
    fn corrupt_containers_report_byte_offsets() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.fmap");
        let map = FeatureMap::from_vec(1, 2, 2, f32_clean(&[1.0, 2.0, 3.0, 4.0]));
        save_feature_map(&path, &map).unwrap();
        let good = fs::read(&path).unwrap();

        fs::write(&path, b"XMAP").unwrap();
        match load_feature_map(&path).unwrap_err() {
            IoError::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }

        let mut wrong_version = good.clone();
        wrong_version[4] = 9;
        fs::write(&path, &wrong_version).unwrap();
        match load_feature_map(&path).unwrap_err() {
            IoError::Format { offset, .. } => assert_eq!(offset, 4),
            other => panic!("unexpected error {other:?}"),
        }

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        match load_feature_map(&path).unwrap_err() {
            IoError::Format { offset, message, .. } => {
                assert_eq!(offset, good.len() - 3);
                assert!(message.contains("truncated"));
            }
            other => panic!("unexpected error {other:?}"),
        }

        let mut trailing = good.clone();
        trailing.push(0);
        fs::write(&path, &trailing).unwrap();
        match load_feature_map(&path).unwrap_err() {
            IoError::Format { offset, message, .. } => {
                assert_eq!(offset, good.len());
                assert!(message.contains("trailing"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn sample_trajectory() -> Trajectory {
        let mut traj = Trajectory::new();
        for k in 0..5 {
            let axis = nalgebra::Unit::new_normalize(Vector3::new(0.3, -0.5, 0.81));
            let pose = SE3Pose::new(
                UnitQuaternion::from_axis_angle(&axis, 0.07 * k as f64),
                Vector3::new(0.1 * k as f64, -0.02 * k as f64, 1.0 + 0.3 * k as f64),
            );
            traj.push(0.5 * k as f64, pose);
        }
        traj
    }

    #[test]
    fn trajectory_text_round_trips_to_nine_decimals() {
        let traj = sample_trajectory();
        let text = trajectory_to_string(&traj);
        assert!(text.starts_with("# timestamp"));
        let parsed = parse_trajectory(&text, "mem").unwrap();
        assert_eq!(parsed.len(), traj.len());
        for (a, b) in parsed.poses().iter().zip(traj.poses()) {
            assert_relative_eq!(a.translation, b.translation, epsilon = 1e-8);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-7);
        }
        // The writer is deterministic.
        assert_eq!(text, trajectory_to_string(&traj));
    }

    #[test]
    fn trajectory_parse_errors_carry_line_numbers() {
        let text = "# header\n0.0 0 0 0 0 0 0 1\nbroken line here\n";
        match parse_trajectory(text, "t.txt").unwrap_err() {
            IoError::Parse { path, line, .. } => {
                assert_eq!(path, "t.txt");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected error {other:?}"),
        }
        let back = "0.0 0 0 0 0 0 0 1\n-1.0 0 0 0 0 0 0 1\n";
        match parse_trajectory(back, "t.txt").unwrap_err() {
            IoError::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("non-increasing"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn pgm_scales_extremes_and_embeds_the_scale() {
        let field = ScalarField::from_vec(1, 3, vec![0.5, 1.0, 1.5]);
        let bytes = scalar_field_to_pgm(&field);
        let text = String::from_utf8_lossy(&bytes[..bytes.len() - 3]);
        assert!(text.starts_with("P5\n"));
        assert!(text.contains("umin=0.5"));
        assert!(text.contains("umax=1.5"));
        assert!(text.contains("3 1\n255\n"));
        let pixels = &bytes[bytes.len() - 3..];
        assert_eq!(pixels, &[0u8, 128, 255]);

        let flat = ScalarField::filled(1, 2, 2.0);
        let flat_bytes = scalar_field_to_pgm(&flat);
        assert_eq!(&flat_bytes[flat_bytes.len() - 2..], &[0u8, 0]);
    }

    #[test]
    fn field_csv_round_trips_exactly() {
        let field = ScalarField::from_vec(
            2,
            3,
            vec![0.1, -2.5e-17, 3.0, std::f64::consts::PI, 1e300, -0.0],
        );
        let text = scalar_field_to_csv(&field);
        let parsed = parse_scalar_field_csv(&text, "mem").unwrap();
        for (a, b) in parsed.as_slice().iter().zip(field.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn trace_csvs_have_pinned_headers() {
        let rows = vec![PhaseTraceRow {
            phase: "init.ba".into(),
            iter: 0,
            energy: 1.5,
            damping: 1e-4,
            step_norm: 0.25,
        }];
        let energy = energy_trace_to_csv(&rows);
        assert!(energy.starts_with("phase,iter,energy,damping,step_norm\n"));
        assert!(energy.contains("init.ba,0,1.5,0.0001,0.25\n"));

        let thetas = vec![
            ("init.gd".to_string(), DVector::from_vec(vec![0.5, -1.0])),
            ("init.gd".to_string(), DVector::from_vec(vec![0.25, -0.75])),
        ];
        let theta = theta_trace_to_csv(&thetas);
        assert!(theta.starts_with("phase,step,theta_0,theta_1\n"));
        assert!(theta.contains("init.gd,1,0.25,-0.75\n"));
    }

    #[test]
    fn session_directory_contains_every_artifact() {
        use crate::frame_graph::FrameGraph;
        let traj = sample_trajectory();
        let result = SessionResult {
            keyframe_trajectory: traj.clone(),
            full_trajectory: traj,
            uncertainty: vec![
                (0, ScalarField::filled(2, 2, 0.7)),
                (3, ScalarField::filled(2, 2, 1.2)),
            ],
            energy_trace: vec![],
            theta_trace: vec![],
            config_echo: vec![("window_size".into(), "8".into())],
            graph: FrameGraph::new(),
        };
        let dir = tempdir().unwrap();
        let written = save_session_result(dir.path(), &result).unwrap();
        for name in [
            "traj_kf.txt",
            "traj_full.txt",
            "uncertainty/kf_0000.pgm",
            "uncertainty/kf_0000.csv",
            "uncertainty/kf_0003.pgm",
            "uncertainty/kf_0003.csv",
            "energy_trace.csv",
            "theta_trace.csv",
            "config.txt",
        ] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        assert_eq!(written.len(), 9);
        let config = fs::read_to_string(dir.path().join("config.txt")).unwrap();
        assert_eq!(config, "window_size = 8\n");
    }
}
