//! Trajectory and uncertainty evaluation: timestamp association, similarity
//! aligned absolute trajectory error, ROC classification quality of the
//! uncertainty fields, and the ablation summary table.

use thiserror::Error;

use crate::field::{BoolField, ScalarField};
use crate::geometry::{umeyama_sim3, GeometryError, SE3Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("empty-trajectory: needs at least one sample")]
    EmptyTrajectory,
    #[error("no-association: no timestamp pairs within {max_dt}")]
    NoAssociation { max_dt: f64 },
    #[error("degenerate-labels: both classes must be present")]
    DegenerateLabels,
    #[error("length-mismatch: {a} scores vs {b} labels")]
    LengthMismatch { a: usize, b: usize },
    #[error("zero-path-length: trajectory has no extent to normalize by")]
    ZeroPathLength,
    #[error("format: line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A time-stamped pose sequence. Poses are camera-to-world, so the
/// translation of each sample is the camera position; timestamps are kept
/// ascending by construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    timestamps: Vec<f64>,
    poses: Vec<SE3Pose>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(timestamps: Vec<f64>, poses: Vec<SE3Pose>) -> Self {
        assert_eq!(timestamps.len(), poses.len(), "one pose per timestamp");
        assert!(
            timestamps.windows(2).all(|w| w[0] < w[1]),
            "timestamps must be strictly increasing"
        );
        Self { timestamps, poses }
    }

    /// Appends a sample; panics unless its timestamp exceeds the last one.
    pub fn push(&mut self, timestamp: f64, pose: SE3Pose) {
        if let Some(&last) = self.timestamps.last() {
            assert!(timestamp > last, "timestamps must be strictly increasing");
        }
        self.timestamps.push(timestamp);
        self.poses.push(pose);
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn poses(&self) -> &[SE3Pose] {
        &self.poses
    }

    /// Total polyline length of the camera positions.
    pub fn path_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].translation - w[0].translation).norm())
            .sum()
    }
}

/// Default association window: half the median interval of the reference
/// trajectory.
pub fn default_max_dt(reference: &Trajectory) -> f64 {
    let ts = reference.timestamps();
    if ts.len() < 2 {
        return 0.0;
    }
    let mut gaps: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    0.5 * gaps[gaps.len() / 2]
}

/// Greedy nearest-timestamp association: candidate pairs within `max_dt`
/// are taken in ascending |dt| order (ties broken by indices), each sample
/// of either trajectory used at most once. Returns `(est index, gt index)`
/// pairs sorted by est index.
pub fn associate(
    est: &Trajectory,
    gt: &Trajectory,
    max_dt: f64,
) -> Result<Vec<(usize, usize)>, EvalError> {
    let mut candidates = Vec::new();
    for (i, &te) in est.timestamps().iter().enumerate() {
        for (j, &tg) in gt.timestamps().iter().enumerate() {
            let dt = (te - tg).abs();
            if dt <= max_dt {
                candidates.push((dt, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_est = vec![false; est.len()];
    let mut used_gt = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_est[i] && !used_gt[j] {
            used_est[i] = true;
            used_gt[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoAssociation { max_dt });
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Similarity-aligned absolute trajectory error: associates by timestamp
/// (window = half the median ground-truth interval), aligns the estimate
/// onto the ground truth with a least-squares similarity transform, and
/// returns the RMS residual of the camera positions. With `normalize`, the
/// ground-truth positions are first rescaled so the full ground-truth path
/// has unit length, making the result invariant to ground-truth scale.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, normalize: bool) -> Result<f64, EvalError> {
    if est.is_empty() || gt.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    let scale = if normalize {
        let len = gt.path_length();
        if len <= 0.0 {
            return Err(EvalError::ZeroPathLength);
        }
        1.0 / len
    } else {
        1.0
    };
    let pairs = associate(est, gt, default_max_dt(gt))?;
    let est_pts: Vec<_> = pairs.iter().map(|&(i, _)| est.poses()[i].translation).collect();
    let gt_pts: Vec<_> = pairs.iter().map(|&(_, j)| scale * gt.poses()[j].translation).collect();
    let align = umeyama_sim3(&est_pts, &gt_pts)?;
    let mut sum = 0.0;
    for (e, g) in est_pts.iter().zip(&gt_pts) {
        sum += (align.apply(e) - g).norm_squared();
    }
    Ok((sum / pairs.len() as f64).sqrt())
}

/// ROC area under the curve of `scores` against boolean labels, ties
/// resolved by midranks. 1.0 means every positive outscores every negative.
pub fn uncertainty_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { a: scores.len(), b: labels.len() });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        // Ranks are 1-based; every member of a tie group gets the midrank.
        let midrank = (k + 1 + end) as f64 / 2.0;
        for &idx in &order[k..end] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        k = end;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64);
    Ok(auc)
}

/// Pools per-keyframe uncertainty fields with their ground-truth dynamic
/// masks into flat score/label arrays for [`uncertainty_auc`]. `fields`
/// holds `(frame index, uncertainty)` pairs; `masks` is indexed by frame.
pub fn pooled_uncertainty_labels(
    fields: &[(usize, ScalarField)],
    masks: &[BoolField],
) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (frame, u) in fields {
        let mask = &masks[*frame];
        for row in 0..u.height() {
            for col in 0..u.width() {
                scores.push(u.at(row, col));
                labels.push(mask.at(row, col));
            }
        }
    }
    (scores, labels)
}

/// One row of the ablation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub ate_rmse: f64,
    pub auc: f64,
}

/// Renders ablation rows as CSV. Floats use the shortest round-trip
/// representation so [`parse_ablation_csv`] recovers them exactly.
pub fn write_ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,ate_rmse,auc\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.variant, r.seed, r.ate_rmse, r.auc));
    }
    out
}

pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>, EvalError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if idx == 0 {
            if line != "variant,seed,ate_rmse,auc" {
                return Err(EvalError::Format {
                    line: line_no,
                    message: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(EvalError::Format {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let parse_f = |s: &str, what: &str| {
            s.parse::<f64>().map_err(|_| EvalError::Format {
                line: line_no,
                message: format!("bad {what} value {s:?}"),
            })
        };
        rows.push(AblationRow {
            variant: fields[0].to_string(),
            seed: fields[1].parse().map_err(|_| EvalError::Format {
                line: line_no,
                message: format!("bad seed value {:?}", fields[1]),
            })?,
            ate_rmse: parse_f(fields[2], "ate_rmse")?,
            auc: parse_f(fields[3], "auc")?,
        });
    }
    Ok(rows)
}
