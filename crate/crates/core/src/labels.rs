//! Oriented bounding boxes, point-in-box membership, and the persistence
//! percentile filter for pseudo-labels.
//!
//! A candidate box survives the filter only when the points it contains are
//! not too persistent: the nearest-rank percentile of their scores must lie
//! strictly below the threshold. Nearest rank (the `ceil(fraction * n)`-th
//! smallest value) keeps the estimator order-statistic-exact and free of
//! interpolation weights; boxes containing fewer than `min_points` points
//! are rejected outright, since a percentile over an empty or near-empty
//! set is not evidence of anything.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::geom::{Point3, PointCloud};

#[derive(Debug, Error)]
pub enum LabelsError {
    #[error("percentile of an empty value set")]
    EmptyInput,
    #[error("cloud has {cloud} points but {scores} scores")]
    LengthMismatch { cloud: usize, scores: usize },
    #[error("invalid filter config: {reason}")]
    InvalidConfig { reason: String },
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A 3D detection candidate: center, (length, width, height), yaw about +z,
/// detector confidence and class label. Yaw is normalized to (-pi, pi] at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedBox {
    pub center: Point3,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
    pub score: f64,
    pub class: String,
}

fn normalize_yaw(yaw: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut y = yaw.rem_euclid(two_pi);
    if y > std::f64::consts::PI {
        y -= two_pi;
    }
    y
}

impl OrientedBox {
    pub fn new(
        center: Point3,
        dims: (f64, f64, f64),
        yaw: f64,
        score: f64,
        class: impl Into<String>,
    ) -> Self {
        let (length, width, height) = dims;
        assert!(length > 0.0 && width > 0.0 && height > 0.0, "box dims must be positive");
        OrientedBox {
            center,
            length,
            width,
            height,
            yaw: normalize_yaw(yaw),
            score,
            class: class.into(),
        }
    }

    /// Membership test in box coordinates (translate by -center, rotate by
    /// -yaw); the boundary is inclusive.
    pub fn contains(&self, p: Point3) -> bool {
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        let dz = p.z - self.center.z;
        let (sin, cos) = self.yaw.sin_cos();
        let local_x = cos * dx + sin * dy;
        let local_y = -sin * dx + cos * dy;
        local_x.abs() <= self.length / 2.0
            && local_y.abs() <= self.width / 2.0
            && dz.abs() <= self.height / 2.0
    }
}

/// Indices of the cloud points inside the box, ascending.
pub fn points_in_box(b: &OrientedBox, cloud: &PointCloud) -> Vec<usize> {
    cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| b.contains(p).then_some(i))
        .collect()
}

/// Nearest-rank percentile: sort ascending, return the element at rank
/// `ceil(fraction * n)` (1-indexed).
pub fn percentile_nearest_rank(values: &[f64], fraction: f64) -> Result<f64, LabelsError> {
    assert!(fraction > 0.0 && fraction < 1.0, "fraction must lie in (0, 1)");
    if values.is_empty() {
        return Err(LabelsError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let rank = ((fraction * values.len() as f64).ceil() as usize).clamp(1, values.len());
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Percentile fraction evaluated over a box's contained scores.
    pub percentile: f64,
    /// A box is kept only when that percentile is strictly below this.
    pub threshold: f64,
    /// Minimum contained points for the percentile to mean anything.
    pub min_points: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { percentile: 0.20, threshold: 0.7, min_points: 1 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), LabelsError> {
        if !(self.percentile > 0.0 && self.percentile < 1.0) {
            return Err(LabelsError::InvalidConfig {
                reason: "percentile must lie in (0, 1)".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(LabelsError::InvalidConfig {
                reason: "threshold must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectionReason {
    /// The percentile of contained scores was at or above the threshold.
    TooPersistent,
    /// Fewer than `min_points` contained points.
    TooFewPoints,
}

impl RejectionReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectionReason::TooPersistent => "too_persistent",
            RejectionReason::TooFewPoints => "too_few_points",
        }
    }
}

/// Per-box outcome, machine-readable.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDecision {
    pub box_index: usize,
    pub kept: bool,
    pub reason: Option<RejectionReason>,
    pub num_points: usize,
    /// Computed whenever the box contains at least one point.
    pub percentile_value: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    /// Kept boxes in input order.
    pub kept: Vec<OrientedBox>,
    pub rejected: Vec<(OrientedBox, RejectionReason)>,
    pub decisions: Vec<BoxDecision>,
}

/// Apply the percentile filter to every candidate box. `scores[i]` is the
/// persistence score of `cloud.points[i]`.
pub fn filter_pseudo_labels(
    boxes: &[OrientedBox],
    cloud: &PointCloud,
    scores: &[f64],
    cfg: &FilterConfig,
) -> Result<FilterOutcome, LabelsError> {
    if scores.len() != cloud.len() {
        return Err(LabelsError::LengthMismatch { cloud: cloud.len(), scores: scores.len() });
    }
    let decisions: Vec<BoxDecision> = boxes
        .par_iter()
        .enumerate()
        .map(|(box_index, b)| {
            let inside = points_in_box(b, cloud);
            let values: Vec<f64> = inside.iter().map(|&i| scores[i]).collect();
            let percentile_value = if values.is_empty() {
                None
            } else {
                Some(percentile_nearest_rank(&values, cfg.percentile).expect("non-empty"))
            };
            if inside.len() < cfg.min_points {
                return BoxDecision {
                    box_index,
                    kept: false,
                    reason: Some(RejectionReason::TooFewPoints),
                    num_points: inside.len(),
                    percentile_value,
                };
            }
            let pct = percentile_value.expect("min_points >= 1 guarantees points");
            if pct < cfg.threshold {
                BoxDecision { box_index, kept: true, reason: None, num_points: inside.len(), percentile_value }
            } else {
                BoxDecision {
                    box_index,
                    kept: false,
                    reason: Some(RejectionReason::TooPersistent),
                    num_points: inside.len(),
                    percentile_value,
                }
            }
        })
        .collect();

    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for d in &decisions {
        if d.kept {
            kept.push(boxes[d.box_index].clone());
        } else {
            rejected.push((boxes[d.box_index].clone(), d.reason.expect("rejected has reason")));
        }
    }
    Ok(FilterOutcome { kept, rejected, decisions })
}

/// Label text format: one box per line,
/// `class cx cy cz length width height yaw score`, `#` comments ignored.
/// Floats use shortest round-trip formatting, so values reload bit-exactly.
pub fn save_labels(boxes: &[OrientedBox], path: &Path) -> Result<(), LabelsError> {
    let mut out = String::from("# class cx cy cz length width height yaw score\n");
    for b in boxes {
        assert!(
            !b.class.contains(char::is_whitespace) && !b.class.is_empty(),
            "class labels must be non-empty and whitespace-free"
        );
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            b.class, b.center.x, b.center.y, b.center.z, b.length, b.width, b.height, b.yaw, b.score
        ));
    }
    fs::write(path, out).map_err(|e| LabelsError::Io { path: path.to_path_buf(), source: e })
}

pub fn load_labels(path: &Path) -> Result<Vec<OrientedBox>, LabelsError> {
    let text = fs::read_to_string(path)
        .map_err(|e| LabelsError::Io { path: path.to_path_buf(), source: e })?;
    let mut boxes = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| LabelsError::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(malformed(&format!("expected 9 fields, got {}", fields.len())));
        }
        let mut vals = [0.0f64; 8];
        for (k, field) in fields[1..].iter().enumerate() {
            vals[k] = field.parse().map_err(|_| malformed("bad float"))?;
            if !vals[k].is_finite() {
                return Err(malformed("non-finite value"));
            }
        }
        if !(vals[3] > 0.0 && vals[4] > 0.0 && vals[5] > 0.0) {
            return Err(malformed("box dims must be positive"));
        }
        boxes.push(OrientedBox::new(
            Point3::new(vals[0], vals[1], vals[2]),
            (vals[3], vals[4], vals[5]),
            vals[6],
            vals[7],
            fields[0],
        ));
    }
    Ok(boxes)
}
