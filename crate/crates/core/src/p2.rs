//! Persistence scores for query points against a set of per-traversal
//! dense clouds.
//!
//! For a query point q, count its neighbors strictly within radius r in
//! each traversal's dense cloud, normalize the counts into a categorical
//! distribution over traversals, and score the normalized entropy
//! `H(P) / ln(T)`. A point whose neighborhood is populated equally in every
//! traversal scores 1 (persistent background); a point seen in only one
//! traversal scores 0; a point with no neighbors anywhere scores 0 by the
//! dedicated all-zero branch.
//!
//! Natural logarithms throughout. The ratio is base-independent, which a
//! regression test pins down.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geom::{transform_to_global, DenseCloud, Point3, Traversal};
use crate::ingest::{accumulate_dense, locations_for_route, AccumulationConfig, IngestError};
use crate::spatial::build_index;

pub const SCORE_FILE_MAGIC: &[u8; 4] = b"P2S1";

#[derive(Debug, Error)]
pub enum P2Error {
    #[error("need at least {need} traversals, got {got}")]
    TooFewTraversals { got: usize, need: usize },
    #[error("invalid config: {reason}")]
    InvalidConfig { reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic at byte 0 (expected P2S1)")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated file at byte {offset}")]
    TruncatedFile { path: PathBuf, offset: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct P2Config {
    /// Neighbor-count radius in meters.
    pub radius_r: f64,
    /// Minimum number of traversals required; the score is meaningless for
    /// a single traversal (the normalizer ln(1) is zero).
    pub min_traversals: usize,
}

impl Default for P2Config {
    fn default() -> Self {
        P2Config { radius_r: 0.3, min_traversals: 2 }
    }
}

impl P2Config {
    pub fn validate(&self) -> Result<(), P2Error> {
        if !self.radius_r.is_finite() || self.radius_r <= 0.0 {
            return Err(P2Error::InvalidConfig { reason: "radius must be > 0".into() });
        }
        if self.min_traversals < 2 {
            return Err(P2Error::InvalidConfig { reason: "min_traversals must be >= 2".into() });
        }
        Ok(())
    }
}

/// Scores for a batch of query points, one per point in query order, each
/// in [0, 1]. The per-traversal count matrix is retained on request.
#[derive(Debug, Clone)]
pub struct P2Result {
    pub scores: Vec<f64>,
    pub per_traversal_counts: Option<Vec<Vec<usize>>>,
}

/// Count matrix: entry `(i, t)` is the number of points of
/// `dense_clouds[t]` strictly within `cfg.radius_r` of `queries[i]`.
pub fn neighbor_counts(
    dense_clouds: &[DenseCloud],
    queries: &[Point3],
    cfg: &P2Config,
) -> Result<Vec<Vec<usize>>, P2Error> {
    cfg.validate()?;
    if dense_clouds.len() < cfg.min_traversals {
        return Err(P2Error::TooFewTraversals {
            got: dense_clouds.len(),
            need: cfg.min_traversals,
        });
    }
    let mut rows = vec![vec![0usize; dense_clouds.len()]; queries.len()];
    for (t, dense) in dense_clouds.iter().enumerate() {
        let index = build_index(&dense.points, cfg.radius_r);
        let column = index.count_within_batch(queries, cfg.radius_r);
        for (row, count) in rows.iter_mut().zip(column) {
            row[t] = count;
        }
    }
    Ok(rows)
}

/// Normalize one count row into a categorical distribution over traversals.
/// Returns `None` when every count is zero (the all-zero marker consumed by
/// `p2_score`).
pub fn normalize_counts(row: &[usize]) -> Option<Vec<f64>> {
    assert!(row.len() >= 2, "need counts for at least two traversals");
    let total: usize = row.iter().sum();
    if total == 0 {
        return None;
    }
    let total = total as f64;
    Some(row.iter().map(|&n| n as f64 / total).collect())
}

/// Normalized entropy of a count row: 0 when all counts are zero, otherwise
/// `H(P) / ln(T)` with the convention `0 ln 0 = 0`. Clamped to [0, 1] only
/// against floating-point overshoot.
pub fn p2_score(row: &[usize]) -> f64 {
    assert!(row.len() >= 2, "need counts for at least two traversals");
    let Some(probs) = normalize_counts(row) else {
        return 0.0;
    };
    let mut entropy = 0.0;
    for p in probs {
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    (entropy / (row.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Score every query point against the given dense clouds.
pub fn compute_p2(
    dense_clouds: &[DenseCloud],
    queries: &[Point3],
    cfg: &P2Config,
    retain_counts: bool,
) -> Result<P2Result, P2Error> {
    let counts = neighbor_counts(dense_clouds, queries, cfg)?;
    let scores = counts.iter().map(|row| p2_score(row)).collect();
    Ok(P2Result {
        scores,
        per_traversal_counts: retain_counts.then_some(counts),
    })
}

/// Score a whole scan traversal against a set of historical traversals,
/// with locations derived from the history every `accum.spacing_m` meters.
pub fn compute_p2_over_route(
    history: &[Traversal],
    scan: &Traversal,
    accum: &AccumulationConfig,
    cfg: &P2Config,
    retain_counts: bool,
) -> Result<P2Result, P2Error> {
    cfg.validate()?;
    accum
        .validate()
        .map_err(|e| P2Error::InvalidConfig { reason: e.to_string() })?;
    if history.len() < cfg.min_traversals {
        return Err(P2Error::TooFewTraversals { got: history.len(), need: cfg.min_traversals });
    }
    let locations = locations_for_route(history, accum);
    compute_p2_at_locations(history, scan, &locations, accum, cfg, retain_counts)
}

/// Score a scan against its history at an explicit list of route locations
/// (e.g. a manifest's `locations`).
///
/// Each scan frame is assigned to the location nearest its arclength, its
/// points are placed into the global frame with the frame's recorded pose,
/// and the per-location dense clouds of the history are counted against. A
/// historical traversal with no frames near a location contributes an
/// empty cloud (zero counts). Scores come back in the scan's
/// (frame, point-within-frame) order.
pub fn compute_p2_at_locations(
    history: &[Traversal],
    scan: &Traversal,
    locations: &[f64],
    accum: &AccumulationConfig,
    cfg: &P2Config,
    retain_counts: bool,
) -> Result<P2Result, P2Error> {
    cfg.validate()?;
    accum
        .validate()
        .map_err(|e| P2Error::InvalidConfig { reason: e.to_string() })?;
    if history.len() < cfg.min_traversals {
        return Err(P2Error::TooFewTraversals { got: history.len(), need: cfg.min_traversals });
    }
    if locations.is_empty() {
        return Err(P2Error::InvalidConfig { reason: "need at least one location".into() });
    }

    // scan frame -> nearest location (ties to the lower location index)
    let mut frames_by_location: std::collections::BTreeMap<usize, Vec<usize>> =
        std::collections::BTreeMap::new();
    for (frame_idx, frame) in scan.frames().iter().enumerate() {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (loc_idx, &l) in locations.iter().enumerate() {
            let d = (frame.arclength - l).abs();
            if d < best_dist {
                best_dist = d;
                best = loc_idx;
            }
        }
        frames_by_location.entry(best).or_default().push(frame_idx);
    }

    // offsets of each frame's points in the flattened scan order
    let mut offsets = Vec::with_capacity(scan.frames().len());
    let mut total = 0usize;
    for frame in scan.frames() {
        offsets.push(total);
        total += frame.cloud.len();
    }

    let mut scores = vec![0.0f64; total];
    let mut counts_out: Option<Vec<Vec<usize>>> =
        retain_counts.then(|| vec![Vec::new(); total]);

    for (&loc_idx, frame_indices) in &frames_by_location {
        let location = locations[loc_idx];
        let dense: Vec<DenseCloud> = history
            .iter()
            .map(|t| match accumulate_dense(t, location, accum) {
                Ok(d) => d,
                Err(IngestError::NoFramesInWindow { .. }) => {
                    DenseCloud::empty(t.traversal_id(), location)
                }
                Err(e) => unreachable!("accumulate_dense only fails on empty windows: {e}"),
            })
            .collect();

        let mut queries = Vec::new();
        let mut query_slots = Vec::new();
        for &frame_idx in frame_indices {
            let frame = &scan.frames()[frame_idx];
            let global = transform_to_global(&frame.cloud, &frame.pose);
            for (k, &p) in global.points.iter().enumerate() {
                queries.push(p);
                query_slots.push(offsets[frame_idx] + k);
            }
        }

        let result = compute_p2(&dense, &queries, cfg, retain_counts)?;
        for (slot_idx, &slot) in query_slots.iter().enumerate() {
            scores[slot] = result.scores[slot_idx];
        }
        if let (Some(out), Some(counts)) = (counts_out.as_mut(), result.per_traversal_counts) {
            for (slot_idx, &slot) in query_slots.iter().enumerate() {
                out[slot] = counts[slot_idx].clone();
            }
        }
    }

    Ok(P2Result { scores, per_traversal_counts: counts_out })
}

/// Write scores as `P2S1`: magic, u32 count, count f32 scores in query
/// order.
pub fn save_scores(scores: &[f64], path: &Path) -> Result<(), P2Error> {
    let mut bytes = Vec::with_capacity(8 + scores.len() * 4);
    bytes.extend_from_slice(SCORE_FILE_MAGIC);
    bytes.extend_from_slice(&(scores.len() as u32).to_le_bytes());
    for &s in scores {
        bytes.extend_from_slice(&(s as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| P2Error::Io { path: path.to_path_buf(), source: e })
}

pub fn load_scores(path: &Path) -> Result<Vec<f64>, P2Error> {
    let bytes =
        fs::read(path).map_err(|e| P2Error::Io { path: path.to_path_buf(), source: e })?;
    if bytes.len() < 4 || &bytes[0..4] != SCORE_FILE_MAGIC {
        return Err(P2Error::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < 8 {
        return Err(P2Error::TruncatedFile { path: path.to_path_buf(), offset: bytes.len() as u64 });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + 4 * count {
        return Err(P2Error::TruncatedFile { path: path.to_path_buf(), offset: bytes.len() as u64 });
    }
    Ok((0..count)
        .map(|i| {
            let at = 8 + 4 * i;
            f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64
        })
        .collect())
}
