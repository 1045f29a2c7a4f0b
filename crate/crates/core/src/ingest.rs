//! File I/O for point clouds, poses and dataset manifests, plus the
//! per-location dense-cloud accumulation.
//!
//! Formats (all multi-byte values little-endian):
//!
//! - point clouds: magic `PCB1`, u32 point count, then one 16-byte record
//!   per point: f32 x, y, z, intensity. Coordinates are stored relative to
//!   the manifest's origin offset so f32 keeps millimeter precision; the
//!   fixed-width records make offsets trivially computable.
//! - poses: ASCII, one record per line,
//!   `frame_id tx ty tz qw qx qy qz arclength`, whitespace-separated,
//!   `#`-prefixed lines ignored. Quaternion order is (w, x, y, z).
//! - manifest: TOML listing `origin_offset`, optional explicit `locations`,
//!   and one `[[traversals]]` table per traversal with `id`, `poses` and
//!   `frames` paths (resolved relative to the manifest file).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{
    transform_to_global, DenseCloud, Frame, Point3, PointCloud, Pose, Quaternion, Traversal,
};

pub const POINT_CLOUD_MAGIC: &[u8; 4] = b"PCB1";
const POINT_RECORD_BYTES: usize = 16;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic at byte {offset} (expected {expected:?})")]
    BadMagic { path: PathBuf, offset: u64, expected: String },
    #[error("{path}: truncated file at byte {offset}")]
    TruncatedFile { path: PathBuf, offset: u64 },
    #[error("{path}: non-finite value in point {index} at byte {offset}")]
    NonFinitePoint { path: PathBuf, offset: u64, index: usize },
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord { path: PathBuf, line: usize, reason: String },
    #[error("{path}:{line}: arclength decreases")]
    NonMonotonicArclength { path: PathBuf, line: usize },
    #[error("traversal {traversal_id} has no frames within the window around location {location}")]
    NoFramesInWindow { traversal_id: u64, location: f64 },
    #[error("invalid accumulation config: {reason}")]
    InvalidConfig { reason: String },
    #[error("{path}: manifest parse error: {message}")]
    ManifestParse { path: PathBuf, message: String },
    #[error("{path}: manifest lists no traversals")]
    ManifestEmpty { path: PathBuf },
    #[error("{path}: duplicate traversal id {id}")]
    DuplicateTraversalId { path: PathBuf, id: u64 },
    #[error("manifest references missing file {path}")]
    MissingFile { path: PathBuf },
    #[error("traversal {traversal_id}: {poses} pose records vs {frames} frame files")]
    FrameCountMismatch { traversal_id: u64, poses: usize, frames: usize },
    #[error("traversal {traversal_id}: {reason}")]
    InvalidTraversal { traversal_id: u64, reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Point-cloud binary format
// ---------------------------------------------------------------------------

/// Read a `PCB1` point-cloud file. Rejects non-finite coordinates and
/// intensities, naming the byte offset of the offending record.
pub fn load_point_cloud(path: &Path) -> Result<PointCloud, IngestError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 4 || &bytes[0..4] != POINT_CLOUD_MAGIC {
        return Err(IngestError::BadMagic {
            path: path.to_path_buf(),
            offset: 0,
            expected: String::from_utf8_lossy(POINT_CLOUD_MAGIC).into_owned(),
        });
    }
    if bytes.len() < 8 {
        return Err(IngestError::TruncatedFile { path: path.to_path_buf(), offset: bytes.len() as u64 });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected_len = 8 + count * POINT_RECORD_BYTES;
    if bytes.len() < expected_len {
        return Err(IngestError::TruncatedFile {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
        });
    }
    let mut points = Vec::with_capacity(count);
    let mut intensity = Vec::with_capacity(count);
    for i in 0..count {
        let offset = 8 + i * POINT_RECORD_BYTES;
        let f = |k: usize| {
            let at = offset + 4 * k;
            f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
        };
        let (x, y, z, inten) = (f(0), f(1), f(2), f(3));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && inten.is_finite()) {
            return Err(IngestError::NonFinitePoint {
                path: path.to_path_buf(),
                offset: offset as u64,
                index: i,
            });
        }
        points.push(Point3::new(x as f64, y as f64, z as f64));
        intensity.push(inten as f64);
    }
    Ok(PointCloud::with_intensity(points, intensity))
}

/// Write a `PCB1` point-cloud file. A missing intensity channel is written
/// as zeros, so loading always yields an intensity channel.
pub fn write_point_cloud(cloud: &PointCloud, path: &Path) -> Result<(), IngestError> {
    let mut bytes = Vec::with_capacity(8 + cloud.len() * POINT_RECORD_BYTES);
    bytes.extend_from_slice(POINT_CLOUD_MAGIC);
    bytes.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for (i, p) in cloud.points.iter().enumerate() {
        let inten = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for value in [p.x as f32, p.y as f32, p.z as f32, inten as f32] {
            bytes.extend_from_slice(&value.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Pose text format
// ---------------------------------------------------------------------------

pub type PoseRecord = (u64, Pose, f64);

/// Load pose records. Quaternions are normalized on load; arclengths must be
/// non-decreasing.
pub fn load_poses(path: &Path) -> Result<Vec<PoseRecord>, IngestError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut records: Vec<PoseRecord> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| IngestError::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(malformed(&format!("expected 9 fields, got {}", fields.len())));
        }
        let frame_id: u64 = fields[0].parse().map_err(|_| malformed("bad frame id"))?;
        let mut vals = [0.0f64; 8];
        for (k, field) in fields[1..].iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| malformed("bad float"))?;
            if !v.is_finite() {
                return Err(malformed("non-finite value"));
            }
            vals[k] = v;
        }
        let rotation = Quaternion::normalized(vals[3], vals[4], vals[5], vals[6])
            .ok_or_else(|| malformed("quaternion norm too small"))?;
        let arclength = vals[7];
        if let Some(&(_, _, prev)) = records.last() {
            if arclength < prev {
                return Err(IngestError::NonMonotonicArclength {
                    path: path.to_path_buf(),
                    line: line_no,
                });
            }
        }
        let pose = Pose::new(Point3::new(vals[0], vals[1], vals[2]), rotation);
        records.push((frame_id, pose, arclength));
    }
    Ok(records)
}

/// Write pose records using Rust's shortest round-trip float formatting, so
/// a load reproduces every value bit-exactly.
pub fn write_poses(records: &[PoseRecord], path: &Path) -> Result<(), IngestError> {
    let mut out = String::from("# frame_id tx ty tz qw qx qy qz arclength\n");
    for (frame_id, pose, arclength) in records {
        let t = pose.translation;
        let q = pose.rotation;
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            frame_id,
            t.x,
            t.y,
            t.z,
            q.w(),
            q.x(),
            q.y(),
            q.z(),
            arclength
        ));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Accumulation
// ---------------------------------------------------------------------------

/// Route quantization: locations every `spacing_m` meters, each gathering
/// the frames within `window_hm` meters of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccumulationConfig {
    pub spacing_m: f64,
    pub window_hm: f64,
}

impl Default for AccumulationConfig {
    fn default() -> Self {
        AccumulationConfig { spacing_m: 2.0, window_hm: 20.0 }
    }
}

impl AccumulationConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if !self.spacing_m.is_finite() || self.spacing_m <= 0.0 {
            return Err(IngestError::InvalidConfig { reason: "spacing must be > 0".into() });
        }
        if !self.window_hm.is_finite() || self.window_hm <= 0.0 {
            return Err(IngestError::InvalidConfig { reason: "window must be > 0".into() });
        }
        if self.window_hm < self.spacing_m / 2.0 {
            return Err(IngestError::InvalidConfig {
                reason: "window must be >= spacing/2 so locations tile the route".into(),
            });
        }
        Ok(())
    }
}

/// Union of the globally-transformed frames whose arclength lies in the
/// closed interval `[location - window, location + window]`.
///
/// Output point order is (frame order, point order within frame), so the
/// result is deterministic. The intensity channel is kept only when every
/// contributing frame carries one.
pub fn accumulate_dense(
    traversal: &Traversal,
    location: f64,
    cfg: &AccumulationConfig,
) -> Result<DenseCloud, IngestError> {
    let selected: Vec<&Frame> = traversal
        .frames()
        .iter()
        .filter(|f| (f.arclength - location).abs() <= cfg.window_hm)
        .collect();
    if selected.is_empty() {
        return Err(IngestError::NoFramesInWindow {
            traversal_id: traversal.traversal_id(),
            location,
        });
    }
    let total: usize = selected.iter().map(|f| f.cloud.len()).sum();
    let keep_intensity = selected.iter().all(|f| f.cloud.intensity.is_some());
    let mut points = Vec::with_capacity(total);
    let mut intensity = if keep_intensity { Some(Vec::with_capacity(total)) } else { None };
    let mut source_frame_ids = Vec::with_capacity(selected.len());
    for frame in &selected {
        source_frame_ids.push(frame.frame_id);
        let global = transform_to_global(&frame.cloud, &frame.pose);
        points.extend_from_slice(&global.points);
        if let (Some(acc), Some(ch)) = (intensity.as_mut(), global.intensity.as_ref()) {
            acc.extend_from_slice(ch);
        }
    }
    Ok(DenseCloud {
        traversal_id: traversal.traversal_id(),
        location,
        points: PointCloud { points, intensity },
        source_frame_ids,
    })
}

/// Arithmetic sequence of locations from the minimum arclength over all
/// traversals to the maximum, step `spacing_m`.
pub fn locations_for_route(traversals: &[Traversal], cfg: &AccumulationConfig) -> Vec<f64> {
    assert!(!traversals.is_empty(), "at least one traversal required");
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for t in traversals {
        let (lo, hi) = t.arclength_span();
        min = min.min(lo);
        max = max.max(hi);
    }
    if max <= min {
        return vec![min];
    }
    // The relative epsilon keeps a location landing exactly on `max` from
    // being dropped to accumulated rounding.
    let steps = ((max - min) / cfg.spacing_m * (1.0 + 1e-12)).floor() as usize;
    (0..=steps).map(|k| min + k as f64 * cfg.spacing_m).collect()
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawManifest {
    origin_offset: [f64; 3],
    #[serde(default)]
    locations: Option<Vec<f64>>,
    #[serde(default)]
    traversals: Vec<RawTraversal>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTraversal {
    id: u64,
    poses: String,
    frames: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ManifestTraversal {
    pub id: u64,
    pub poses: PathBuf,
    pub frames: Vec<PathBuf>,
}

/// Parsed and validated dataset manifest. All paths are resolved relative
/// to the manifest file and checked for existence.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub origin_offset: Point3,
    pub locations: Option<Vec<f64>>,
    pub traversals: Vec<ManifestTraversal>,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, IngestError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let raw: RawManifest = toml::from_str(&text).map_err(|e| IngestError::ManifestParse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if raw.traversals.is_empty() {
        return Err(IngestError::ManifestEmpty { path: path.to_path_buf() });
    }
    if raw.locations.as_ref().is_some_and(|l| l.is_empty()) {
        return Err(IngestError::ManifestParse {
            path: path.to_path_buf(),
            message: "explicit locations list is empty".into(),
        });
    }
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = std::collections::HashSet::new();
    let mut traversals = Vec::with_capacity(raw.traversals.len());
    for t in &raw.traversals {
        if !seen.insert(t.id) {
            return Err(IngestError::DuplicateTraversalId { path: path.to_path_buf(), id: t.id });
        }
        let poses = root.join(&t.poses);
        if !poses.is_file() {
            return Err(IngestError::MissingFile { path: poses });
        }
        let mut frames = Vec::with_capacity(t.frames.len());
        for f in &t.frames {
            let frame = root.join(f);
            if !frame.is_file() {
                return Err(IngestError::MissingFile { path: frame });
            }
            frames.push(frame);
        }
        traversals.push(ManifestTraversal { id: t.id, poses, frames });
    }
    let [ox, oy, oz] = raw.origin_offset;
    Ok(DatasetManifest {
        origin_offset: Point3::new(ox, oy, oz),
        locations: raw.locations,
        traversals,
    })
}

/// Write a manifest whose paths are relative to `dir`. Used by the
/// simulator and tests; handy for building datasets by hand too.
pub fn write_manifest(
    dir: &Path,
    file_name: &str,
    origin_offset: Point3,
    locations: Option<&[f64]>,
    traversals: &[(u64, String, Vec<String>)],
) -> Result<PathBuf, IngestError> {
    let raw = RawManifest {
        origin_offset: [origin_offset.x, origin_offset.y, origin_offset.z],
        locations: locations.map(|l| l.to_vec()),
        traversals: traversals
            .iter()
            .map(|(id, poses, frames)| RawTraversal {
                id: *id,
                poses: poses.clone(),
                frames: frames.clone(),
            })
            .collect(),
    };
    let text = toml::to_string(&raw).expect("manifest serializes");
    let path = dir.join(file_name);
    let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Load every traversal listed in the manifest. Pose translations have the
/// manifest's origin offset subtracted, so all in-memory coordinates are
/// origin-relative. The i-th frame file pairs with the i-th pose record;
/// frame ids come from the pose records.
pub fn load_traversals(manifest: &DatasetManifest) -> Result<Vec<Traversal>, IngestError> {
    let o = manifest.origin_offset;
    let mut out = Vec::with_capacity(manifest.traversals.len());
    for t in &manifest.traversals {
        let poses = load_poses(&t.poses)?;
        if poses.len() != t.frames.len() {
            return Err(IngestError::FrameCountMismatch {
                traversal_id: t.id,
                poses: poses.len(),
                frames: t.frames.len(),
            });
        }
        let mut frames = Vec::with_capacity(poses.len());
        for ((frame_id, pose, arclength), frame_path) in poses.into_iter().zip(&t.frames) {
            let cloud = load_point_cloud(frame_path)?;
            let shifted = Pose::new(
                Point3::new(
                    pose.translation.x - o.x,
                    pose.translation.y - o.y,
                    pose.translation.z - o.z,
                ),
                pose.rotation,
            );
            frames.push(Frame { frame_id, cloud, pose: shifted, arclength });
        }
        let traversal = Traversal::new(t.id, frames).map_err(|e| IngestError::InvalidTraversal {
            traversal_id: t.id,
            reason: e.to_string(),
        })?;
        out.push(traversal);
    }
    Ok(out)
}
