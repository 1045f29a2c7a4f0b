//! Voxel-quantized historical feature store.
//!
//! Each traversal's dense cloud is reduced to per-voxel feature vectors,
//! the per-traversal grids are aggregated element-wise across traversals
//! (mean or max per voxel, over the traversals that occupy it), and the
//! aggregate answers point queries. Storage is a sparse hash map: road
//! scenes occupy well under 1% of their bounding volume.
//!
//! The featurizer is a trait so a learned encoder can be slotted in later;
//! the default is a handcrafted 8-component statistic per voxel.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::geom::{DenseCloud, Point3};

pub const STORE_FILE_MAGIC: &[u8; 4] = b"SQF1";

pub type VoxelKey = (i64, i64, i64);

#[derive(Debug, Error)]
pub enum SquashError {
    #[error("dense cloud left no points inside the grid bounds")]
    EmptyAfterCropping,
    #[error("voxel grid specs differ: {what}")]
    SpecMismatch { what: String },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot derive bounds from empty input")]
    EmptyExtent,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic at byte 0 (expected SQF1)")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated file at byte {offset}")]
    TruncatedFile { path: PathBuf, offset: u64 },
}

/// Voxel grid geometry: cell size plus an axis-aligned bounding box used to
/// crop inputs. Keys are world-anchored (`floor(coord / voxel_size)`), so
/// grids with equal sizes align across traversals by construction; a point
/// exactly on a cell boundary goes to the cell whose lower edge it sits on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    pub voxel_size: f64,
    pub min: Point3,
    pub max: Point3,
}

impl VoxelGridSpec {
    /// Bounds from the extent of the given clouds, padded by one voxel on
    /// every side.
    pub fn from_clouds(clouds: &[DenseCloud], voxel_size: f64) -> Result<Self, SquashError> {
        assert!(voxel_size > 0.0, "voxel_size must be positive");
        let mut min = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut max = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut any = false;
        for cloud in clouds {
            for p in &cloud.points.points {
                any = true;
                min = Point3::new(min.x.min(p.x), min.y.min(p.y), min.z.min(p.z));
                max = Point3::new(max.x.max(p.x), max.y.max(p.y), max.z.max(p.z));
            }
        }
        if !any {
            return Err(SquashError::EmptyExtent);
        }
        let s = voxel_size;
        Ok(VoxelGridSpec {
            voxel_size,
            min: Point3::new(min.x - s, min.y - s, min.z - s),
            max: Point3::new(max.x + s, max.y + s, max.z + s),
        })
    }

    pub fn key_of(&self, p: &Point3) -> VoxelKey {
        let s = self.voxel_size;
        ((p.x / s).floor() as i64, (p.y / s).floor() as i64, (p.z / s).floor() as i64)
    }

    /// Center of the voxel addressed by `key`.
    pub fn center_of(&self, key: VoxelKey) -> Point3 {
        let s = self.voxel_size;
        Point3::new(
            (key.0 as f64 + 0.5) * s,
            (key.1 as f64 + 0.5) * s,
            (key.2 as f64 + 0.5) * s,
        )
    }

    pub fn contains(&self, p: &Point3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }
}

/// One voxel's points, handed to a featurizer.
pub struct VoxelPointSet<'a> {
    pub key: VoxelKey,
    pub center: Point3,
    pub voxel_size: f64,
    pub points: &'a [Point3],
    /// Parallel to `points` when the source cloud has an intensity channel.
    pub intensity: Option<&'a [f64]>,
}

/// Reduces one occupied voxel to a fixed-dimension feature vector.
pub trait Featurizer: Sync {
    fn dim(&self) -> usize;
    fn features_for(&self, voxel: &VoxelPointSet<'_>) -> Vec<f32>;
}

pub const HANDCRAFTED_DIM: usize = 8;

/// Default statistics per voxel, in component order:
///
/// 0. `ln(1 + count)`
/// 1. mean z-offset from the voxel center
/// 2. population stdev of z (0 for a single point)
/// 3. mean intensity (0 when the cloud has no intensity channel)
/// 4. occupancy fraction of the voxel's 2x2x2 sub-voxels
/// 5. mean radial distance to the voxel center
/// 6. min z-offset
/// 7. max z-offset
pub struct HandcraftedFeaturizer;

impl Featurizer for HandcraftedFeaturizer {
    fn dim(&self) -> usize {
        HANDCRAFTED_DIM
    }

    fn features_for(&self, voxel: &VoxelPointSet<'_>) -> Vec<f32> {
        let n = voxel.points.len();
        debug_assert!(n > 0, "featurizer only sees occupied voxels");
        let nf = n as f64;
        let center = voxel.center;

        let mut mean_z = 0.0;
        let mut min_z = f64::INFINITY;
        let mut max_z = f64::NEG_INFINITY;
        let mut mean_radial = 0.0;
        let mut octants = [false; 8];
        for p in voxel.points {
            let dz = p.z - center.z;
            mean_z += dz;
            min_z = min_z.min(dz);
            max_z = max_z.max(dz);
            mean_radial += p.distance(&center);
            let ox = usize::from(p.x >= center.x);
            let oy = usize::from(p.y >= center.y);
            let oz = usize::from(p.z >= center.z);
            octants[ox * 4 + oy * 2 + oz] = true;
        }
        mean_z /= nf;
        mean_radial /= nf;

        let mut var_z = 0.0;
        for p in voxel.points {
            let d = (p.z - center.z) - mean_z;
            var_z += d * d;
        }
        let stdev_z = (var_z / nf).sqrt();

        let mean_intensity = voxel
            .intensity
            .map_or(0.0, |ch| ch.iter().sum::<f64>() / nf);

        let occupancy = octants.iter().filter(|&&o| o).count() as f64 / 8.0;

        vec![
            (1.0 + nf).ln() as f32,
            mean_z as f32,
            stdev_z as f32,
            mean_intensity as f32,
            occupancy as f32,
            mean_radial as f32,
            min_z as f32,
            max_z as f32,
        ]
    }
}

/// Sparse per-voxel feature vectors over a shared grid spec.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatures {
    spec: VoxelGridSpec,
    dim: usize,
    features: HashMap<VoxelKey, Vec<f32>>,
}

impl VoxelFeatures {
    /// Assemble a store directly; every vector must have dimension `dim`.
    pub fn from_parts(
        spec: VoxelGridSpec,
        dim: usize,
        entries: impl IntoIterator<Item = (VoxelKey, Vec<f32>)>,
    ) -> Result<Self, SquashError> {
        let mut features = HashMap::new();
        for (key, vec) in entries {
            if vec.len() != dim {
                return Err(SquashError::DimensionMismatch { expected: dim, got: vec.len() });
            }
            features.insert(key, vec);
        }
        Ok(VoxelFeatures { spec, dim, features })
    }

    pub fn empty(spec: VoxelGridSpec, dim: usize) -> Self {
        VoxelFeatures { spec, dim, features: HashMap::new() }
    }

    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn get(&self, key: VoxelKey) -> Option<&[f32]> {
        self.features.get(&key).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (VoxelKey, &[f32])> {
        self.features.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn keys_sorted(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<VoxelKey> = self.features.keys().copied().collect();
        keys.sort_unstable();
        keys
    }
}

/// Featurize one traversal's dense cloud. Points outside the grid bounds
/// are dropped; the drop count is returned alongside the store. Exactly the
/// voxels containing at least one surviving point appear.
pub fn featurize_traversal(
    dense: &DenseCloud,
    spec: &VoxelGridSpec,
    featurizer: &impl Featurizer,
) -> Result<(VoxelFeatures, usize), SquashError> {
    let has_intensity = dense.points.intensity.is_some();
    let mut buckets: HashMap<VoxelKey, (Vec<Point3>, Vec<f64>)> = HashMap::new();
    let mut dropped = 0usize;
    for (i, p) in dense.points.points.iter().enumerate() {
        if !spec.contains(p) {
            dropped += 1;
            continue;
        }
        let bucket = buckets.entry(spec.key_of(p)).or_default();
        bucket.0.push(*p);
        if has_intensity {
            bucket.1.push(dense.points.intensity.as_ref().unwrap()[i]);
        }
    }
    if buckets.is_empty() {
        return Err(SquashError::EmptyAfterCropping);
    }
    let dim = featurizer.dim();
    let mut features = HashMap::with_capacity(buckets.len());
    for (key, (points, intensity)) in &buckets {
        let voxel = VoxelPointSet {
            key: *key,
            center: spec.center_of(*key),
            voxel_size: spec.voxel_size,
            points,
            intensity: has_intensity.then_some(intensity.as_slice()),
        };
        let vec = featurizer.features_for(&voxel);
        debug_assert_eq!(vec.len(), dim);
        features.insert(*key, vec);
    }
    Ok((VoxelFeatures { spec: *spec, dim, features }, dropped))
}

/// Featurize several traversals' dense clouds in parallel.
pub fn featurize_traversals(
    denses: &[DenseCloud],
    spec: &VoxelGridSpec,
    featurizer: &impl Featurizer,
) -> Result<Vec<(VoxelFeatures, usize)>, SquashError> {
    denses
        .par_iter()
        .map(|d| featurize_traversal(d, spec, featurizer))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationMode {
    Mean,
    Max,
}

impl AggregationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AggregationMode::Mean => "mean",
            AggregationMode::Max => "max",
        }
    }
}

/// Per-voxel aggregation across traversals. The output occupies the union
/// of the input keys; each voxel is the element-wise mean (over the
/// traversals that occupy it) or max of the vectors present there.
pub fn aggregate(
    stores: &[VoxelFeatures],
    mode: AggregationMode,
) -> Result<VoxelFeatures, SquashError> {
    let first = stores.first().ok_or(SquashError::SpecMismatch {
        what: "cannot aggregate zero stores".into(),
    })?;
    for s in stores {
        if s.spec != first.spec {
            return Err(SquashError::SpecMismatch { what: "grid geometry differs".into() });
        }
        if s.dim != first.dim {
            return Err(SquashError::SpecMismatch {
                what: format!("dimension {} vs {}", s.dim, first.dim),
            });
        }
    }
    let dim = first.dim;
    let mut union: HashMap<VoxelKey, (Vec<f64>, usize)> = HashMap::new();
    for store in stores {
        for (key, vec) in &store.features {
            match mode {
                AggregationMode::Mean => {
                    let (acc, n) = union
                        .entry(*key)
                        .or_insert_with(|| (vec![0.0f64; dim], 0));
                    for (a, &v) in acc.iter_mut().zip(vec) {
                        *a += v as f64;
                    }
                    *n += 1;
                }
                AggregationMode::Max => {
                    let (acc, n) = union
                        .entry(*key)
                        .or_insert_with(|| (vec![f64::NEG_INFINITY; dim], 0));
                    for (a, &v) in acc.iter_mut().zip(vec) {
                        *a = a.max(v as f64);
                    }
                    *n += 1;
                }
            }
        }
    }
    let features = union
        .into_iter()
        .map(|(key, (acc, n))| {
            let vec: Vec<f32> = match mode {
                AggregationMode::Mean => acc.iter().map(|&a| (a / n as f64) as f32).collect(),
                AggregationMode::Max => acc.iter().map(|&a| a as f32).collect(),
            };
            (key, vec)
        })
        .collect();
    Ok(VoxelFeatures { spec: first.spec, dim, features })
}

/// Feature vector of the voxel containing `q`, with an occupancy flag
/// appended: the stored vector and flag 1 for an occupied voxel, zeros and
/// flag 0 otherwise. Total over all of space (dimension is always d+1).
pub fn query_point(store: &VoxelFeatures, q: Point3) -> Vec<f32> {
    let mut out = Vec::with_capacity(store.dim + 1);
    match store.features.get(&store.spec.key_of(&q)) {
        Some(vec) => {
            out.extend_from_slice(vec);
            out.push(1.0);
        }
        None => {
            out.resize(store.dim, 0.0);
            out.push(0.0);
        }
    }
    out
}

/// Write a store as `SQF1`: magic, f64 voxel size, 6 f64 bounds, u32 dim,
/// u64 entry count, then sorted (3 i64 key, dim f32 values) records.
pub fn save_store(store: &VoxelFeatures, path: &Path) -> Result<(), SquashError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(STORE_FILE_MAGIC);
    bytes.extend_from_slice(&store.spec.voxel_size.to_le_bytes());
    for v in [
        store.spec.min.x,
        store.spec.min.y,
        store.spec.min.z,
        store.spec.max.x,
        store.spec.max.y,
        store.spec.max.z,
    ] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&(store.dim as u32).to_le_bytes());
    bytes.extend_from_slice(&(store.features.len() as u64).to_le_bytes());
    for key in store.keys_sorted() {
        for k in [key.0, key.1, key.2] {
            bytes.extend_from_slice(&k.to_le_bytes());
        }
        for &v in &store.features[&key] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| SquashError::Io { path: path.to_path_buf(), source: e })
}

pub fn load_store(path: &Path) -> Result<VoxelFeatures, SquashError> {
    let bytes =
        fs::read(path).map_err(|e| SquashError::Io { path: path.to_path_buf(), source: e })?;
    let truncated =
        |at: usize| SquashError::TruncatedFile { path: path.to_path_buf(), offset: at as u64 };
    if bytes.len() < 4 || &bytes[0..4] != STORE_FILE_MAGIC {
        return Err(SquashError::BadMagic { path: path.to_path_buf() });
    }
    let header_len = 4 + 7 * 8 + 4 + 8;
    if bytes.len() < header_len {
        return Err(truncated(bytes.len()));
    }
    let f64_at = |at: usize| f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let voxel_size = f64_at(4);
    let min = Point3::new(f64_at(12), f64_at(20), f64_at(28));
    let max = Point3::new(f64_at(36), f64_at(44), f64_at(52));
    let dim = u32::from_le_bytes(bytes[60..64].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[64..72].try_into().unwrap()) as usize;
    let record = 3 * 8 + dim * 4;
    if bytes.len() < header_len + count * record {
        return Err(truncated(bytes.len()));
    }
    let mut features = HashMap::with_capacity(count);
    for i in 0..count {
        let at = header_len + i * record;
        let k = |j: usize| i64::from_le_bytes(bytes[at + 8 * j..at + 8 * (j + 1)].try_into().unwrap());
        let key = (k(0), k(1), k(2));
        let mut vec = Vec::with_capacity(dim);
        for j in 0..dim {
            let v_at = at + 24 + 4 * j;
            vec.push(f32::from_le_bytes(bytes[v_at..v_at + 4].try_into().unwrap()));
        }
        features.insert(key, vec);
    }
    Ok(VoxelFeatures { spec: VoxelGridSpec { voxel_size, min, max }, dim, features })
}
