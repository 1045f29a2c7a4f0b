//! Rigid-body geometry and the point-cloud containers shared by the whole
//! pipeline.
//!
//! Conventions fixed here and relied on everywhere else:
//!
//! - all geometry is `f64`; global coordinates can be UTM-scale and `f32`
//!   loses centimeter precision there (storage formats downcast to `f32`
//!   only after an origin offset has been subtracted, see `ingest`),
//! - quaternion component order is `(w, x, y, z)`,
//! - route position is an explicit per-frame arclength, not something
//!   recomputed from poses; arclength is not derivable from poses alone on
//!   loops.
//!
//! Everything in this module is immutable after construction and safe to
//! share across threads.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("traversal {traversal_id} has no frames")]
    EmptyTraversal { traversal_id: u64 },
    #[error("traversal {traversal_id}: frame ids not strictly increasing at frame index {index}")]
    NonMonotonicFrameIds { traversal_id: u64, index: usize },
    #[error("traversal {traversal_id}: arclength decreases at frame index {index}")]
    NonMonotonicArclength { traversal_id: u64, index: usize },
}

/// A point in 3D space, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance_squared(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        self.distance_squared(other).sqrt()
    }
}

/// Unit quaternion, component order `(w, x, y, z)`.
///
/// Fields are private so a constructed value is always normalized (norm
/// within 1e-9 of 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Quaternion {
    pub fn identity() -> Self {
        Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Build a unit quaternion from raw components, normalizing them.
    /// Returns `None` when the norm is too close to zero to normalize.
    pub fn normalized(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let norm_sq = w * w + x * x + y * y + z * z;
        if !norm_sq.is_finite() || norm_sq < 1e-24 {
            return None;
        }
        let norm = norm_sq.sqrt();
        // Skip the division when the input is already unit-norm so that
        // save/load of a normalized quaternion is a bit-exact round trip.
        if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            Some(Quaternion { w, x, y, z })
        } else {
            Some(Quaternion { w: w / norm, x: x / norm, y: y / norm, z: z / norm })
        }
    }

    /// Rotation by `yaw` radians about the +z axis.
    pub fn from_yaw(yaw: f64) -> Self {
        let half = 0.5 * yaw;
        Quaternion { w: half.cos(), x: 0.0, y: 0.0, z: half.sin() }
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Inverse rotation; for a unit quaternion this is the conjugate.
    pub fn conjugate(&self) -> Self {
        Quaternion { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self * other`, renormalized to keep the unit-norm
    /// invariant tight under long composition chains.
    pub fn multiply(&self, other: &Quaternion) -> Quaternion {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (other.w, other.x, other.y, other.z);
        let w = aw * bw - ax * bx - ay * by - az * bz;
        let x = aw * bx + ax * bw + ay * bz - az * by;
        let y = aw * by - ax * bz + ay * bw + az * bx;
        let z = aw * bz + ax * by - ay * bx + az * bw;
        Quaternion::normalized(w, x, y, z).expect("product of unit quaternions is unit")
    }

    /// Rotate a point: `q v q*` using the expanded cross-product form.
    pub fn rotate(&self, p: Point3) -> Point3 {
        // t = 2 (q_vec x v); v' = v + w t + q_vec x t
        let tx = 2.0 * (self.y * p.z - self.z * p.y);
        let ty = 2.0 * (self.z * p.x - self.x * p.z);
        let tz = 2.0 * (self.x * p.y - self.y * p.x);
        Point3 {
            x: p.x + self.w * tx + (self.y * tz - self.z * ty),
            y: p.y + self.w * ty + (self.z * tx - self.x * tz),
            z: p.z + self.w * tz + (self.x * ty - self.y * tx),
        }
    }
}

/// Rigid transform placing a sensor frame into the global coordinate
/// system: `p_global = R p + T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub translation: Point3,
    pub rotation: Quaternion,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { translation: Point3::ORIGIN, rotation: Quaternion::identity() }
    }

    pub fn new(translation: Point3, rotation: Quaternion) -> Self {
        Pose { translation, rotation }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r = self.rotation.rotate(p);
        Point3 {
            x: r.x + self.translation.x,
            y: r.y + self.translation.y,
            z: r.z + self.translation.z,
        }
    }

    /// `self` after `other`: applying the result equals applying `other`
    /// first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.multiply(&other.rotation),
            translation: self.apply(other.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.conjugate();
        let t = inv_rot.rotate(self.translation);
        Pose {
            rotation: inv_rot,
            translation: Point3::new(-t.x, -t.y, -t.z),
        }
    }
}

/// An ordered point set with an optional parallel intensity channel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud { points, intensity: None }
    }

    /// Shape mismatches are programmer error, not data error.
    pub fn with_intensity(points: Vec<Point3>, intensity: Vec<f64>) -> Self {
        assert_eq!(points.len(), intensity.len(), "intensity channel length mismatch");
        PointCloud { points, intensity: Some(intensity) }
    }

    pub fn empty() -> Self {
        PointCloud::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Transform every point of `cloud` into the global frame; intensity is
/// passed through untouched.
pub fn transform_to_global(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|&p| pose.apply(p)).collect(),
        intensity: cloud.intensity.clone(),
    }
}

/// One sensor sweep: the cloud in the sensor frame, the recorded
/// sensor-to-global pose, and the position along the route.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    pub cloud: PointCloud,
    pub pose: Pose,
    pub arclength: f64,
}

/// One pass along the route. Frame ids are strictly increasing and
/// arclengths non-decreasing; both are validated at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Traversal {
    traversal_id: u64,
    frames: Vec<Frame>,
}

impl Traversal {
    pub fn new(traversal_id: u64, frames: Vec<Frame>) -> Result<Self, GeomError> {
        if frames.is_empty() {
            return Err(GeomError::EmptyTraversal { traversal_id });
        }
        for i in 1..frames.len() {
            if frames[i].frame_id <= frames[i - 1].frame_id {
                return Err(GeomError::NonMonotonicFrameIds { traversal_id, index: i });
            }
            if frames[i].arclength < frames[i - 1].arclength {
                return Err(GeomError::NonMonotonicArclength { traversal_id, index: i });
            }
        }
        Ok(Traversal { traversal_id, frames })
    }

    pub fn traversal_id(&self) -> u64 {
        self.traversal_id
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    /// (min, max) arclength over the traversal's frames.
    pub fn arclength_span(&self) -> (f64, f64) {
        let first = self.frames.first().expect("traversal is never empty").arclength;
        let last = self.frames.last().expect("traversal is never empty").arclength;
        (first, last)
    }

    pub fn num_points(&self) -> usize {
        self.frames.iter().map(|f| f.cloud.len()).sum()
    }
}

/// Union of a traversal's frames around one route location, in the global
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCloud {
    pub traversal_id: u64,
    pub location: f64,
    pub points: PointCloud,
    pub source_frame_ids: Vec<u64>,
}

impl DenseCloud {
    /// A dense cloud with no contributing frames; used where a traversal
    /// simply has no coverage at a location.
    pub fn empty(traversal_id: u64, location: f64) -> Self {
        DenseCloud {
            traversal_id,
            location,
            points: PointCloud::empty(),
            source_frame_ids: Vec::new(),
        }
    }
}
