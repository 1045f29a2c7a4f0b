//! Synthetic repeated-traversal scenes with ground-truth ephemerality
//! labels.
//!
//! A scene is a straight route over a ground plane with persistent boxes
//! (buildings, poles) at the roadside and ephemeral car- and
//! pedestrian-sized boxes on the road. Static geometry is re-sampled fresh
//! in every traversal (same surfaces, new points); each ephemeral object
//! appears in a chosen number of the historical traversals and always in
//! the query scan. Points are sampled on surfaces, not volumes, mimicking
//! LiDAR returns; there is no occlusion model because none is needed to
//! verify the scoring math.
//!
//! `generate_scene` emits `num_traversals` historical traversals plus one
//! query scan (the last traversal), everything deterministic under the
//! spec seed. Localization noise perturbs the *recorded* poses only, never
//! the true geometry, and is drawn from its own stream scaled by the
//! configured magnitude, so scenes differing only in noise magnitude share
//! all random draws.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::geom::{Frame, Point3, PointCloud, Pose, Quaternion, Traversal};
use crate::ingest::{write_manifest, write_point_cloud, write_poses, AccumulationConfig, IngestError};
use crate::labels::{save_labels, LabelsError, OrientedBox};
use crate::p2::{compute_p2_over_route, P2Config, P2Error};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("{scores} scores vs {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("separation undefined: no {class} points")]
    EmptyClass { class: &'static str },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Labels(#[from] LabelsError),
    #[error(transparent)]
    P2(#[from] P2Error),
}

/// Mix a salt into a base seed (splitmix64 finalizer); used to derive
/// independent per-row seeds for sweeps.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    /// Route length in meters; frames sit every `frame_spacing` meters.
    pub route_length: f64,
    pub frame_spacing: f64,
    /// Number of historical traversals T; one query scan is generated in
    /// addition and is always the last traversal of the scene.
    pub num_traversals: usize,
    pub ground_width: f64,
    /// Surface sampling density, points per square meter.
    pub surface_density: f64,
    /// Roadside persistent boxes.
    pub num_persistent: usize,
    pub num_cars: usize,
    pub num_pedestrians: usize,
    /// How many of the historical traversals each ephemeral object appears
    /// in; it always appears in the query scan.
    pub ephemeral_presence: usize,
    /// Stdev of the per-traversal displacement of ephemeral objects.
    pub position_jitter: f64,
    /// Per-point measurement noise stdev.
    pub sensor_noise: f64,
    /// Recorded-pose translation noise stdev (per axis).
    pub localization_noise_translation: f64,
    /// Recorded-pose yaw noise stdev, radians.
    pub localization_noise_yaw: f64,
    pub sensor_height: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            route_length: 16.0,
            frame_spacing: 2.0,
            num_traversals: 5,
            ground_width: 12.0,
            surface_density: 50.0,
            num_persistent: 4,
            num_cars: 3,
            num_pedestrians: 2,
            ephemeral_presence: 1,
            position_jitter: 0.05,
            sensor_noise: 0.02,
            localization_noise_translation: 0.0,
            localization_noise_yaw: 0.0,
            sensor_height: 1.8,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |reason: &str| Err(SimError::InvalidSpec { reason: reason.to_string() });
        if self.num_traversals < 2 {
            return fail("need at least 2 historical traversals");
        }
        for (name, v) in [
            ("route_length", self.route_length),
            ("frame_spacing", self.frame_spacing),
            ("ground_width", self.ground_width),
            ("surface_density", self.surface_density),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(SimError::InvalidSpec { reason: format!("{name} must be > 0") });
            }
        }
        if self.ephemeral_presence > self.num_traversals {
            return fail("ephemeral presence cannot exceed the traversal count");
        }
        for (name, v) in [
            ("position_jitter", self.position_jitter),
            ("sensor_noise", self.sensor_noise),
            ("localization_noise_translation", self.localization_noise_translation),
            ("localization_noise_yaw", self.localization_noise_yaw),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SimError::InvalidSpec { reason: format!("{name} must be >= 0") });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointClass {
    Static,
    Ephemeral,
}

impl PointClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            PointClass::Static => "static",
            PointClass::Ephemeral => "ephemeral",
        }
    }
}

/// Ground truth for a generated scene: a class label for every point of
/// every traversal (in the traversal's (frame, point) order) and the
/// ephemeral boxes present per traversal.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub labels: Vec<Vec<PointClass>>,
    pub ephemeral_boxes: Vec<Vec<OrientedBox>>,
}

/// Generated scene: `num_traversals` historical traversals followed by the
/// query scan, plus aligned ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub traversals: Vec<Traversal>,
    pub truth: GroundTruth,
}

impl Scene {
    pub fn historical(&self) -> &[Traversal] {
        &self.traversals[..self.traversals.len() - 1]
    }

    pub fn query_scan(&self) -> &Traversal {
        self.traversals.last().expect("scene has traversals")
    }

    /// Labels for the query scan's points, aligned with
    /// `query_points_global`.
    pub fn query_labels(&self) -> &[PointClass] {
        self.truth.labels.last().expect("scene has traversals")
    }

    /// Query-scan points in the global frame via the recorded poses, in
    /// (frame, point-within-frame) order.
    pub fn query_points_global(&self) -> Vec<Point3> {
        let mut out = Vec::new();
        for frame in self.query_scan().frames() {
            for &p in &frame.cloud.points {
                out.push(frame.pose.apply(p));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct SimBox {
    center_x: f64,
    center_y: f64,
    length: f64,
    width: f64,
    height: f64,
    yaw: f64,
}

impl SimBox {
    fn to_oriented(self, class: &str) -> OrientedBox {
        OrientedBox::new(
            Point3::new(self.center_x, self.center_y, self.height / 2.0),
            (self.length, self.width, self.height),
            self.yaw,
            1.0,
            class,
        )
    }

    /// Sample `n` points uniformly over the box's exposed surface: four
    /// sides plus the top, never the bottom (a LiDAR cannot see it).
    fn sample_surface(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
        let (l, w, h) = (self.length, self.width, self.height);
        let areas = [l * w, l * h, l * h, w * h, w * h]; // top, y+, y-, x+, x-
        let total: f64 = areas.iter().sum();
        let (sin, cos) = self.yaw.sin_cos();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut pick = rng.random_range(0.0..total);
            let mut face = 0;
            for (i, &a) in areas.iter().enumerate() {
                if pick < a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let (lx, ly, z) = match face {
                0 => (rng.random_range(-l / 2.0..l / 2.0), rng.random_range(-w / 2.0..w / 2.0), h),
                1 => (rng.random_range(-l / 2.0..l / 2.0), w / 2.0, rng.random_range(0.0..h)),
                2 => (rng.random_range(-l / 2.0..l / 2.0), -w / 2.0, rng.random_range(0.0..h)),
                3 => (l / 2.0, rng.random_range(-w / 2.0..w / 2.0), rng.random_range(0.0..h)),
                _ => (-l / 2.0, rng.random_range(-w / 2.0..w / 2.0), rng.random_range(0.0..h)),
            };
            out.push(Point3::new(
                self.center_x + cos * lx - sin * ly,
                self.center_y + sin * lx + cos * ly,
                z,
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct EphemeralObject {
    shape: SimBox,
    class: &'static str,
    /// Historical traversal indices the object appears in.
    presence: Vec<usize>,
    /// Displacement per presence, aligned with `presence`.
    jitter: Vec<(f64, f64)>,
}

const CAR_DIMS: (f64, f64, f64) = (4.2, 1.9, 1.6);
const PEDESTRIAN_DIMS: (f64, f64, f64) = (0.6, 0.6, 1.7);
const MIN_EPHEMERAL_SEPARATION: f64 = 5.0;

fn poisson_count(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    debug_assert!(lambda > 0.0);
    let sample: f64 = Poisson::new(lambda).expect("positive lambda").sample(rng);
    sample as usize
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generate the scene's traversals and aligned ground truth,
/// deterministically under the spec seed.
#[allow(clippy::needless_range_loop)] // t is both an index and the traversal id
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, SimError> {
    spec.validate()?;
    let mut geom_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 3));

    let t_hist = spec.num_traversals;

    // --- static geometry -------------------------------------------------
    let mut persistent = Vec::with_capacity(spec.num_persistent);
    for _ in 0..spec.num_persistent {
        let length = geom_rng.random_range(1.0..2.0);
        let width = geom_rng.random_range(1.0..2.0);
        let height = geom_rng.random_range(2.0..4.0);
        let x = geom_rng.random_range(0.0..spec.route_length);
        let side = if geom_rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
        let y = side * geom_rng.random_range(0.42..0.48) * spec.ground_width;
        let yaw = geom_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        persistent.push(SimBox { center_x: x, center_y: y, length, width, height, yaw });
    }

    // --- ephemeral objects ------------------------------------------------
    let mut ephemeral: Vec<EphemeralObject> = Vec::new();
    let specs = std::iter::repeat_n(("car", CAR_DIMS), spec.num_cars)
        .chain(std::iter::repeat_n(("pedestrian", PEDESTRIAN_DIMS), spec.num_pedestrians));
    for (class, dims) in specs {
        let x_lo = (spec.route_length * 0.05).min(1.0);
        let x_hi = spec.route_length - x_lo;
        let y_half = (spec.ground_width * 0.2).min(2.0);
        let mut center = (0.0, 0.0);
        for attempt in 0..300 {
            let x = geom_rng.random_range(x_lo..x_hi.max(x_lo + 1e-9));
            let y = geom_rng.random_range(-y_half..y_half);
            let clear = ephemeral.iter().all(|o| {
                let dx = o.shape.center_x - x;
                let dy = o.shape.center_y - y;
                (dx * dx + dy * dy).sqrt() >= MIN_EPHEMERAL_SEPARATION
            });
            if clear || attempt == 299 {
                center = (x, y);
                break;
            }
        }
        let yaw = geom_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        // choose the historical traversals this object appears in
        let mut pool: Vec<usize> = (0..t_hist).collect();
        for i in 0..spec.ephemeral_presence {
            let j = geom_rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut presence = pool[..spec.ephemeral_presence].to_vec();
        presence.sort_unstable();
        let jitter: Vec<(f64, f64)> = presence
            .iter()
            .map(|_| {
                (
                    spec.position_jitter * normal(&mut geom_rng),
                    spec.position_jitter * normal(&mut geom_rng),
                )
            })
            .collect();
        ephemeral.push(EphemeralObject {
            shape: SimBox {
                center_x: center.0,
                center_y: center.1,
                length: dims.0,
                width: dims.1,
                height: dims.2,
                yaw,
            },
            class,
            presence,
            jitter,
        });
    }

    // --- frames and recorded poses ----------------------------------------
    let mut frame_arclengths = Vec::new();
    let mut l = 0.0;
    while l <= spec.route_length + 1e-9 {
        frame_arclengths.push(l);
        l += spec.frame_spacing;
    }
    let n_frames = frame_arclengths.len();

    // recorded poses: true pose plus scaled unit noise, drawn for every
    // frame regardless of magnitude so noise sweeps share all other draws
    let mut recorded_poses: Vec<Vec<Pose>> = Vec::with_capacity(t_hist + 1);
    for _ in 0..=t_hist {
        let poses = frame_arclengths
            .iter()
            .map(|&arc| {
                let dx = spec.localization_noise_translation * normal(&mut noise_rng);
                let dy = spec.localization_noise_translation * normal(&mut noise_rng);
                let dz = spec.localization_noise_translation * normal(&mut noise_rng);
                let dyaw = spec.localization_noise_yaw * normal(&mut noise_rng);
                Pose::new(
                    Point3::new(arc + dx, dy, spec.sensor_height + dz),
                    Quaternion::from_yaw(dyaw),
                )
            })
            .collect();
        recorded_poses.push(poses);
    }

    // --- per-traversal sampling -------------------------------------------
    let ground_area = spec.route_length * spec.ground_width;
    let mut traversals = Vec::with_capacity(t_hist + 1);
    let mut labels = Vec::with_capacity(t_hist + 1);
    let mut ephemeral_boxes = Vec::with_capacity(t_hist + 1);

    for t in 0..=t_hist {
        let is_query = t == t_hist;
        let mut sampled: Vec<(Point3, PointClass)> = Vec::new();

        let n_ground = poisson_count(&mut sample_rng, ground_area * spec.surface_density);
        for _ in 0..n_ground {
            sampled.push((
                Point3::new(
                    sample_rng.random_range(0.0..spec.route_length),
                    sample_rng.random_range(-spec.ground_width / 2.0..spec.ground_width / 2.0),
                    0.0,
                ),
                PointClass::Static,
            ));
        }
        for b in &persistent {
            let area = b.length * b.width + 2.0 * b.height * (b.length + b.width);
            let n = poisson_count(&mut sample_rng, area * spec.surface_density);
            for p in b.sample_surface(n, &mut sample_rng) {
                sampled.push((p, PointClass::Static));
            }
        }
        let mut boxes_here = Vec::new();
        for obj in &ephemeral {
            let placed = if is_query {
                Some(obj.shape)
            } else {
                obj.presence.iter().position(|&p| p == t).map(|slot| {
                    let (jx, jy) = obj.jitter[slot];
                    SimBox {
                        center_x: obj.shape.center_x + jx,
                        center_y: obj.shape.center_y + jy,
                        ..obj.shape
                    }
                })
            };
            let Some(shape) = placed else { continue };
            boxes_here.push(shape.to_oriented(obj.class));
            let area =
                shape.length * shape.width + 2.0 * shape.height * (shape.length + shape.width);
            let n = poisson_count(&mut sample_rng, area * spec.surface_density);
            for p in shape.sample_surface(n, &mut sample_rng) {
                sampled.push((p, PointClass::Ephemeral));
            }
        }

        // measurement noise, then distribute points to the nearest frame
        let mut per_frame: Vec<Vec<(Point3, PointClass)>> = vec![Vec::new(); n_frames];
        for (p, class) in sampled {
            let noisy = Point3::new(
                p.x + spec.sensor_noise * normal(&mut sample_rng),
                p.y + spec.sensor_noise * normal(&mut sample_rng),
                p.z + spec.sensor_noise * normal(&mut sample_rng),
            );
            let idx = ((noisy.x / spec.frame_spacing).round() as i64)
                .clamp(0, n_frames as i64 - 1) as usize;
            per_frame[idx].push((noisy, class));
        }

        let mut frames = Vec::with_capacity(n_frames);
        let mut traversal_labels = Vec::new();
        for (f, bucket) in per_frame.into_iter().enumerate() {
            let true_origin =
                Point3::new(frame_arclengths[f], 0.0, spec.sensor_height);
            let mut points = Vec::with_capacity(bucket.len());
            let mut intensity = Vec::with_capacity(bucket.len());
            for (p, class) in bucket {
                // store sensor-frame coordinates quantized to f32 so the
                // binary point format is lossless for generated scenes
                points.push(Point3::new(
                    (p.x - true_origin.x) as f32 as f64,
                    (p.y - true_origin.y) as f32 as f64,
                    (p.z - true_origin.z) as f32 as f64,
                ));
                intensity.push(0.5);
                traversal_labels.push(class);
            }
            frames.push(Frame {
                frame_id: f as u64,
                cloud: PointCloud::with_intensity(points, intensity),
                pose: recorded_poses[t][f],
                arclength: frame_arclengths[f],
            });
        }
        traversals.push(
            Traversal::new(t as u64, frames).expect("generated frames are monotone"),
        );
        labels.push(traversal_labels);
        ephemeral_boxes.push(boxes_here);
    }

    Ok(Scene { traversals, truth: GroundTruth { labels, ephemeral_boxes } })
}

/// Class separation report for a batch of scored points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationReport {
    pub mean_static: f64,
    pub mean_ephemeral: f64,
    /// Probability that a random static point outscores a random ephemeral
    /// one, ties counting one half (rank-sum formulation).
    pub auc: f64,
    pub num_static: usize,
    pub num_ephemeral: usize,
}

pub fn evaluate_separation(
    scores: &[f64],
    labels: &[PointClass],
) -> Result<SeparationReport, SimError> {
    if scores.len() != labels.len() {
        return Err(SimError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    let num_static = labels.iter().filter(|&&c| c == PointClass::Static).count();
    let num_ephemeral = labels.len() - num_static;
    if num_static == 0 {
        return Err(SimError::EmptyClass { class: "static" });
    }
    if num_ephemeral == 0 {
        return Err(SimError::EmptyClass { class: "ephemeral" });
    }

    let mut sum_static = 0.0;
    let mut sum_ephemeral = 0.0;
    for (s, c) in scores.iter().zip(labels) {
        match c {
            PointClass::Static => sum_static += s,
            PointClass::Ephemeral => sum_ephemeral += s,
        }
    }

    // rank sum with average ranks over tie groups
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut static_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == PointClass::Static {
                static_rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let ns = num_static as f64;
    let ne = num_ephemeral as f64;
    let auc = (static_rank_sum - ns * (ns + 1.0) / 2.0) / (ns * ne);

    Ok(SeparationReport {
        mean_static: sum_static / ns,
        mean_ephemeral: sum_ephemeral / ne,
        auc,
        num_static,
        num_ephemeral,
    })
}

/// Everything the desk pipeline produces for one scene: the query points,
/// their scores and labels, and the separation report.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub queries: Vec<Point3>,
    pub scores: Vec<f64>,
    pub labels: Vec<PointClass>,
    pub report: SeparationReport,
}

/// Generate a scene and score its query scan against its history.
pub fn run_pipeline(
    spec: &SceneSpec,
    accum: &AccumulationConfig,
    p2_cfg: &P2Config,
) -> Result<PipelineResult, SimError> {
    let scene = generate_scene(spec)?;
    let result =
        compute_p2_over_route(scene.historical(), scene.query_scan(), accum, p2_cfg, false)?;
    let labels = scene.query_labels().to_vec();
    let report = evaluate_separation(&result.scores, &labels)?;
    Ok(PipelineResult {
        queries: scene.query_points_global(),
        scores: result.scores,
        labels,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraversalSweepRow {
    pub num_traversals: usize,
    pub auc: f64,
    pub mean_static: f64,
    pub mean_ephemeral: f64,
}

/// One pipeline run per traversal count, each row under its own derived
/// seed; rows run in parallel.
pub fn sweep_traversals(
    base: &SceneSpec,
    t_values: &[usize],
    accum: &AccumulationConfig,
    p2_cfg: &P2Config,
) -> Result<Vec<TraversalSweepRow>, SimError> {
    if let Some(&bad) = t_values.iter().find(|&&t| t < 2) {
        return Err(SimError::InvalidSpec { reason: format!("traversal count {bad} < 2") });
    }
    t_values
        .par_iter()
        .map(|&t| {
            let spec = SceneSpec {
                num_traversals: t,
                ephemeral_presence: base.ephemeral_presence.min(t),
                seed: derive_seed(base.seed, t as u64),
                ..*base
            };
            let out = run_pipeline(&spec, accum, p2_cfg)?;
            Ok(TraversalSweepRow {
                num_traversals: t,
                auc: out.report.auc,
                mean_static: out.report.mean_static,
                mean_ephemeral: out.report.mean_ephemeral,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSweepRow {
    pub noise_stdev: f64,
    pub auc: f64,
    pub mean_static: f64,
    pub mean_ephemeral: f64,
}

/// One pipeline run per localization-noise magnitude. All rows reuse the
/// base seed, so the zero-noise row reproduces the unperturbed pipeline
/// exactly and rows differ only in how far the recorded poses are moved.
pub fn sweep_localization_noise(
    base: &SceneSpec,
    noise_values: &[f64],
    accum: &AccumulationConfig,
    p2_cfg: &P2Config,
) -> Result<Vec<NoiseSweepRow>, SimError> {
    if let Some(&bad) = noise_values.iter().find(|&&v| !v.is_finite() || v < 0.0) {
        return Err(SimError::InvalidSpec { reason: format!("noise stdev {bad} < 0") });
    }
    noise_values
        .par_iter()
        .map(|&noise| {
            let spec = SceneSpec { localization_noise_translation: noise, ..*base };
            let out = run_pipeline(&spec, accum, p2_cfg)?;
            Ok(NoiseSweepRow {
                noise_stdev: noise,
                auc: out.report.auc,
                mean_static: out.report.mean_static,
                mean_ephemeral: out.report.mean_ephemeral,
            })
        })
        .collect()
}

/// Files emitted for a scene.
#[derive(Debug, Clone)]
pub struct WrittenScene {
    pub manifest: PathBuf,
    pub scan_cloud: PathBuf,
    pub truth_csv: PathBuf,
    pub ephemeral_boxes: PathBuf,
}

/// Write the scene through the standard dataset formats: a manifest with
/// every traversal (the query scan is the highest id), pose and frame
/// files, the query points as one global-frame cloud, the per-point truth
/// labels as CSV, and the query scan's ephemeral boxes in the label text
/// format.
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<WrittenScene, SimError> {
    let mut manifest_rows = Vec::new();
    for traversal in &scene.traversals {
        let id = traversal.traversal_id();
        let pose_name = format!("poses_t{id}.txt");
        let records: Vec<(u64, Pose, f64)> = traversal
            .frames()
            .iter()
            .map(|f| (f.frame_id, f.pose, f.arclength))
            .collect();
        write_poses(&records, &dir.join(&pose_name))?;
        let mut frame_names = Vec::new();
        for frame in traversal.frames() {
            let name = format!("t{id}_f{:04}.pcb", frame.frame_id);
            write_point_cloud(&frame.cloud, &dir.join(&name))?;
            frame_names.push(name);
        }
        manifest_rows.push((id, pose_name, frame_names));
    }
    let manifest =
        write_manifest(dir, "manifest.toml", Point3::ORIGIN, None, &manifest_rows)?;

    let queries = scene.query_points_global();
    let scan_cloud = dir.join("scan_global.pcb");
    write_point_cloud(&PointCloud::new(queries), &scan_cloud)?;

    let truth_csv = dir.join("truth_scan.csv");
    let mut csv = String::from("point_index,class\n");
    for (i, class) in scene.query_labels().iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", class.as_str()));
    }
    fs::write(&truth_csv, csv).map_err(|e| {
        SimError::Ingest(IngestError::Io { path: truth_csv.clone(), source: e })
    })?;

    let ephemeral_boxes = dir.join("ephemeral_boxes.txt");
    save_labels(
        scene.truth.ephemeral_boxes.last().expect("scene has traversals"),
        &ephemeral_boxes,
    )?;

    Ok(WrittenScene { manifest, scan_cloud, truth_csv, ephemeral_boxes })
}
