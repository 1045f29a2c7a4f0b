//! Feature-alignment head: a small MLP regressing persistence scores from
//! queried voxel features, trained with mean absolute error.
//!
//! The network is tiny (two hidden layers by default), so differentiation
//! is hand-rolled reverse mode rather than a framework dependency; the
//! finite-difference oracle in the tests makes the gradients
//! self-certifying. Training is plain SGD with momentum, fully
//! deterministic under its seeds: initialization is uniform
//! `+-1/sqrt(fan_in)` from a seeded stream, and the epoch shuffle is
//! seeded too, so two runs with equal seeds produce bit-identical weights
//! and loss histories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geom::{transform_to_global, Traversal};
use crate::ingest::{accumulate_dense, locations_for_route, AccumulationConfig, IngestError};
use crate::p2::{compute_p2_at_locations, P2Config, P2Error};
use crate::squash::{
    aggregate, featurize_traversal, query_point, AggregationMode, HandcraftedFeaturizer,
    SquashError, VoxelFeatures, VoxelGridSpec, VoxelKey, HANDCRAFTED_DIM,
};
use crate::geom::DenseCloud;

pub const MODEL_FILE_MAGIC: &[u8; 4] = b"MLP1";

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("dataset needs at least 2 rows, got {rows}")]
    DatasetTooSmall { rows: usize },
    #[error("invalid spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("invalid dataset: {reason}")]
    InvalidDataset { reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic at byte 0 (expected MLP1)")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated file at byte {offset}")]
    TruncatedFile { path: PathBuf, offset: u64 },
    #[error(transparent)]
    P2(#[from] P2Error),
    #[error(transparent)]
    Squash(#[from] SquashError),
}

/// Layer widths plus the initialization seed. The first width is the
/// feature dimension, the last must be 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl MlpSpec {
    /// Default architecture for a given input dimension: two hidden layers
    /// of 32 rectifier units, one sigmoid output.
    pub fn for_input_dim(input_dim: usize, seed: u64) -> Self {
        MlpSpec { widths: vec![input_dim, 32, 32, 1], seed }
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        if self.widths.len() < 2 {
            return Err(AlignError::InvalidSpec { reason: "need at least two widths".into() });
        }
        if self.widths.contains(&0) {
            return Err(AlignError::InvalidSpec { reason: "zero-width layer".into() });
        }
        if *self.widths.last().unwrap() != 1 {
            return Err(AlignError::InvalidSpec { reason: "output width must be 1".into() });
        }
        Ok(())
    }
}

/// Keep the sigmoid output strictly inside (0, 1) even where the plain
/// expression would round to an endpoint.
fn squash_output(z: f64) -> f64 {
    let y = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Feed-forward network: rectifier hidden layers, sigmoid output scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    /// Per layer, row-major `out x in`.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    seed: u64,
}

impl Mlp {
    /// Seeded initialization: weights and biases uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, drawn layer by layer in a fixed
    /// order.
    pub fn init(spec: &MlpSpec) -> Result<Self, AlignError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..spec.widths.len() - 1 {
            let fan_in = spec.widths[l];
            let fan_out = spec.widths[l + 1];
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect());
            biases.push((0..fan_out).map(|_| rng.random_range(-bound..bound)).collect());
        }
        Ok(Mlp { widths: spec.widths.clone(), weights, biases, seed: spec.seed })
    }

    /// All-zero parameters; the forward pass of this network is
    /// `sigmoid(0) = 0.5` for any input.
    pub fn zeroed(widths: Vec<usize>) -> Result<Self, AlignError> {
        let spec = MlpSpec { widths, seed: 0 };
        spec.validate()?;
        let weights = (0..spec.widths.len() - 1)
            .map(|l| vec![0.0; spec.widths[l] * spec.widths[l + 1]])
            .collect();
        let biases = (0..spec.widths.len() - 1).map(|l| vec![0.0; spec.widths[l + 1]]).collect();
        Ok(Mlp { widths: spec.widths, weights, biases, seed: 0 })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Parameters as one flat vector (layer weights row-major, then layer
    /// biases, per layer in order). Used by the model file and by the
    /// finite-difference tests.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params(), "flat parameter count mismatch");
        let mut at = 0;
        for l in 0..self.weights.len() {
            let w = self.weights[l].len();
            self.weights[l].copy_from_slice(&params[at..at + w]);
            at += w;
            let b = self.biases[l].len();
            self.biases[l].copy_from_slice(&params[at..at + b]);
            at += b;
        }
    }

    /// Pre-activations and activations per layer, for backprop.
    #[allow(clippy::needless_range_loop)] // indexed loops mirror the row-major weight layout
    fn forward_trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let layers = self.weights.len();
        let mut zs = Vec::with_capacity(layers);
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(x.to_vec());
        for l in 0..layers {
            let fan_in = self.widths[l];
            let fan_out = self.widths[l + 1];
            let input = &activations[l];
            let mut z = vec![0.0; fan_out];
            for o in 0..fan_out {
                let row = &self.weights[l][o * fan_in..(o + 1) * fan_in];
                let mut acc = self.biases[l][o];
                for (w, a) in row.iter().zip(input) {
                    acc += w * a;
                }
                z[o] = acc;
            }
            let a: Vec<f64> = if l + 1 == layers {
                z.iter().map(|&v| squash_output(v)).collect()
            } else {
                z.iter().map(|&v| v.max(0.0)).collect()
            };
            zs.push(z);
            activations.push(a);
        }
        (zs, activations)
    }

    /// Predicted score in the open interval (0, 1).
    pub fn forward(&self, x: &[f64]) -> Result<f64, AlignError> {
        if x.len() != self.input_dim() {
            return Err(AlignError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let (_, activations) = self.forward_trace(x);
        Ok(activations.last().unwrap()[0])
    }

    /// Batched forward pass, order-preserving; rows are independent so the
    /// map is parallel.
    pub fn forward_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>, AlignError> {
        xs.par_iter().map(|x| self.forward(x)).collect()
    }

    /// Gradients of the mean absolute error over the batch with respect to
    /// every parameter, and the loss itself. The subgradient at the
    /// absolute-value kink (and at the rectifier kink) is 0.
    #[allow(clippy::needless_range_loop)] // indexed loops mirror the row-major weight layout
    pub fn backward(
        &self,
        xs: &[Vec<f64>],
        targets: &[f64],
    ) -> Result<(Gradients, f64), AlignError> {
        if xs.is_empty() {
            return Err(AlignError::EmptyBatch);
        }
        assert_eq!(xs.len(), targets.len(), "batch feature/target length mismatch");
        let layers = self.weights.len();
        let mut grads = Gradients::zeroed(self);
        let inv_n = 1.0 / xs.len() as f64;
        let mut loss = 0.0;

        for (x, &target) in xs.iter().zip(targets) {
            if x.len() != self.input_dim() {
                return Err(AlignError::DimensionMismatch {
                    expected: self.input_dim(),
                    got: x.len(),
                });
            }
            let (zs, activations) = self.forward_trace(x);
            let predicted = activations[layers][0];
            let diff = predicted - target;
            loss += diff.abs() * inv_n;

            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            // d loss / d z_out through the sigmoid
            let mut dz = vec![sign * inv_n * predicted * (1.0 - predicted)];
            for l in (0..layers).rev() {
                let fan_in = self.widths[l];
                let fan_out = self.widths[l + 1];
                let input = &activations[l];
                for o in 0..fan_out {
                    let g = dz[o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut grads.d_weights[l][o * fan_in..(o + 1) * fan_in];
                    for (dw, a) in row.iter_mut().zip(input) {
                        *dw += g * a;
                    }
                    grads.d_biases[l][o] += g;
                }
                if l == 0 {
                    break;
                }
                let mut da = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let g = dz[o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &self.weights[l][o * fan_in..(o + 1) * fan_in];
                    for (d, w) in da.iter_mut().zip(row) {
                        *d += g * w;
                    }
                }
                // rectifier gate of the previous layer
                dz = da
                    .iter()
                    .zip(&zs[l - 1])
                    .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
                    .collect();
            }
        }
        Ok((grads, loss))
    }
}

/// Parameter gradients with the same shapes as the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_weights: Vec<Vec<f64>>,
    pub d_biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeroed(mlp: &Mlp) -> Self {
        Gradients {
            d_weights: mlp.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            d_biases: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Flat layout matching `Mlp::flat_params`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.d_weights.len() {
            out.extend_from_slice(&self.d_weights[l]);
            out.extend_from_slice(&self.d_biases[l]);
        }
        out
    }
}

/// Mean absolute error between predictions and targets.
pub fn l1_loss(predicted: &[f64], target: &[f64]) -> Result<f64, AlignError> {
    assert_eq!(predicted.len(), target.len(), "batch length mismatch");
    if predicted.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    let sum: f64 = predicted.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / predicted.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-3, batch_size: 256, epochs: 50, momentum: 0.9, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(AlignError::InvalidSpec { reason: "learning rate must be >= 0".into() });
        }
        if self.batch_size == 0 {
            return Err(AlignError::InvalidSpec { reason: "batch size must be >= 1".into() });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AlignError::InvalidSpec { reason: "momentum must lie in [0, 1)".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_l1: f64,
    pub val_l1: f64,
}

/// Rows of (feature vector, target score in [0, 1]) with a deterministic
/// seeded train/validation split.
#[derive(Debug, Clone)]
pub struct AlignmentDataset {
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
    train_indices: Vec<usize>,
    val_indices: Vec<usize>,
}

impl AlignmentDataset {
    pub fn with_split(
        features: Vec<Vec<f64>>,
        targets: Vec<f64>,
        seed: u64,
        val_fraction: f64,
    ) -> Result<Self, AlignError> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(AlignError::InvalidSpec {
                reason: "val_fraction must lie in (0, 1)".into(),
            });
        }
        if features.len() != targets.len() {
            return Err(AlignError::InvalidDataset {
                reason: format!("{} feature rows vs {} targets", features.len(), targets.len()),
            });
        }
        let n = features.len();
        if n < 2 {
            return Err(AlignError::DatasetTooSmall { rows: n });
        }
        let dim = features[0].len();
        for (i, row) in features.iter().enumerate() {
            if row.len() != dim {
                return Err(AlignError::DimensionMismatch { expected: dim, got: row.len() });
            }
            if !(0.0..=1.0).contains(&targets[i]) || !targets[i].is_finite() {
                return Err(AlignError::InvalidDataset {
                    reason: format!("target {} out of [0, 1] at row {i}", targets[i]),
                });
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let val_count = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
        let val_indices = order[..val_count].to_vec();
        let train_indices = order[val_count..].to_vec();
        Ok(AlignmentDataset { features, targets, train_indices, val_indices })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn train_len(&self) -> usize {
        self.train_indices.len()
    }

    pub fn val_len(&self) -> usize {
        self.val_indices.len()
    }

    fn gather(&self, indices: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            indices.iter().map(|&i| self.features[i].clone()).collect(),
            indices.iter().map(|&i| self.targets[i]).collect(),
        )
    }
}

/// Train the head with SGD + momentum. Deterministic given the dataset and
/// config seeds; history holds per-epoch mean training and validation L1.
pub fn train_head(
    dataset: &AlignmentDataset,
    mlp_spec: &MlpSpec,
    cfg: &TrainConfig,
) -> Result<(Mlp, Vec<EpochStats>), AlignError> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(AlignError::DatasetTooSmall { rows: dataset.len() });
    }
    if mlp_spec.widths[0] != dataset.feature_dim() {
        return Err(AlignError::DimensionMismatch {
            expected: dataset.feature_dim(),
            got: mlp_spec.widths[0],
        });
    }
    let mut mlp = Mlp::init(mlp_spec)?;
    let mut velocity_w: Vec<Vec<f64>> =
        mlp.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut velocity_b: Vec<Vec<f64>> = mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (val_x, val_t) = dataset.gather(&dataset.val_indices);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = dataset.train_indices.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (xs, ts) = dataset.gather(chunk);
            let (grads, loss) = mlp.backward(&xs, &ts)?;
            loss_sum += loss * chunk.len() as f64;
            for l in 0..mlp.weights.len() {
                for (v, g) in velocity_w[l].iter_mut().zip(&grads.d_weights[l]) {
                    *v = cfg.momentum * *v + g;
                }
                for (w, v) in mlp.weights[l].iter_mut().zip(&velocity_w[l]) {
                    *w -= cfg.learning_rate * v;
                }
                for (v, g) in velocity_b[l].iter_mut().zip(&grads.d_biases[l]) {
                    *v = cfg.momentum * *v + g;
                }
                for (b, v) in mlp.biases[l].iter_mut().zip(&velocity_b[l]) {
                    *b -= cfg.learning_rate * v;
                }
            }
        }
        let train_l1 = loss_sum / dataset.train_len().max(1) as f64;
        let val_pred = mlp.forward_batch(&val_x)?;
        let val_l1 = l1_loss(&val_pred, &val_t)?;
        history.push(EpochStats { epoch, train_l1, val_l1 });
    }
    Ok((mlp, history))
}

/// One prediction per occupied voxel of the store, keyed and sorted.
pub fn predict_p2_map(
    mlp: &Mlp,
    store: &VoxelFeatures,
) -> Result<BTreeMap<VoxelKey, f64>, AlignError> {
    if mlp.input_dim() != store.dim() + 1 {
        return Err(AlignError::DimensionMismatch {
            expected: store.dim() + 1,
            got: mlp.input_dim(),
        });
    }
    let mut out = BTreeMap::new();
    for key in store.keys_sorted() {
        let mut features: Vec<f64> =
            store.get(key).unwrap().iter().map(|&v| v as f64).collect();
        features.push(1.0); // occupied by construction
        out.insert(key, mlp.forward(&features)?);
    }
    Ok(out)
}

/// Combined per-location store for the alignment task: each occupied
/// voxel's aggregated features extended with every traversal's count
/// channel there (`ln(1+count)`, 0 where that traversal left the voxel
/// empty). The cross-traversal count profile is what determines the score,
/// so this is the store that makes the regression learnable at voxel
/// resolution; its dimension is `HANDCRAFTED_DIM + T`.
pub fn build_alignment_store(
    dense: &[DenseCloud],
    voxel_size: f64,
    mode: AggregationMode,
) -> Result<VoxelFeatures, AlignError> {
    let spec = VoxelGridSpec::from_clouds(dense, voxel_size)?;
    let stores: Vec<VoxelFeatures> = dense
        .iter()
        .map(|d| {
            if d.points.is_empty() {
                Ok(VoxelFeatures::empty(spec, HANDCRAFTED_DIM))
            } else {
                featurize_traversal(d, &spec, &HandcraftedFeaturizer).map(|(store, _)| store)
            }
        })
        .collect::<Result<_, SquashError>>()?;
    let aggregated = aggregate(&stores, mode)?;
    let dim = HANDCRAFTED_DIM + dense.len();
    let entries = aggregated.keys_sorted().into_iter().map(|key| {
        let mut vec = aggregated.get(key).expect("key from this store").to_vec();
        for store in &stores {
            vec.push(store.get(key).map_or(0.0, |v| v[0]));
        }
        (key, vec)
    });
    Ok(VoxelFeatures::from_parts(spec, dim, entries.collect::<Vec<_>>())?)
}

/// One location's combined store, as produced by `build_route_dataset`.
#[derive(Debug, Clone)]
pub struct LocationStore {
    pub location: f64,
    pub store: VoxelFeatures,
}

/// Assemble the alignment dataset for a scan against its history, with
/// locations derived from the history every `accum.spacing_m` meters.
#[allow(clippy::too_many_arguments)]
pub fn build_route_dataset(
    history: &[Traversal],
    scan: &Traversal,
    accum: &AccumulationConfig,
    p2_cfg: &P2Config,
    voxel_size: f64,
    mode: AggregationMode,
    seed: u64,
    val_fraction: f64,
) -> Result<(AlignmentDataset, Vec<LocationStore>), AlignError> {
    let locations = locations_for_route(history, accum);
    build_dataset_at_locations(
        history,
        scan,
        &locations,
        accum,
        p2_cfg,
        voxel_size,
        mode,
        seed,
        val_fraction,
    )
}

/// Assemble the alignment dataset at an explicit list of route locations.
///
/// Each row is `squash::query_point` evaluated on the combined alignment
/// store of the query's location (aggregate features, per-traversal count
/// channels, occupancy flag; dimension `HANDCRAFTED_DIM + T + 1`), and the
/// target is the persistence score of the same point, computed at the same
/// locations. The combined stores are returned alongside the dataset so
/// the trained head can be applied back over them per voxel.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset_at_locations(
    history: &[Traversal],
    scan: &Traversal,
    locations: &[f64],
    accum: &AccumulationConfig,
    p2_cfg: &P2Config,
    voxel_size: f64,
    mode: AggregationMode,
    seed: u64,
    val_fraction: f64,
) -> Result<(AlignmentDataset, Vec<LocationStore>), AlignError> {
    let targets =
        compute_p2_at_locations(history, scan, locations, accum, p2_cfg, false)?.scores;

    let mut frames_by_location: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (frame_idx, frame) in scan.frames().iter().enumerate() {
        let loc_idx = nearest_index(locations, frame.arclength);
        frames_by_location.entry(loc_idx).or_default().push(frame_idx);
    }
    let mut offsets = Vec::with_capacity(scan.frames().len());
    let mut total = 0usize;
    for frame in scan.frames() {
        offsets.push(total);
        total += frame.cloud.len();
    }

    let feature_dim = HANDCRAFTED_DIM + history.len() + 1;
    let mut rows = vec![Vec::new(); total];
    let mut location_stores = Vec::new();
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

        let combined = match build_alignment_store(&dense, voxel_size, mode) {
            Ok(store) => store,
            Err(AlignError::Squash(SquashError::EmptyExtent)) => {
                // no history anywhere near this location: all-zero features
                for &frame_idx in frame_indices {
                    let frame = &scan.frames()[frame_idx];
                    for k in 0..frame.cloud.len() {
                        rows[offsets[frame_idx] + k] = vec![0.0; feature_dim];
                    }
                }
                continue;
            }
            Err(e) => return Err(e),
        };

        for &frame_idx in frame_indices {
            let frame = &scan.frames()[frame_idx];
            let global = transform_to_global(&frame.cloud, &frame.pose);
            for (k, &p) in global.points.iter().enumerate() {
                let row: Vec<f64> =
                    query_point(&combined, p).iter().map(|&v| v as f64).collect();
                debug_assert_eq!(row.len(), feature_dim);
                rows[offsets[frame_idx] + k] = row;
            }
        }
        location_stores.push(LocationStore { location, store: combined });
    }

    let dataset = AlignmentDataset::with_split(rows, targets, seed, val_fraction)?;
    Ok((dataset, location_stores))
}

fn nearest_index(values: &[f64], x: f64) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, &v) in values.iter().enumerate() {
        let d = (x - v).abs();
        if d < best_dist {
            best_dist = d;
            best = i;
        }
    }
    best
}

/// Model file: magic, u32 width count, u32 widths, u64 init seed, then the
/// flat f64 parameters. Bit-exact round trip.
pub fn save_mlp(mlp: &Mlp, path: &Path) -> Result<(), AlignError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MODEL_FILE_MAGIC);
    bytes.extend_from_slice(&(mlp.widths.len() as u32).to_le_bytes());
    for &w in &mlp.widths {
        bytes.extend_from_slice(&(w as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&mlp.seed.to_le_bytes());
    for v in mlp.flat_params() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| AlignError::Io { path: path.to_path_buf(), source: e })
}

pub fn load_mlp(path: &Path) -> Result<Mlp, AlignError> {
    let bytes =
        fs::read(path).map_err(|e| AlignError::Io { path: path.to_path_buf(), source: e })?;
    let truncated =
        |at: usize| AlignError::TruncatedFile { path: path.to_path_buf(), offset: at as u64 };
    if bytes.len() < 4 || &bytes[0..4] != MODEL_FILE_MAGIC {
        return Err(AlignError::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < 8 {
        return Err(truncated(bytes.len()));
    }
    let n_widths = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut at = 8;
    if bytes.len() < at + 4 * n_widths + 8 {
        return Err(truncated(bytes.len()));
    }
    let mut widths = Vec::with_capacity(n_widths);
    for _ in 0..n_widths {
        widths.push(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize);
        at += 4;
    }
    let seed = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    at += 8;
    let mut mlp = Mlp::zeroed(widths)?;
    mlp.seed = seed;
    let n_params = mlp.num_params();
    if bytes.len() < at + 8 * n_params {
        return Err(truncated(bytes.len()));
    }
    let params: Vec<f64> = (0..n_params)
        .map(|i| f64::from_le_bytes(bytes[at + 8 * i..at + 8 * (i + 1)].try_into().unwrap()))
        .collect();
    mlp.set_flat_params(&params);
    Ok(mlp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_rows(
        rng: &mut ChaCha8Rng,
        n: usize,
        dim: usize,
    ) -> (Vec<Vec<f64>>, Vec<f64>) {
        let rows = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let targets = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        (rows, targets)
    }

    #[test]
    fn zero_network_outputs_half() {
        let mlp = Mlp::zeroed(vec![4, 8, 1]).unwrap();
        assert_eq!(mlp.forward(&[1.0, -3.0, 0.5, 9.0]).unwrap(), 0.5);
        assert_eq!(mlp.forward(&[0.0; 4]).unwrap(), 0.5);
    }

    #[test]
    fn forward_matches_independent_arithmetic() {
        // a second implementation of the same forward pass, written as
        // whole-matrix operations instead of per-neuron loops
        fn reference_forward(mlp: &Mlp, x: &[f64]) -> f64 {
            let flat = mlp.flat_params();
            let widths = mlp.widths().to_vec();
            let mut at = 0usize;
            let mut act: Vec<f64> = x.to_vec();
            for l in 0..widths.len() - 1 {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let w = &flat[at..at + fan_in * fan_out];
                at += fan_in * fan_out;
                let b = &flat[at..at + fan_out];
                at += fan_out;
                let mut next = vec![0.0; fan_out];
                for o in 0..fan_out {
                    next[o] = b[o]
                        + (0..fan_in).map(|i| w[o * fan_in + i] * act[i]).sum::<f64>();
                }
                if l + 1 == widths.len() - 1 {
                    act = next.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
                } else {
                    act = next.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect();
                }
            }
            act[0]
        }

        let mlp = Mlp::init(&MlpSpec::for_input_dim(6, 77)).unwrap();
        let x = [0.3, -1.2, 0.0, 2.5, -0.7, 1.1];
        let got = mlp.forward(&x).unwrap();
        assert!((got - reference_forward(&mlp, &x)).abs() < 1e-9);
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn forward_batch_is_stateless_and_order_preserving() {
        let mlp = Mlp::init(&MlpSpec::for_input_dim(3, 5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (rows, _) = random_rows(&mut rng, 32, 3);
        let forward: Vec<f64> = rows.iter().map(|r| mlp.forward(r).unwrap()).collect();
        let batch = mlp.forward_batch(&rows).unwrap();
        assert_eq!(forward, batch);
        let mut reversed = rows.clone();
        reversed.reverse();
        let rev = mlp.forward_batch(&reversed).unwrap();
        assert_eq!(rev.into_iter().rev().collect::<Vec<_>>(), batch);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mlp = Mlp::init(&MlpSpec::for_input_dim(4, 0)).unwrap();
        assert!(matches!(
            mlp.forward(&[1.0, 2.0]),
            Err(AlignError::DimensionMismatch { expected: 4, got: 2 })
        ));
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss(&[0.3, 0.6], &[0.3, 0.6]).unwrap(), 0.0);
        assert!((l1_loss(&[0.2, 0.8], &[0.0, 1.0]).unwrap() - 0.2).abs() < 1e-15);
        assert!((l1_loss(&[0.7], &[0.1]).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(l1_loss(&[], &[]), Err(AlignError::EmptyBatch)));
    }

    #[test]
    fn zero_loss_batch_gives_zero_gradients() {
        let mlp = Mlp::init(&MlpSpec::for_input_dim(3, 9)).unwrap();
        let xs = vec![vec![0.5, -0.5, 1.0], vec![2.0, 0.0, -1.0]];
        let targets: Vec<f64> = xs.iter().map(|x| mlp.forward(x).unwrap()).collect();
        let (grads, loss) = mlp.backward(&xs, &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_leaves_gradients_unchanged() {
        let mlp = Mlp::init(&MlpSpec::for_input_dim(4, 13)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (xs, ts) = random_rows(&mut rng, 8, 4);
        let (g1, l1) = mlp.backward(&xs, &ts).unwrap();
        let mut xs2 = xs.clone();
        xs2.extend_from_slice(&xs);
        let mut ts2 = ts.clone();
        ts2.extend_from_slice(&ts);
        let (g2, l2) = mlp.backward(&xs2, &ts2).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.flat().iter().zip(g2.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Central finite differences against the analytic gradient.
    fn max_relative_gradient_error(seed: u64) -> f64 {
        let spec = MlpSpec { widths: vec![5, 12, 8, 1], seed };
        let mlp = Mlp::init(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let (xs, ts) = random_rows(&mut rng, 8, 5);
        let (grads, _) = mlp.backward(&xs, &ts).unwrap();
        let analytic = grads.flat();
        let params = mlp.flat_params();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..params.len() {
            let mut probe = mlp.clone();
            let mut plus = params.clone();
            plus[i] += eps;
            probe.set_flat_params(&plus);
            let lp = l1_loss(&probe.forward_batch(&xs).unwrap(), &ts).unwrap();
            let mut minus = params.clone();
            minus[i] -= eps;
            probe.set_flat_params(&minus);
            let lm = l1_loss(&probe.forward_batch(&xs).unwrap(), &ts).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-4);
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [1u64, 2] {
            let err = max_relative_gradient_error(seed);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn training_is_deterministic_and_zero_lr_is_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (rows, targets) = random_rows(&mut rng, 64, 4);
        let ds = AlignmentDataset::with_split(rows, targets, 1, 0.1).unwrap();
        let spec = MlpSpec::for_input_dim(4, 3);
        let cfg = TrainConfig { epochs: 5, batch_size: 16, ..Default::default() };
        let (m1, h1) = train_head(&ds, &spec, &cfg).unwrap();
        let (m2, h2) = train_head(&ds, &spec, &cfg).unwrap();
        assert_eq!(m1.flat_params(), m2.flat_params());
        assert_eq!(h1, h2);

        let frozen = TrainConfig { learning_rate: 0.0, epochs: 4, batch_size: 16, ..Default::default() };
        let (m3, h3) = train_head(&ds, &spec, &frozen).unwrap();
        assert_eq!(m3.flat_params(), Mlp::init(&spec).unwrap().flat_params());
        for stats in &h3 {
            assert_eq!(stats.val_l1, h3[0].val_l1);
            assert!((stats.train_l1 - h3[0].train_l1).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_target_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> =
            (0..500).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let targets = vec![0.4; 500];
        let ds = AlignmentDataset::with_split(rows, targets, 2, 0.1).unwrap();
        let cfg = TrainConfig { learning_rate: 0.05, epochs: 60, batch_size: 64, ..Default::default() };
        let (_, history) = train_head(&ds, &MlpSpec::for_input_dim(6, 1), &cfg).unwrap();
        let final_val = history.last().unwrap().val_l1;
        assert!(final_val < 0.02, "validation L1 {final_val}");
    }

    #[test]
    fn count_profiles_determine_scores() {
        use crate::p2::p2_score;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..4000 {
            let profile: Vec<usize> = (0..5).map(|_| rng.random_range(0..30)).collect();
            targets.push(p2_score(&profile));
            rows.push(profile.iter().map(|&c| c as f64).collect());
        }
        let ds = AlignmentDataset::with_split(rows, targets, 3, 0.1).unwrap();
        let cfg = TrainConfig { learning_rate: 0.01, epochs: 150, batch_size: 128, ..Default::default() };
        let (_, history) = train_head(&ds, &MlpSpec::for_input_dim(5, 4), &cfg).unwrap();
        let final_val = history.last().unwrap().val_l1;
        assert!(final_val < 0.05, "validation L1 {final_val}");
    }

    #[test]
    fn dataset_validation() {
        assert!(matches!(
            AlignmentDataset::with_split(vec![vec![1.0]], vec![0.5], 0, 0.1),
            Err(AlignError::DatasetTooSmall { rows: 1 })
        ));
        assert!(matches!(
            AlignmentDataset::with_split(vec![vec![1.0], vec![2.0]], vec![0.5, 0.5], 0, 1.5),
            Err(AlignError::InvalidSpec { .. })
        ));
        assert!(matches!(
            AlignmentDataset::with_split(vec![vec![1.0], vec![1.0, 2.0]], vec![0.5, 0.5], 0, 0.1),
            Err(AlignError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            AlignmentDataset::with_split(vec![vec![1.0], vec![2.0]], vec![0.5, 1.5], 0, 0.1),
            Err(AlignError::InvalidDataset { .. })
        ));
    }

    #[test]
    fn model_file_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mlp");
        let mlp = Mlp::init(&MlpSpec { widths: vec![7, 16, 9, 1], seed: 99 }).unwrap();
        save_mlp(&mlp, &path).unwrap();
        let loaded = load_mlp(&path).unwrap();
        assert_eq!(loaded, mlp);

        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_mlp(&path), Err(AlignError::BadMagic { .. })));
    }

    #[test]
    fn predict_map_matches_forward() {
        use crate::geom::Point3;
        let spec = VoxelGridSpec {
            voxel_size: 1.0,
            min: Point3::new(-5.0, -5.0, -5.0),
            max: Point3::new(5.0, 5.0, 5.0),
        };
        let empty = VoxelFeatures::empty(spec, 3);
        let mlp = Mlp::init(&MlpSpec::for_input_dim(4, 21)).unwrap();
        assert!(predict_p2_map(&mlp, &empty).unwrap().is_empty());

        let store =
            VoxelFeatures::from_parts(spec, 3, [((1, 1, 1), vec![0.5, 1.0, -0.25])]).unwrap();
        let map = predict_p2_map(&mlp, &store).unwrap();
        assert_eq!(map.len(), 1);
        let expect = mlp.forward(&[0.5, 1.0, -0.25, 1.0]).unwrap();
        assert_eq!(map[&(1, 1, 1)], expect);
    }
}
